"""Staged pipeline: data generation, DEM1 -> DEM2 -> stacking, evaluation,
and the matched-pair ablation harness.

Every stage derives its randomness from the run seed through tagged
sub-streams, so a repeated invocation with the same config reproduces all
artifacts bit-exactly (logs carry no timestamps).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, milestone_lists, resolved_text
from .dem1 import ContextCnn
from .dem2 import (PartTokenTransformer, VerifierHandle, gen_part_occluded,
                   random_shift, select_inputs, verifier_select)
from .ensemble import (StackingModel, gallery_predictions, member_reliance,
                       stack_train, vote)
from .errors import (MissingPrerequisiteError, NumericalFailureError,
                     DegenerateGlobalError)
from .losses import (LossConfig, batch_hard_triplets, diversity_loss, id_loss,
                     triplet_loss)
from .masking import build_recon_stack, mean_fill_reconstruct
from .metrics import (cmc, export_embeddings, l2_normalize, map_score,
                      pairwise_distances, write_cmc_tsv)
from .optim import AdamW, CosineDecay, StepDecay, lr_at
from .seeding import derive_rng, derive_seed
from .synthdata import RenderedRecord, generate_dataset, load_dataset
from .tensor import Tensor

MODELS = ("dem1", "dem2", "demv", "dems")


@dataclass
class RunPaths:
    base: Path

    @property
    def checkpoints(self) -> Path:
        return self.base / "checkpoints"

    @property
    def logs(self) -> Path:
        return self.base / "logs"

    @property
    def metrics(self) -> Path:
        return self.base / "metrics"

    def ckpt(self, name: str) -> Path:
        return self.checkpoints / f"{name}.ckpt"

    def ensure(self) -> "RunPaths":
        for d in (self.base, self.checkpoints, self.logs, self.metrics):
            d.mkdir(parents=True, exist_ok=True)
        return self


def prepare_run_dir(cfg: RunConfig) -> RunPaths:
    paths = RunPaths(Path(cfg.out)).ensure()
    (paths.base / "config.resolved").write_text(resolved_text(cfg),
                                                encoding="utf-8")
    return paths


def worker_count() -> int:
    raw = os.environ.get("OFOH_THREADS", "1")
    try:
        return max(1, min(int(raw), 32))
    except ValueError:
        return 1


def _ordered_map(fn, items):
    threads = worker_count()
    if threads == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# corpus handling
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    records: list[RenderedRecord]
    train: list[RenderedRecord]
    test: list[RenderedRecord]
    label_of: dict[int, int]        # train identity -> class index

    @property
    def n_classes(self) -> int:
        return len(self.label_of)


def run_gen_data(cfg: RunConfig) -> dict:
    out = cfg.resolved_dataset_dir()
    return generate_dataset(
        out, n_ids=cfg.data_ids, imgs_per_id=cfg.data_imgs_per_id,
        n_cameras=cfg.data_cameras, occlusion_rate=cfg.data_occlusion_rate,
        h=cfg.data_height, w=cfg.data_width, seed=cfg.seed,
        query_frac=cfg.data_query_frac,
    )


def load_corpus(cfg: RunConfig) -> Corpus:
    ds = cfg.resolved_dataset_dir()
    if not (ds / "index.tsv").exists():
        raise MissingPrerequisiteError(
            f"dataset index not found at {ds}/index.tsv; run gen-data first"
        )
    records = load_dataset(ds)
    train = [r for r in records if r.split == "train"]
    test = [r for r in records if r.split != "train"]
    train_ids = sorted({r.identity for r in train})
    return Corpus(records, train, test,
                  {i: k for k, i in enumerate(train_ids)})


def _loss_config(cfg: RunConfig) -> LossConfig:
    return LossConfig(lambda_id=cfg.lambda_id, alpha_margin=cfg.alpha_margin,
                      lambda_div=cfg.lambda_div)


def _schedule(kind: str, lr: float, epochs: int, cfg: RunConfig):
    if kind == "cosine":
        return CosineDecay(base_lr=lr, total_epochs=epochs)
    milestones, factors = milestone_lists(cfg)
    return StepDecay(base_lr=lr, milestones=milestones, factors=factors)


def _pk_batches(labels: np.ndarray, ids_per_batch: int, imgs_per_batch: int,
                rng: np.random.Generator):
    """Identity-balanced batches: groups of P identities x K images each."""
    by_label: dict[int, np.ndarray] = {
        lab: np.nonzero(labels == lab)[0] for lab in np.unique(labels)
    }
    labs = rng.permutation(sorted(by_label))
    for start in range(0, len(labs), ids_per_batch):
        group = labs[start:start + ids_per_batch]
        batch = []
        for lab in group:
            pool = by_label[lab]
            take = rng.choice(pool, size=imgs_per_batch,
                              replace=len(pool) < imgs_per_batch)
            batch.extend(int(i) for i in take)
        yield batch


def _write_log(path: Path, header: list[str], rows: list[list]) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(
            f"{v:.17g}" if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# DEM1 training
# ---------------------------------------------------------------------------

def train_dem1(cfg: RunConfig, corpus: Corpus, ckpt_path: Path,
               log_path: Path, attention: str | None = None,
               mae: bool | None = None) -> ContextCnn:
    attention = cfg.attention if attention is None else attention
    mae = (cfg.mae == "on") if mae is None else mae
    lcfg = _loss_config(cfg)
    train = corpus.train
    labels = np.array([corpus.label_of[r.identity] for r in train])

    stacks = None
    if mae:
        stacks = [
            build_recon_stack(r.image, mean_fill_reconstruct,
                              derive_seed(cfg.seed, "train-recon", i),
                              mask_ratio=cfg.mask_ratio, patch=cfg.mask_patch)
            for i, r in enumerate(train)
        ]

    model = ContextCnn(n_classes=corpus.n_classes, channels=cfg.dem1_channels,
                       attention=attention, mae=mae, seed=cfg.seed,
                       head_scale=cfg.head_scale)
    params = model.parameters()
    opt = AdamW(params, base_lr=cfg.dem1_lr, weight_decay=cfg.weight_decay,
                beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    schedule = _schedule(cfg.dem1_schedule, cfg.dem1_lr, cfg.dem1_epochs, cfg)
    apply_div = cfg.div_dem1 == "on" and cfg.lambda_div != 0.0

    log_rows = []
    for epoch in range(cfg.dem1_epochs):
        lr = lr_at(schedule, epoch)
        rng = derive_rng(cfg.seed, "dem1-batches", epoch)
        sums = np.zeros(4)
        n_batches = 0
        for batch in _pk_batches(labels, cfg.dem1_batch_ids,
                                 cfg.dem1_batch_imgs, rng):
            try:
                row = _dem1_step(model, opt, lr, batch, train, labels, stacks,
                                 lcfg, apply_div)
            except DegenerateGlobalError:
                continue
            sums += row
            n_batches += 1
        means = sums / max(n_batches, 1)
        log_rows.append([epoch, lr, *means])
        if not np.isfinite(means).all():
            _write_log(log_path, ["epoch", "lr", "id", "triplet", "div",
                                  "total"], log_rows)
            raise NumericalFailureError(
                f"dem1 epoch {epoch}: non-finite loss; last good checkpoint "
                f"kept at {ckpt_path}"
            )
        save_checkpoint(ckpt_path, model.state_arrays())
    _write_log(log_path, ["epoch", "lr", "id", "triplet", "div", "total"],
               log_rows)
    return model


def _dem1_step(model, opt, lr, batch, train, labels, stacks, lcfg, apply_div):
    descs, id_terms = [], []
    for idx in batch:
        r = train[idx]
        stack = stacks[idx] if stacks is not None else None
        desc, scores = model.forward(r.image, r.part_mask, stack)
        descs.append(desc)
        id_terms.append(id_loss(scores, labels[idx], lcfg.lambda_id))
    id_mean = _mean_terms(id_terms)
    desc_values = np.stack([d.data for d in descs])
    triples = batch_hard_triplets(desc_values, labels[batch])
    if triples:
        tri_terms = [triplet_loss(descs[a], descs[p], descs[n],
                                  lcfg.alpha_margin) for a, p, n in triples]
        tri_mean = _mean_terms(tri_terms)
    else:
        tri_mean = Tensor(0.0)
    dis = id_mean + tri_mean
    if apply_div:
        div = diversity_loss(T.transpose(model.params["head.w"]))
        total = dis + div * lcfg.lambda_div
    else:
        div = Tensor(0.0)
        total = dis
    opt.zero_grad()
    total.backward(opt.params)
    opt.step(lr)
    return np.array([id_mean.item(), tri_mean.item(), div.item(),
                     total.item()])


def _mean_terms(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


# ---------------------------------------------------------------------------
# DEM2 training
# ---------------------------------------------------------------------------

def _load_dem1(ckpt_path: Path) -> ContextCnn:
    if not Path(ckpt_path).exists():
        raise MissingPrerequisiteError(
            f"verifier checkpoint missing: {ckpt_path}; run train-dem1 first"
        )
    return ContextCnn.from_state(load_checkpoint(ckpt_path))


def train_dem2(cfg: RunConfig, corpus: Corpus, dem1_ckpt: Path,
               ckpt_path: Path, log_path: Path,
               use_verifier: bool | None = None) -> PartTokenTransformer:
    use_verifier = (cfg.verifier == "on") if use_verifier is None else use_verifier
    verifier = VerifierHandle(_load_dem1(dem1_ckpt), mean_fill_reconstruct,
                              mask_ratio=cfg.mask_ratio,
                              mask_patch=cfg.mask_patch)
    lcfg = _loss_config(cfg)
    train = corpus.train
    labels = np.array([corpus.label_of[r.identity] for r in train])

    model = PartTokenTransformer(
        n_classes=corpus.n_classes, h=cfg.data_height, w=cfg.data_width,
        depth=cfg.dem2_depth, dim=cfg.dem2_dim, heads=cfg.dem2_heads,
        m_selected=cfg.dem2_m, patch=cfg.dem2_patch, seed=cfg.seed,
        head_scale=cfg.head_scale)

    # the verifier and the part masks are frozen, so which parts are selected
    # is decided once per record (on the epoch-0 shifted candidates); the
    # shifts themselves are re-rolled every epoch as augmentation
    base_occ: list[dict[int, np.ndarray]] = []
    sel_parts: list[list[int | None]] = []
    for i, r in enumerate(train):
        seed_i = derive_seed(cfg.seed, "dem2-train-cand", i)
        parts = [p for p in range(1, model.n_parts_limit + 1)
                 if (r.part_mask == p).any()]
        occ = {p: gen_part_occluded(r.image, r.part_mask, p) for p in parts}
        slots: list[int | None] = list(parts)
        while len(slots) < cfg.dem2_m:
            slots.append(None)   # padded with the unoccluded original
        cand0 = [
            (random_shift(occ[p], cfg.dem2_max_shift,
                          derive_seed(seed_i, "cand", p))
             if p is not None else np.array(r.image, copy=True))
            for p in slots
        ]
        if use_verifier:
            order = verifier_select(r.image, cand0, verifier, cfg.dem2_m,
                                    r.part_mask, derive_seed(seed_i, "verify"))
        else:
            rng = derive_rng(seed_i, "random-select")
            order = list(rng.permutation(len(cand0))[:cfg.dem2_m])
        base_occ.append(occ)
        sel_parts.append([slots[k] for k in order])

    def shifted_inputs(idx: int, epoch: int) -> list[np.ndarray]:
        out = []
        for p in sel_parts[idx]:
            if p is None:
                out.append(np.array(train[idx].image, copy=True))
            else:
                out.append(random_shift(
                    base_occ[idx][p], cfg.dem2_max_shift,
                    derive_seed(cfg.seed, "dem2-shift", idx, p, epoch)))
        return out

    opt = AdamW(model.parameters(), base_lr=cfg.dem2_lr,
                weight_decay=cfg.weight_decay, beta1=cfg.beta1,
                beta2=cfg.beta2, epsilon=cfg.epsilon)
    schedule = _schedule(cfg.dem2_schedule, cfg.dem2_lr, cfg.dem2_epochs, cfg)
    apply_div = cfg.div_dem2 == "on" and cfg.lambda_div != 0.0

    log_rows = []
    for epoch in range(cfg.dem2_epochs):
        lr = lr_at(schedule, epoch)
        rng = derive_rng(cfg.seed, "dem2-batches", epoch)
        sums = np.zeros(4)
        n_batches = 0
        for batch in _pk_batches(labels, cfg.dem2_batch_ids,
                                 cfg.dem2_batch_imgs, rng):
            descs, id_terms = [], []
            for idx in batch:
                emb, scores = model.forward_selected(train[idx].image,
                                                     shifted_inputs(idx, epoch))
                descs.append(emb)
                id_terms.append(id_loss(scores, labels[idx], lcfg.lambda_id))
            id_mean = _mean_terms(id_terms)
            triples = batch_hard_triplets(np.stack([d.data for d in descs]),
                                          labels[batch])
            tri_mean = (_mean_terms([
                triplet_loss(descs[a], descs[p], descs[n], lcfg.alpha_margin)
                for a, p, n in triples]) if triples else Tensor(0.0))
            dis = id_mean + tri_mean
            if apply_div:
                div = diversity_loss(T.transpose(model.params["head.w"]))
                total = dis + div * lcfg.lambda_div
            else:
                div = Tensor(0.0)
                total = dis
            opt.zero_grad()
            total.backward(opt.params)
            opt.step(lr)
            sums += [id_mean.item(), tri_mean.item(), div.item(), total.item()]
            n_batches += 1
        means = sums / max(n_batches, 1)
        log_rows.append([epoch, lr, *means])
        if not np.isfinite(means).all():
            _write_log(log_path, ["epoch", "lr", "id", "triplet", "div",
                                  "total"], log_rows)
            raise NumericalFailureError(
                f"dem2 epoch {epoch}: non-finite loss; last good checkpoint "
                f"kept at {ckpt_path}"
            )
        save_checkpoint(ckpt_path, model.state_arrays())
    _write_log(log_path, ["epoch", "lr", "id", "triplet", "div", "total"],
               log_rows)
    return model


# ---------------------------------------------------------------------------
# member inference and stacking
# ---------------------------------------------------------------------------

def _dem1_outputs(model: ContextCnn, cfg: RunConfig,
                  records: list[RenderedRecord], tag: str,
                  seed_salt: str) -> tuple[np.ndarray, np.ndarray]:
    """Descriptors and probabilities; without the reconstruction branch one
    pass per record suffices, with it several mask draws are averaged."""
    samples = max(1, cfg.dem1_eval_samples) if model.mae else 1

    def one(item):
        i, r = item
        embs, probs = [], []
        for k in range(samples):
            stack = None
            if model.mae:
                stack = build_recon_stack(
                    r.image, mean_fill_reconstruct,
                    derive_seed(cfg.seed, seed_salt, i, k),
                    mask_ratio=cfg.mask_ratio, patch=cfg.mask_patch)
            desc, scores = model.forward(r.image, r.part_mask, stack)
            embs.append(desc.data)
            probs.append(scores.data)
        return np.mean(embs, axis=0), np.mean(probs, axis=0)

    outs = _ordered_map(one, list(enumerate(records)))
    return (np.stack([o[0] for o in outs]), np.stack([o[1] for o in outs]))


def _dem2_outputs(model: PartTokenTransformer, verifier: VerifierHandle,
                  cfg: RunConfig, records: list[RenderedRecord],
                  seed_salt: str,
                  use_verifier: bool) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings and probabilities, averaged over a few seeded candidate
    draws per record to damp selection/shift noise."""
    samples = max(1, cfg.dem2_eval_samples)

    def one(item):
        i, r = item
        embs, probs = [], []
        for k in range(samples):
            sel = select_inputs(model, r.image, r.part_mask, verifier,
                                derive_seed(cfg.seed, seed_salt, i, k),
                                use_verifier=use_verifier,
                                max_shift=cfg.dem2_max_shift)
            emb, scores = model.forward_selected(r.image, sel)
            embs.append(emb.data)
            probs.append(scores.data)
        return np.mean(embs, axis=0), np.mean(probs, axis=0)

    outs = _ordered_map(one, list(enumerate(records)))
    return (np.stack([o[0] for o in outs]), np.stack([o[1] for o in outs]))


def train_stack(cfg: RunConfig, corpus: Corpus, dem1_ckpt: Path,
                dem2_ckpt: Path, ckpt_path: Path, log_path: Path,
                lambda_div: float | None = None) -> StackingModel:
    for path, stage in ((dem1_ckpt, "train-dem1"), (dem2_ckpt, "train-dem2")):
        if not Path(path).exists():
            raise MissingPrerequisiteError(
                f"checkpoint missing: {path}; run {stage} first"
            )
    dem1 = ContextCnn.from_state(load_checkpoint(dem1_ckpt))
    dem2 = PartTokenTransformer.from_state(load_checkpoint(dem2_ckpt))
    verifier = VerifierHandle(dem1, mean_fill_reconstruct,
                              mask_ratio=cfg.mask_ratio,
                              mask_patch=cfg.mask_patch)
    labels = np.array([corpus.label_of[r.identity] for r in corpus.train])
    _, p1 = _dem1_outputs(dem1, cfg, corpus.train, "dem1", "train-recon")
    _, p2 = _dem2_outputs(dem2, verifier, cfg, corpus.train,
                          "dem2-train-cand", cfg.verifier == "on")
    member_preds = np.concatenate([p1, p2], axis=1)

    lcfg = _loss_config(cfg)
    if lambda_div is not None:
        lcfg = LossConfig(lambda_id=lcfg.lambda_id,
                          alpha_margin=lcfg.alpha_margin,
                          lambda_div=lambda_div)
    model, history = stack_train(member_preds, labels, lcfg,
                                 epochs=cfg.stack_epochs, seed=cfg.seed,
                                 lr=cfg.stack_lr,
                                 apply_diversity=cfg.div_stack == "on")
    if not np.isfinite(history).all():
        raise NumericalFailureError("stack training produced non-finite loss")
    _write_log(log_path, ["epoch", "loss"],
               [[i, v] for i, v in enumerate(history)])
    save_checkpoint(ckpt_path, model.state_arrays())
    return model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class _Protocol:
    q_idx: list[int]
    g_idx: list[int]
    q_ids: np.ndarray
    q_cams: np.ndarray
    g_ids: np.ndarray
    g_cams: np.ndarray


def _protocol(corpus: Corpus) -> _Protocol:
    test = corpus.test
    q_idx = [i for i, r in enumerate(test) if r.split == "query"]
    g_idx = [i for i, r in enumerate(test) if r.split == "gallery"]
    return _Protocol(
        q_idx, g_idx,
        np.array([test[i].identity for i in q_idx]),
        np.array([test[i].camera for i in q_idx]),
        np.array([test[i].identity for i in g_idx]),
        np.array([test[i].camera for i in g_idx]),
    )


def metrics_from_dists(dists: np.ndarray, proto: _Protocol,
                       cfg: RunConfig) -> dict:
    k = min(cfg.cmc_k, len(proto.g_idx))
    curve = cmc(dists, proto.q_ids, proto.q_cams, proto.g_ids, proto.g_cams, k)
    return {
        "rank1": float(curve[0]),
        "rank5": float(curve[min(4, k - 1)]),
        "map": map_score(dists, proto.q_ids, proto.q_cams, proto.g_ids,
                         proto.g_cams),
        "cmc": curve,
    }


def _member_dists(embeddings: np.ndarray, proto: _Protocol,
                  cfg: RunConfig) -> np.ndarray:
    emb = l2_normalize(embeddings) if cfg.cosine == "on" else embeddings
    return pairwise_distances(emb[proto.q_idx], emb[proto.g_idx])


def retrieval_metrics(embeddings: np.ndarray, corpus: Corpus,
                      cfg: RunConfig) -> dict:
    proto = _protocol(corpus)
    return metrics_from_dists(_member_dists(embeddings, proto, cfg), proto, cfg)


def ensemble_dists(member_dists: list[np.ndarray],
                   weights: np.ndarray | None = None) -> np.ndarray:
    """Fused pseudo-distances from the members' per-query gallery predictions.

    Each member's distance row becomes a probability vector over gallery
    candidates; voting averages them (equal weights), stacking supplies
    learned member weights. Lower fused distance = higher fused probability.
    """
    preds = [gallery_predictions(d) for d in member_dists]
    if weights is None:
        fused = np.stack([vote(list(rows)) for rows in zip(*preds)])
    else:
        fused = sum(w * p for w, p in zip(weights, preds))
    return -fused


def evaluate(cfg: RunConfig, corpus: Corpus, paths: RunPaths) -> dict[str, dict]:
    for name, stage in (("dem1", "train-dem1"), ("dem2", "train-dem2"),
                        ("stack", "train-stack")):
        if not paths.ckpt(name).exists():
            raise MissingPrerequisiteError(
                f"checkpoint missing: {paths.ckpt(name)}; run {stage} first"
            )
    dem1 = ContextCnn.from_state(load_checkpoint(paths.ckpt("dem1")))
    dem2 = PartTokenTransformer.from_state(load_checkpoint(paths.ckpt("dem2")))
    stack = StackingModel.from_state(load_checkpoint(paths.ckpt("stack")))

    verifier = VerifierHandle(dem1, mean_fill_reconstruct,
                              mask_ratio=cfg.mask_ratio,
                              mask_patch=cfg.mask_patch)
    d1, _ = _dem1_outputs(dem1, cfg, corpus.test, "dem1", "eval-recon")
    d2, _ = _dem2_outputs(dem2, verifier, cfg, corpus.test, "dem2-eval-cand",
                          cfg.verifier == "on")
    proto = _protocol(corpus)
    dist1 = _member_dists(d1, proto, cfg)
    dist2 = _member_dists(d2, proto, cfg)
    dists = {
        "dem1": dist1,
        "dem2": dist2,
        "demv": ensemble_dists([dist1, dist2]),
        "dems": ensemble_dists([dist1, dist2], member_reliance(stack)),
    }
    embeddings = {"dem1": d1, "dem2": d2}

    results = {}
    lines = ["model\trank1\trank5\tmap"]
    test = corpus.test
    for model_name in MODELS:
        res = metrics_from_dists(dists[model_name], proto, cfg)
        results[model_name] = res
        lines.append(f"{model_name}\t{res['rank1']:.17g}\t"
                     f"{res['rank5']:.17g}\t{res['map']:.17g}")
        write_cmc_tsv(paths.metrics / f"cmc_{model_name}.tsv", res["cmc"])
        if model_name in embeddings:
            for split, idx in (("query", proto.q_idx), ("gallery", proto.g_idx)):
                export_embeddings(
                    paths.metrics / f"embeddings_{model_name}_{split}.tsv",
                    [test[i].identity for i in idx],
                    [test[i].camera for i in idx],
                    embeddings[model_name][idx],
                )
    (paths.metrics / "metrics.tsv").write_text("\n".join(lines) + "\n",
                                               encoding="utf-8")
    return results


# ---------------------------------------------------------------------------
# full stages (CLI entry points call these)
# ---------------------------------------------------------------------------

def run_train_dem1(cfg: RunConfig) -> Path:
    paths = prepare_run_dir(cfg)
    corpus = load_corpus(cfg)
    train_dem1(cfg, corpus, paths.ckpt("dem1"), paths.logs / "train_dem1.tsv")
    return paths.ckpt("dem1")


def run_train_dem2(cfg: RunConfig) -> Path:
    paths = prepare_run_dir(cfg)
    corpus = load_corpus(cfg)
    train_dem2(cfg, corpus, paths.ckpt("dem1"), paths.ckpt("dem2"),
               paths.logs / "train_dem2.tsv")
    return paths.ckpt("dem2")


def run_train_stack(cfg: RunConfig) -> Path:
    paths = prepare_run_dir(cfg)
    corpus = load_corpus(cfg)
    train_stack(cfg, corpus, paths.ckpt("dem1"), paths.ckpt("dem2"),
                paths.ckpt("stack"), paths.logs / "train_stack.tsv")
    return paths.ckpt("stack")


def run_eval(cfg: RunConfig) -> dict[str, dict]:
    paths = prepare_run_dir(cfg)
    corpus = load_corpus(cfg)
    return evaluate(cfg, corpus, paths)


def run_full_pipeline(cfg: RunConfig) -> dict[str, dict]:
    """gen-data through eval in one process (used by tests and ablations)."""
    run_gen_data(cfg)
    run_train_dem1(cfg)
    run_train_dem2(cfg)
    run_train_stack(cfg)
    return run_eval(cfg)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

LAMBDA_SWEEP = (0.0, 0.001, 0.01, 0.1)


def _pair_table(path: Path, header: str, rows: list[tuple[str, float, float]]):
    lines = [f"module\trank1\tmap"]
    for name, r1, mp in rows:
        lines.append(f"{name}\t{r1:.17g}\t{mp:.17g}")
    if len(rows) == 2:
        lines.append(f"delta\t{rows[1][1] - rows[0][1]:.17g}"
                     f"\t{rows[1][2] - rows[0][2]:.17g}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def ablate(cfg: RunConfig) -> dict[str, list]:
    """Seed-matched pairs: attention mode, MAE branch, verifier, lambda sweep.

    Writes one TSV per comparison under <out>/metrics/. Deltas are reported,
    not asserted; every arm shares the run seed.
    """
    paths = prepare_run_dir(cfg)
    corpus = load_corpus(cfg)
    arms_dir = paths.base / "ablate"
    results: dict[str, list] = {}

    def eval_dem1(model: ContextCnn) -> dict:
        tables, _ = _dem1_outputs(model, cfg, corpus.test, "dem1", "eval-recon")
        return retrieval_metrics(tables, corpus, cfg)

    def arm_dem1(name: str, attention: str, mae: bool) -> tuple[ContextCnn, dict]:
        d = RunPaths(arms_dir / name).ensure()
        model = train_dem1(cfg, corpus, d.ckpt("dem1"),
                           d.logs / "train_dem1.tsv", attention=attention,
                           mae=mae)
        return model, eval_dem1(model)

    base_attention = cfg.attention
    other_attention = "softmax" if base_attention == "sparsemax" else "sparsemax"
    base_model, base_res = arm_dem1("dem1-base", base_attention, True)
    other_model, other_res = arm_dem1(f"dem1-{other_attention}",
                                      other_attention, True)
    softmax_row = (other_res if other_attention == "softmax" else base_res)
    sparsemax_row = (base_res if base_attention == "sparsemax" else other_res)
    results["attention"] = [("dem1 softmax", softmax_row["rank1"],
                             softmax_row["map"]),
                            ("dem1 sparsemax", sparsemax_row["rank1"],
                             sparsemax_row["map"])]
    _pair_table(paths.metrics / "ablation_attention.tsv", "attention",
                results["attention"])

    _, nomae_res = arm_dem1("dem1-nomae", base_attention, False)
    results["mae"] = [("dem1 without reconstruction branch",
                       nomae_res["rank1"], nomae_res["map"]),
                      ("dem1 with reconstruction branch",
                       base_res["rank1"], base_res["map"])]
    _pair_table(paths.metrics / "ablation_mae.tsv", "mae", results["mae"])

    # verifier pair reuses the base DEM1 as the frozen selector
    base_dir = RunPaths(arms_dir / "dem1-base")
    verifier = VerifierHandle(base_model, mean_fill_reconstruct,
                              mask_ratio=cfg.mask_ratio,
                              mask_patch=cfg.mask_patch)
    rows = []
    dem2_models = {}
    for flag, name in ((False, "dem2 without selection signal"),
                       (True, "dem2 with selection signal")):
        d = RunPaths(arms_dir / f"dem2-verifier-{'on' if flag else 'off'}").ensure()
        model = train_dem2(cfg, corpus, base_dir.ckpt("dem1"), d.ckpt("dem2"),
                           d.logs / "train_dem2.tsv", use_verifier=flag)
        dem2_models[flag] = model
        emb, _ = _dem2_outputs(model, verifier, cfg, corpus.test,
                               "dem2-eval-cand", flag)
        res = retrieval_metrics(emb, corpus, cfg)
        rows.append((name, res["rank1"], res["map"]))
    results["verifier"] = rows
    _pair_table(paths.metrics / "ablation_verifier.tsv", "verifier", rows)

    # lambda sweep over the stacking regularizer, members frozen
    dem2_model = dem2_models[True]
    labels = np.array([corpus.label_of[r.identity] for r in corpus.train])
    _, p1_train = _dem1_outputs(base_model, cfg, corpus.train, "dem1",
                                "train-recon")
    _, p2_train = _dem2_outputs(dem2_model, verifier, cfg, corpus.train,
                                "dem2-train-cand", True)
    member_train = np.concatenate([p1_train, p2_train], axis=1)
    d1_test, _ = _dem1_outputs(base_model, cfg, corpus.test, "dem1",
                               "eval-recon")
    d2_test, _ = _dem2_outputs(dem2_model, verifier, cfg, corpus.test,
                               "dem2-eval-cand", True)
    proto = _protocol(corpus)
    dist1 = _member_dists(d1_test, proto, cfg)
    dist2 = _member_dists(d2_test, proto, cfg)

    sweep_rows = []
    for lam in LAMBDA_SWEEP:
        lcfg = LossConfig(lambda_id=cfg.lambda_id,
                          alpha_margin=cfg.alpha_margin, lambda_div=lam)
        model, _ = stack_train(member_train, labels, lcfg,
                               epochs=cfg.stack_epochs, seed=cfg.seed,
                               lr=cfg.stack_lr)
        fused = ensemble_dists([dist1, dist2], member_reliance(model))
        res = metrics_from_dists(fused, proto, cfg)
        sweep_rows.append((lam, res["rank1"], res["map"]))
    best = max(sweep_rows, key=lambda r: r[1])
    lines = ["lambda\trank1\tmap"]
    for lam, r1, mp in sweep_rows:
        lines.append(f"{lam:.17g}\t{r1:.17g}\t{mp:.17g}")
    lines.append(f"best_lambda\t{best[0]:.17g}\t{best[1]:.17g}")
    (paths.metrics / "ablation_lambda.tsv").write_text(
        "\n".join(lines) + "\n", encoding="utf-8")
    results["lambda"] = sweep_rows
    return results
