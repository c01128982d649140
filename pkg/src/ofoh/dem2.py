"""Part-occluded token transformer classifier (DEM2).

Candidate part-occluded images are generated by zeroing one body part at a
time and randomly shifting the result. A frozen context-CNN verifier embeds
the original and the candidates; the m candidates most cosine-similar to
the original are channel-concatenated with it, patchified, layer-normed,
linearly projected, and fed through a pre-norm MHSA/MLP encoder. The class
token's final embedding is the identity descriptor.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .dem1 import ContextCnn, dem1_forward, he, zeros_param
from .errors import ContractError, ShapeError
from .seeding import derive_rng, derive_seed
from .synthdata import P_PARTS
from .tensor import Tensor, softmax_rows


def gen_part_occluded(image: np.ndarray, part_mask: np.ndarray,
                      part_id: int) -> np.ndarray:
    """Zero out the pixels of one labeled body part."""
    if not 1 <= part_id <= P_PARTS:
        raise ContractError(f"part_id {part_id} outside 1..{P_PARTS}")
    out = np.array(image, dtype=np.float64, copy=True)
    out[part_mask == part_id] = 0.0
    return out


def random_shift(image: np.ndarray, max_shift: int, seed: int) -> np.ndarray:
    """Translate by a seeded uniform (dx, dy), zero-padding vacated pixels."""
    h, w = image.shape[:2]
    if max_shift < 0 or max_shift >= min(h, w) / 4:
        raise ContractError(
            f"max_shift {max_shift} must satisfy 0 <= max_shift < min(H,W)/4"
        )
    if max_shift == 0:
        return np.array(image, dtype=np.float64, copy=True)
    rng = derive_rng(seed, "shift")
    dx = int(rng.integers(-max_shift, max_shift + 1))
    dy = int(rng.integers(-max_shift, max_shift + 1))
    out = np.zeros_like(np.asarray(image, dtype=np.float64))
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = image[src_y, src_x]
    return out


class VerifierHandle:
    """Frozen context-CNN used as the embedding function for selection."""

    def __init__(self, model: ContextCnn, reconstructor, mask_ratio: float = 0.75,
                 mask_patch: int = 8, trained: bool = True):
        self.model = model
        self.reconstructor = reconstructor
        self.mask_ratio = mask_ratio
        self.mask_patch = mask_patch
        self.trained = trained

    def embed(self, image: np.ndarray, part_mask: np.ndarray,
              seed: int) -> np.ndarray:
        desc, _ = dem1_forward(self.model, image, part_mask,
                               self.reconstructor, seed,
                               mask_ratio=self.mask_ratio,
                               mask_patch=self.mask_patch)
        return desc.data


def verifier_select(original: np.ndarray, candidates: list[np.ndarray],
                    verifier: VerifierHandle, m: int, part_mask: np.ndarray,
                    seed: int) -> list[int]:
    """Indices of the m candidates most cosine-similar to the original.

    Returned in descending similarity order with ties broken by candidate
    index. All embeddings share one mask-sampling seed so the comparison is
    apples to apples.
    """
    if not verifier.trained:
        raise ContractError("verifier has not been trained")
    if m > len(candidates):
        raise ContractError(f"m={m} exceeds {len(candidates)} candidates")
    ref = verifier.embed(original, part_mask, seed)
    ref = ref / max(np.linalg.norm(ref), 1e-12)
    sims = []
    for cand in candidates:
        e = verifier.embed(cand, part_mask, seed)
        sims.append(float(ref @ (e / max(np.linalg.norm(e), 1e-12))))
    order = sorted(range(len(candidates)), key=lambda i: (-sims[i], i))
    return order[:m]


class PartTokenTransformer:
    """Trainable DEM2 model; parameters checkpoint under the "dem2." prefix."""

    def __init__(self, n_classes: int, h: int, w: int, depth: int = 3,
                 dim: int = 64, heads: int = 4, m_selected: int = 2,
                 patch: int = 8, seed: int = 0, head_scale: float = 4.0):
        if h % patch or w % patch:
            raise ContractError(f"patch {patch} must divide image dims {h}x{w}")
        if dim % heads:
            raise ContractError(f"heads {heads} must divide hidden dim {dim}")
        self.n_classes = n_classes
        self.h, self.w = h, w
        self.depth, self.dim, self.heads = depth, dim, heads
        self.m_selected = m_selected
        self.patch = patch
        self.head_scale = float(head_scale)
        self.n_parts_limit = P_PARTS
        self.n_tokens = (h // patch) * (w // patch)
        self.patch_dim = patch * patch * 3 * (m_selected + 1)
        self.mlp_hidden = 2 * dim

        rng = derive_rng(seed, "dem2-init")
        p = {}
        p["patch_ln.gamma"] = Tensor(np.ones(self.patch_dim), requires_grad=True)
        p["patch_ln.beta"] = zeros_param(self.patch_dim)
        p["embed.w"] = he(rng, (self.patch_dim, dim), self.patch_dim)
        p["embed.b"] = zeros_param(dim)
        p["cls"] = Tensor(rng.normal(0, 0.02, size=(1, dim)), requires_grad=True)
        p["pos"] = Tensor(rng.normal(0, 0.02, size=(self.n_tokens + 1, dim)),
                          requires_grad=True)
        for i in range(depth):
            b = f"block{i}."
            p[b + "ln1.gamma"] = Tensor(np.ones(dim), requires_grad=True)
            p[b + "ln1.beta"] = zeros_param(dim)
            for name in ("wq", "wk", "wv", "wo"):
                p[b + f"attn.{name}"] = Tensor(
                    rng.normal(0, np.sqrt(1.0 / dim), size=(dim, dim)),
                    requires_grad=True)
            for name in ("bq", "bk", "bv", "bo"):
                p[b + f"attn.{name}"] = zeros_param(dim)
            p[b + "ln2.gamma"] = Tensor(np.ones(dim), requires_grad=True)
            p[b + "ln2.beta"] = zeros_param(dim)
            p[b + "mlp.w1"] = he(rng, (dim, self.mlp_hidden), dim)
            p[b + "mlp.b1"] = zeros_param(self.mlp_hidden)
            p[b + "mlp.w2"] = he(rng, (self.mlp_hidden, dim), self.mlp_hidden)
            p[b + "mlp.b2"] = zeros_param(dim)
        p["head.w"] = Tensor(rng.normal(0, np.sqrt(1.0 / dim),
                                        size=(dim, n_classes)), requires_grad=True)
        self.params = p

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self, prefix: str = "dem2.") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self.params.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_arrays(self, prefix: str = "dem2.") -> dict[str, np.ndarray]:
        out = {prefix + k: v.data for k, v in self.params.items()}
        out[prefix + "meta"] = np.array([
            self.n_classes, self.h, self.w, self.depth, self.dim, self.heads,
            self.m_selected, self.patch, self.head_scale,
        ], dtype=np.float64)
        return out

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray],
                   prefix: str = "dem2.") -> "PartTokenTransformer":
        meta = arrays[prefix + "meta"]
        model = cls(n_classes=int(meta[0]), h=int(meta[1]), w=int(meta[2]),
                    depth=int(meta[3]), dim=int(meta[4]), heads=int(meta[5]),
                    m_selected=int(meta[6]), patch=int(meta[7]),
                    head_scale=float(meta[8]))
        for k, t in model.params.items():
            src = arrays[prefix + k]
            if src.shape != t.data.shape:
                raise ShapeError(
                    f"checkpoint tensor {prefix + k} has shape {src.shape}, "
                    f"expected {t.data.shape}"
                )
            t.data = src.astype(np.float64)
        return model

    # -- forward ------------------------------------------------------------

    def tokenize(self, original: np.ndarray,
                 selected: list[np.ndarray]) -> Tensor:
        """Patch tokens of [original | selected...], cls prepended, pos added."""
        if len(selected) != self.m_selected:
            raise ContractError(
                f"expected {self.m_selected} selected images, got {len(selected)}"
            )
        for img in selected:
            if img.shape != original.shape:
                raise ShapeError("selected image shape differs from original")
        stack = np.concatenate([original] + list(selected), axis=2)
        h, w, c = stack.shape
        if h != self.h or w != self.w:
            raise ContractError(
                f"model tokenizes {self.h}x{self.w} images, got {h}x{w}"
            )
        pp = self.patch
        patches = (stack.reshape(h // pp, pp, w // pp, pp, c)
                        .transpose(0, 2, 1, 3, 4)
                        .reshape(self.n_tokens, self.patch_dim))
        p = self.params
        tokens = T.layer_norm_rows(Tensor(patches), p["patch_ln.gamma"],
                                   p["patch_ln.beta"])
        tokens = T.matmul(tokens, p["embed.w"]) + p["embed.b"]
        seq = T.concat([p["cls"], tokens], axis=0)
        return seq + p["pos"]

    def _mhsa(self, xn: Tensor, b: str) -> Tensor:
        p = self.params
        q = T.matmul(xn, p[b + "attn.wq"]) + p[b + "attn.bq"]
        k = T.matmul(xn, p[b + "attn.wk"]) + p[b + "attn.bk"]
        v = T.matmul(xn, p[b + "attn.wv"]) + p[b + "attn.bv"]
        dh = self.dim // self.heads
        outs = []
        for hh in range(self.heads):
            qs = T.narrow(q, 1, hh * dh, dh)
            ks = T.narrow(k, 1, hh * dh, dh)
            vs = T.narrow(v, 1, hh * dh, dh)
            scores = T.matmul(qs, T.transpose(ks)) * (1.0 / np.sqrt(dh))
            outs.append(T.matmul(softmax_rows(scores), vs))
        merged = T.concat(outs, axis=1)
        return T.matmul(merged, p[b + "attn.wo"]) + p[b + "attn.bo"]

    def _mlp(self, xn: Tensor, b: str) -> Tensor:
        p = self.params
        hidden = T.gelu(T.matmul(xn, p[b + "mlp.w1"]) + p[b + "mlp.b1"])
        return T.matmul(hidden, p[b + "mlp.w2"]) + p[b + "mlp.b2"]

    def encoder_forward(self, seq: Tensor) -> Tensor:
        """Pre-norm residual blocks; returns the final class-token embedding."""
        p = self.params
        x = seq
        for i in range(self.depth):
            b = f"block{i}."
            x = x + self._mhsa(T.layer_norm_rows(x, p[b + "ln1.gamma"],
                                                 p[b + "ln1.beta"]), b)
            x = x + self._mlp(T.layer_norm_rows(x, p[b + "ln2.gamma"],
                                                p[b + "ln2.beta"]), b)
        return T.reshape(T.narrow(x, 0, 0, 1), (self.dim,))

    def classify(self, embedding: Tensor) -> Tensor:
        """Linear classification head over the class token, normalized so
        logits are scaled cosines (same design as the context CNN head)."""
        protos = T.l2_normalize_rows(T.transpose(self.params["head.w"]))
        emb = T.l2_normalize_rows(T.reshape(embedding, (1, self.dim)))
        logits = T.matmul(emb, T.transpose(protos)) * self.head_scale
        return T.reshape(softmax_rows(logits), (self.n_classes,))

    def forward_selected(self, original: np.ndarray,
                         selected: list[np.ndarray]) -> tuple[Tensor, Tensor]:
        seq = self.tokenize(original, selected)
        embedding = self.encoder_forward(seq)
        return embedding, self.classify(embedding)


def build_candidates(image: np.ndarray, part_mask: np.ndarray, seed: int,
                     max_shift: int = 3) -> list[np.ndarray]:
    """One shifted part-occluded image per part present in the mask."""
    parts = [p for p in range(1, P_PARTS + 1) if (part_mask == p).any()]
    cands = []
    for p in parts:
        occluded = gen_part_occluded(image, part_mask, p)
        cands.append(random_shift(occluded, max_shift,
                                  derive_seed(seed, "cand", p)))
    return cands


def select_inputs(model: PartTokenTransformer, image: np.ndarray,
                  part_mask: np.ndarray, verifier: VerifierHandle | None,
                  seed: int, use_verifier: bool = True,
                  max_shift: int = 3) -> list[np.ndarray]:
    """Candidate generation plus selection; pads with the original if the
    mask exposes fewer parts than the model consumes."""
    cands = build_candidates(image, part_mask, seed, max_shift)
    m = model.m_selected
    while len(cands) < m:
        cands.append(np.array(image, dtype=np.float64, copy=True))
    if use_verifier:
        if verifier is None:
            raise ContractError("verifier selection requested without a verifier")
        order = verifier_select(image, cands, verifier, m, part_mask,
                                derive_seed(seed, "verify"))
    else:
        rng = derive_rng(seed, "random-select")
        order = list(rng.permutation(len(cands))[:m])
    return [cands[i] for i in order]


def dem2_forward(model: PartTokenTransformer, image: np.ndarray,
                 part_mask: np.ndarray, verifier: VerifierHandle | None,
                 seed: int, use_verifier: bool = True,
                 max_shift: int = 3) -> tuple[Tensor, Tensor]:
    """(descriptor, identity probabilities) for one image."""
    selected = select_inputs(model, image, part_mask, verifier, seed,
                             use_verifier=use_verifier, max_shift=max_shift)
    return model.forward_selected(image, selected)
