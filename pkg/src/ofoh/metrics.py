"""Retrieval evaluation: pairwise distances, CMC, mAP, top-k lists.

Protocol: for each query, gallery entries sharing both its identity and
its camera are excluded before ranking. Ties in distance break by gallery
index so results are reproducible to the bit.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ContractError, ProtocolError, ShapeError


def pairwise_distances(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix, queries x gallery."""
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if queries.ndim != 2 or gallery.ndim != 2 or queries.shape[1] != gallery.shape[1]:
        raise ShapeError(
            f"descriptor dims differ: {queries.shape} vs {gallery.shape}"
        )
    diff = queries[:, None, :] - gallery[None, :, :]
    return np.sqrt(np.maximum((diff * diff).sum(axis=2), 0.0))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    return x / norms


def _ranked_matches(dists, q_ids, q_cams, g_ids, g_cams):
    """Per query: boolean relevance of the kept gallery, in ranked order."""
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    out = []
    for qi in range(dists.shape[0]):
        keep = ~((g_ids == q_ids[qi]) & (g_cams == q_cams[qi]))
        kept_idx = np.nonzero(keep)[0]
        if not ((g_ids[kept_idx] == q_ids[qi]).any()):
            raise ProtocolError(
                f"query {qi} (identity {q_ids[qi]}, camera {q_cams[qi]}) "
                f"has no valid gallery match"
            )
        order = kept_idx[np.argsort(dists[qi, kept_idx], kind="stable")]
        out.append(g_ids[order] == q_ids[qi])
    return out


def cmc(dists, q_ids, q_cams, g_ids, g_cams, k_max: int) -> np.ndarray:
    """Cumulative match curve over ranks 1..k_max."""
    if k_max < 1:
        raise ContractError("k_max must be >= 1")
    matches = _ranked_matches(dists, q_ids, q_cams, g_ids, g_cams)
    curve = np.zeros(k_max)
    for rel in matches:
        rank = int(np.argmax(rel)) + 1   # first True; guaranteed to exist
        if rank <= k_max:
            curve[rank - 1:] += 1.0
    return curve / dists.shape[0]


def map_score(dists, q_ids, q_cams, g_ids, g_cams) -> float:
    """Mean average precision under the same exclusion protocol."""
    matches = _ranked_matches(dists, q_ids, q_cams, g_ids, g_cams)
    aps = []
    for rel in matches:
        hits = np.nonzero(rel)[0]
        precision = (np.arange(len(hits)) + 1.0) / (hits + 1.0)
        aps.append(precision.mean())
    return float(np.mean(aps))


def topk_retrieval(dists, k: int, q_ids=None, q_cams=None,
                   g_ids=None, g_cams=None) -> list[list[int]]:
    """Per-query k nearest gallery indices, optionally after exclusion."""
    dists = np.asarray(dists, dtype=np.float64)
    n_g = dists.shape[1]
    if k > n_g:
        raise ContractError(f"k={k} exceeds gallery size {n_g}")
    exclude = q_ids is not None
    if exclude:
        q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
        g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    lists = []
    for qi in range(dists.shape[0]):
        idx = np.arange(n_g)
        if exclude:
            idx = idx[~((g_ids == q_ids[qi]) & (g_cams == q_cams[qi]))]
        order = idx[np.argsort(dists[qi, idx], kind="stable")]
        lists.append([int(j) for j in order[:k]])
    return lists


# ---------------------------------------------------------------------------
# TSV import/export
# ---------------------------------------------------------------------------

def export_embeddings(path, ids, cams, descriptors) -> None:
    """identity, camera, then one column per descriptor dimension (%.17g)."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, c, d in zip(ids, cams, descriptors):
            cols = [str(int(i)), str(int(c))] + [f"{v:.17g}" for v in d]
            f.write("\t".join(cols) + "\n")


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids, cams, rows = [], [], []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if not ln:
            continue
        fields = ln.split("\t")
        ids.append(int(fields[0]))
        cams.append(int(fields[1]))
        rows.append([float(v) for v in fields[2:]])
    return np.asarray(ids), np.asarray(cams), np.asarray(rows, dtype=np.float64)


def write_cmc_tsv(path, curve) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["rank\taccuracy"]
    for rank, acc in enumerate(np.asarray(curve), start=1):
        lines.append(f"{rank}\t{acc:.17g}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
