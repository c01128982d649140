"""Context-based CNN classifier (DEM1).

Pipeline per input: a small strided conv stem embeds the original image, a
second stem embeds the 9-channel reconstruction stack, the two maps are
channel-concatenated and projected back to C channels, self-attention with
a softmax or sparsemax normalizer cleans the projected map, and GAP yields
the global feature. Part-mask average pooling plus a linear fusion yields
the local feature. The two are combined by orthogonal fusion into the
identity descriptor, and a linear head emits per-identity probabilities.

Both conv stems downsample by a fixed factor of 4 (strides 2, 2, 1).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import attend, scaled_scores, sparsemax_rows
from .errors import ContractError, DegenerateGlobalError, ShapeError
from .masking import build_recon_stack
from .seeding import derive_rng
from .synthdata import P_PARTS
from .tensor import Tensor, softmax_rows

DOWNSAMPLE = 4
EPS_GLOBAL = 1e-8
ATTENTION_MODES = ("softmax", "sparsemax")


def he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape),
                  requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def downsample_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor downsample of an integer label map (center sampling)."""
    h, w = mask.shape
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(int)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(int)
    return mask[np.ix_(rows, cols)]


def orthogonal_decompose(f_l: Tensor, f_g: Tensor) -> tuple[Tensor, Tensor]:
    """Split a local feature into (orthogonal, projection) against f_g."""
    f_l, f_g = T._lift(f_l), T._lift(f_g)
    if f_l.shape != f_g.shape:
        raise ShapeError(f"feature shapes differ: {f_l.shape} vs {f_g.shape}")
    g_sq = T.sum_all(f_g * f_g)
    if float(np.sqrt(g_sq.data)) < EPS_GLOBAL:
        raise DegenerateGlobalError(
            f"global feature norm {float(np.sqrt(g_sq.data)):.3e} below "
            f"{EPS_GLOBAL:.0e}; batch aborted"
        )
    coef = T.div(T.sum_all(f_l * f_g), g_sq)
    f_proj = f_g * coef
    return f_l - f_proj, f_proj


def spatial_attention(xmap: Tensor, wq, bq, wk, bk, wv, bv,
                      mode: str) -> Tensor:
    """Self-attention over the flattened positions of an H x W x C map."""
    if mode not in ATTENTION_MODES:
        raise ContractError(
            f"attention mode {mode!r} not in {ATTENTION_MODES}"
        )
    h, w, c = xmap.shape
    tokens = T.reshape(xmap, (h * w, c))
    q = T.matmul(tokens, wq) + bq
    k = T.matmul(tokens, wk) + bk
    v = T.matmul(tokens, wv) + bv
    scores = scaled_scores(q, k, c)
    weights = softmax_rows(scores) if mode == "softmax" else sparsemax_rows(scores)
    return T.reshape(attend(weights, v), (h, w, c))


class ContextCnn:
    """Trainable DEM1 model; parameters checkpoint under the "dem1." prefix.

    The identity head is a normalized (cosine) classifier: logits are scaled
    cosine similarities between the descriptor and per-class prototype rows,
    so probabilities stay smooth affinity profiles instead of saturating.
    """

    def __init__(self, n_classes: int, channels: int = 32,
                 attention: str = "sparsemax", mae: bool = True,
                 n_parts: int = P_PARTS, seed: int = 0,
                 head_scale: float = 4.0):
        if attention not in ATTENTION_MODES:
            raise ContractError(
                f"attention mode {attention!r} not in {ATTENTION_MODES}"
            )
        self.n_classes = n_classes
        self.channels = channels
        self.attention = attention
        self.mae = mae
        self.n_parts = n_parts
        self.head_scale = float(head_scale)
        rng = derive_rng(seed, "dem1-init")
        c = channels
        p = {}
        for stem, cin in (("orig", 3),) + ((("recon", 9),) if mae else ()):
            p[f"stem_{stem}.w1"] = he(rng, (3, 3, cin, 16), 9 * cin)
            p[f"stem_{stem}.b1"] = zeros_param(16)
            p[f"stem_{stem}.w2"] = he(rng, (3, 3, 16, 32), 9 * 16)
            p[f"stem_{stem}.b2"] = zeros_param(32)
            p[f"stem_{stem}.w3"] = he(rng, (3, 3, 32, c), 9 * 32)
            p[f"stem_{stem}.b3"] = zeros_param(c)
        proj_in = 2 * c if mae else c
        p["proj.w"] = he(rng, (1, 1, proj_in, c), proj_in)
        p["proj.b"] = zeros_param(c)
        for name in ("wq", "wk", "wv"):
            p[f"attn.{name}"] = Tensor(
                rng.normal(0.0, np.sqrt(1.0 / c), size=(c, c)), requires_grad=True)
            p[f"attn.b{name[1]}"] = zeros_param(c)
        p["part_fuse.w"] = he(rng, (n_parts * c, c), n_parts * c)
        p["part_fuse.b"] = zeros_param(c)
        p["fuse.w"] = he(rng, (2 * c, c), 2 * c)
        p["fuse.b"] = zeros_param(c)
        p["head.w"] = Tensor(
            rng.normal(0.0, np.sqrt(1.0 / c), size=(c, n_classes)),
            requires_grad=True)
        self.params = p

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self, prefix: str = "dem1.") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self.params.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_arrays(self, prefix: str = "dem1.") -> dict[str, np.ndarray]:
        out = {prefix + k: v.data for k, v in self.params.items()}
        out[prefix + "meta"] = np.array([
            self.n_classes, self.channels,
            ATTENTION_MODES.index(self.attention),
            int(self.mae), self.n_parts, self.head_scale,
        ], dtype=np.float64)
        return out

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray],
                   prefix: str = "dem1.") -> "ContextCnn":
        meta = arrays[prefix + "meta"]
        model = cls(
            n_classes=int(meta[0]), channels=int(meta[1]),
            attention=ATTENTION_MODES[int(meta[2])], mae=bool(int(meta[3])),
            n_parts=int(meta[4]), head_scale=float(meta[5]),
        )
        for k, t in model.params.items():
            src = arrays[prefix + k]
            if src.shape != t.data.shape:
                raise ShapeError(
                    f"checkpoint tensor {prefix + k} has shape {src.shape}, "
                    f"expected {t.data.shape}"
                )
            t.data = src.astype(np.float64)
        return model

    # -- forward pieces -----------------------------------------------------

    def _stem(self, x: Tensor, stem: str) -> Tensor:
        p = self.params
        x = T.relu(T.conv2d(x, p[f"stem_{stem}.w1"], stride=2, pad=1)
                   + p[f"stem_{stem}.b1"])
        x = T.relu(T.conv2d(x, p[f"stem_{stem}.w2"], stride=2, pad=1)
                   + p[f"stem_{stem}.b2"])
        x = T.relu(T.conv2d(x, p[f"stem_{stem}.w3"], stride=1, pad=1)
                   + p[f"stem_{stem}.b3"])
        return x

    def backbone_features(self, image, stem: str = "orig") -> Tensor:
        image = T._lift(image)
        expected = 3 if stem == "orig" else 9
        if image.ndim != 3 or image.shape[2] != expected:
            raise ContractError(
                f"stem {stem!r} expects {expected} channels, got {image.shape}"
            )
        return self._stem(image, stem)

    def part_local_features(self, fmap: Tensor, part_mask: np.ndarray) -> Tensor:
        """Masked per-part pooling, concat, and linear fusion to a C vector."""
        h, w, c = fmap.shape
        small = downsample_mask(part_mask, h, w)
        if not (small > 0).any():
            raise ContractError("all parts absent from the part mask")
        means = T.masked_part_means(fmap, small, self.n_parts)
        flat = T.reshape(means, (1, self.n_parts * c))
        f_l = T.matmul(flat, self.params["part_fuse.w"]) + self.params["part_fuse.b"]
        return T.reshape(f_l, (c,))

    def global_feature(self, fmap_orig: Tensor, fmap_recon: Tensor | None) -> Tensor:
        p = self.params
        if self.mae:
            if fmap_recon is None:
                raise ContractError("model was built with the MAE branch; "
                                    "a reconstruction feature map is required")
            cat = T.concat([fmap_orig, fmap_recon], axis=2)
        else:
            cat = fmap_orig
        xmap = T.conv2d(cat, p["proj.w"], stride=1, pad=0) + p["proj.b"]
        amap = spatial_attention(xmap, p["attn.wq"], p["attn.bq"],
                                 p["attn.wk"], p["attn.bk"],
                                 p["attn.wv"], p["attn.bv"], self.attention)
        return T.global_avg_pool(amap)

    def orthogonal_fuse(self, f_l: Tensor, f_g: Tensor) -> Tensor:
        f_orth, _ = orthogonal_decompose(f_l, f_g)
        fused = T.concat([f_orth, f_g], axis=0)
        fused = T.reshape(fused, (1, 2 * self.channels))
        desc = T.matmul(fused, self.params["fuse.w"]) + self.params["fuse.b"]
        return T.reshape(desc, (self.channels,))

    def classify(self, descriptor: Tensor) -> Tensor:
        d = T.l2_normalize_rows(T.reshape(descriptor, (1, self.channels)))
        protos = T.l2_normalize_rows(T.transpose(self.params["head.w"]))
        logits = T.matmul(d, T.transpose(protos)) * self.head_scale
        return T.reshape(softmax_rows(logits), (self.n_classes,))

    def forward(self, image, part_mask: np.ndarray,
                recon_stack=None) -> tuple[Tensor, Tensor]:
        """(descriptor, identity probabilities) from prebuilt inputs."""
        fmap_orig = self.backbone_features(T._lift(image), "orig")
        fmap_recon = None
        if self.mae:
            fmap_recon = self.backbone_features(T._lift(recon_stack), "recon")
        f_l = self.part_local_features(fmap_orig, part_mask)
        f_g = self.global_feature(fmap_orig, fmap_recon)
        descriptor = self.orthogonal_fuse(f_l, f_g)
        return descriptor, self.classify(descriptor)


def dem1_forward(model: ContextCnn, image: np.ndarray, part_mask: np.ndarray,
                 reconstructor, seed: int, mask_ratio: float = 0.75,
                 mask_patch: int = 8) -> tuple[Tensor, Tensor]:
    """Full composition: mask sampling, reconstruction, stems, fusion, head."""
    stack = None
    if model.mae:
        stack = build_recon_stack(image, reconstructor, seed,
                                  mask_ratio=mask_ratio, patch=mask_patch)
    return model.forward(image, part_mask, stack)
