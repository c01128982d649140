"""Procedural occluded-person corpus with ground-truth part masks.

Each record renders a stylized person (4 colored body parts: head, torso,
arms, legs) over a noisy background, with per-camera color/contrast jitter
and per-image pose jitter. A configurable fraction of records gets a gray
convex occluder polygon covering at least 10% of the body. The part mask
always labels the pre-occlusion body; occlusion is an image-space event.

On disk: binary PPM (P6) images, binary PGM (P5) masks with raw label
values, an index.tsv, and a manifest.tsv holding the generation parameters
and a nearest-centroid identifiability measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError
from .seeding import derive_rng

P_PARTS = 4
PART_NAMES = ("head", "torso", "arms", "legs")

INDEX_COLUMNS = ("relative_path", "mask_path", "identity", "camera",
                 "occluded", "split")


@dataclass
class IdentitySpec:
    identity: int
    part_colors: np.ndarray      # (4, 3) in [0, 1]
    head_scale: float
    torso_width: float           # fraction of W
    arm_width: float             # fraction of W


@dataclass
class RenderedRecord:
    image: np.ndarray            # H x W x 3 float in [0,1], byte-quantized
    part_mask: np.ndarray        # H x W uint8, 0 = background
    identity: int
    camera: int
    occluded: bool
    split: str                   # train | query | gallery
    relative_path: str = ""
    mask_path: str = ""


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _sample_identity(identity: int, rng: np.random.Generator,
                     previous: list[IdentitySpec]) -> IdentitySpec:
    # resample until some part color differs clearly from every prior spec
    # (well above the 0.1 floor the identity invariant requires)
    for _ in range(1000):
        colors = rng.uniform(0.10, 0.95, size=(P_PARTS, 3))
        ok = all(
            np.abs(colors - prev.part_colors).max() >= 0.3 for prev in previous
        )
        if ok:
            return IdentitySpec(
                identity=identity,
                part_colors=colors,
                head_scale=rng.uniform(0.85, 1.15),
                torso_width=rng.uniform(0.34, 0.44),
                arm_width=rng.uniform(0.10, 0.14),
            )
    raise ContractError("could not sample a sufficiently distinct identity")


def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.indices((h, w))
    return ((yy - cy) / max(ry, 1e-9)) ** 2 + ((xx - cx) / max(rx, 1e-9)) ** 2 <= 1.0


def _box(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=bool)
    y0, y1 = max(0, int(y0)), min(h, int(y1))
    x0, x1 = max(0, int(x0)), min(w, int(x1))
    m[y0:y1, x0:x1] = True
    return m


def render_body(spec: IdentitySpec, h: int, w: int,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One posed render of an identity: image in [0,1] plus the part mask."""
    dy = int(round(rng.uniform(-0.03, 0.03) * h))
    dx = int(round(rng.uniform(-0.03, 0.03) * w))
    sway = int(round(rng.uniform(-1.2, 1.2)))

    cx = w / 2 + dx
    tw = spec.torso_width * w
    aw = max(1.0, spec.arm_width * w)

    head = _ellipse(h, w, 0.11 * h + dy, cx,
                    0.075 * h * spec.head_scale, 0.11 * w * spec.head_scale)
    torso = _box(h, w, 0.19 * h + dy, 0.55 * h + dy, cx - tw / 2, cx + tw / 2)
    arms = (
        _box(h, w, 0.21 * h + dy, 0.52 * h + dy,
             cx - tw / 2 - aw + sway, cx - tw / 2 + sway)
        | _box(h, w, 0.21 * h + dy, 0.52 * h + dy,
               cx + tw / 2 + sway, cx + tw / 2 + aw + sway)
    )
    leg_w = 0.38 * tw
    legs = (
        _box(h, w, 0.55 * h + dy, 0.93 * h + dy,
             cx - tw / 2, cx - tw / 2 + leg_w)
        | _box(h, w, 0.55 * h + dy, 0.93 * h + dy,
               cx + tw / 2 - leg_w, cx + tw / 2)
    )

    mask = np.zeros((h, w), dtype=np.uint8)
    for label, region in ((4, legs), (3, arms), (2, torso), (1, head)):
        mask[region] = label

    image = 0.10 + 0.15 * rng.random((h, w, 3))
    for label in range(1, P_PARTS + 1):
        region = mask == label
        color = spec.part_colors[label - 1]
        texture = 1.0 + 0.06 * (rng.random((h, w, 1)) - 0.5)
        image = np.where(region[:, :, None], color * texture, image)
    return np.clip(image, 0.0, 1.0), mask


def _camera_transform(image: np.ndarray, camera: int, seed: int) -> np.ndarray:
    rng = derive_rng(seed, "camera", camera)
    gains = rng.uniform(0.85, 1.15, size=3)
    contrast = rng.uniform(0.90, 1.10)
    brightness = rng.uniform(-0.05, 0.05)
    out = (image * gains - 0.5) * contrast + 0.5 + brightness
    return np.clip(out, 0.0, 1.0)


def _fill_convex_polygon(h: int, w: int, pts: np.ndarray) -> np.ndarray:
    center = pts.mean(axis=0)
    order = np.argsort(np.arctan2(pts[:, 0] - center[0], pts[:, 1] - center[1]))
    pts = pts[order]
    yy, xx = np.indices((h, w))
    inside = np.ones((h, w), dtype=bool)
    n = len(pts)
    for i in range(n):
        y1, x1 = pts[i]
        y2, x2 = pts[(i + 1) % n]
        cross = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
        inside &= cross >= 0
    return inside


def draw_occluder(image: np.ndarray, body: np.ndarray,
                  rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Gray convex polygon over the body, grown until it hides >= 10% of it."""
    h, w = body.shape
    ys, xs = np.nonzero(body)
    n_body = len(ys)
    if n_body == 0:
        raise ContractError("cannot occlude a record with no body pixels")
    gray = rng.uniform(0.25, 0.75)
    radius = 0.18 * min(h, w)
    fallback = None
    for _ in range(40):
        idx = rng.integers(0, n_body)
        cy, cx = float(ys[idx]), float(xs[idx])
        k = int(rng.integers(3, 6))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        radii = rng.uniform(0.6, 1.0, size=k) * radius
        pts = np.stack([cy + radii * np.sin(angles),
                        cx + radii * np.cos(angles)], axis=1)
        poly = _fill_convex_polygon(h, w, pts)
        coverage = (poly & body).sum() / n_body
        if coverage >= 0.10:
            if coverage <= 0.35:
                out = image.copy()
                out[poly] = gray
                return out, True
            # oversized occluder: remember it, shrink, and retry
            if fallback is None:
                fallback = poly
            radius *= 0.8
        else:
            radius *= 1.3
    if fallback is not None:
        out = image.copy()
        out[fallback] = gray
        return out, True
    raise ContractError("failed to place an occluder covering 10% of the body")


def quantize(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Byte-quantize so in-memory floats match a write/read round trip."""
    raw = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return raw.astype(np.float64) / 255.0, raw


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

def write_ppm(path: Path, raw: np.ndarray) -> None:
    h, w, _ = raw.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(raw.tobytes())


def write_pgm(path: Path, raw: np.ndarray) -> None:
    h, w = raw.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(raw.tobytes())


def _read_pnm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != magic:
        raise DataError(f"{path}: not a {magic.decode()} file")
    try:
        w, h = (int(t) for t in parts[1].split())
        maxval = int(parts[2])
    except ValueError as e:
        raise DataError(f"{path}: bad header") from e
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    if len(parts[3]) < h * w * channels:
        raise DataError(f"{path}: truncated pixel data")
    data = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * channels)
    shape = (h, w, channels) if channels > 1 else (h, w)
    return data.reshape(shape)


def read_ppm(path) -> np.ndarray:
    return _read_pnm(Path(path), b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(Path(path), b"P5", 1)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_dataset(records: list[RenderedRecord], query_frac: float,
                  seed: int) -> list[RenderedRecord]:
    """Assign train/query/gallery; train and test identities are disjoint.

    Test images split per identity by ``query_frac``, rotated if needed so
    every query image has a same-identity gallery image under a different
    camera.
    """
    ids = sorted({r.identity for r in records})
    for i in ids:
        cams = {r.camera for r in records if r.identity == i}
        imgs = sum(1 for r in records if r.identity == i)
        if imgs < 2 or len(cams) < 2:
            raise ContractError(
                f"identity {i} needs >= 2 images in >= 2 cameras for splitting"
            )
    rng = derive_rng(seed, "split")
    perm = list(rng.permutation(len(ids)))
    train_ids = {ids[k] for k in perm[: len(ids) // 2]}

    out: list[RenderedRecord] = []
    for i in ids:
        group = [r for r in records if r.identity == i]
        if i in train_ids:
            out.extend(replace(r, split="train") for r in group)
            continue
        order = list(rng.permutation(len(group)))
        n_q = min(len(group) - 1, max(1, int(round(query_frac * len(group)))))
        for rotation in range(len(group) + 1):
            rot = order[rotation:] + order[:rotation]
            queries = [group[k] for k in rot[:n_q]]
            gallery = [group[k] for k in rot[n_q:]]
            g_cams = {g.camera for g in gallery}
            if all(g_cams - {q.camera} for q in queries):
                break
        else:
            raise ContractError(
                f"identity {i}: cannot give every query a cross-camera "
                f"gallery match"
            )
        out.extend(replace(r, split="query") for r in queries)
        out.extend(replace(r, split="gallery") for r in gallery)
    return out


# ---------------------------------------------------------------------------
# generation and loading
# ---------------------------------------------------------------------------

def _downsample(image: np.ndarray, ty: int, tx: int) -> np.ndarray:
    h, w, c = image.shape
    if h % ty or w % tx:
        return image.reshape(-1)
    return image.reshape(ty, h // ty, tx, w // tx, c).mean(axis=(1, 3)).reshape(-1)


def identifiability_floor(records: list[RenderedRecord]) -> tuple[float, float]:
    """Nearest-centroid rank-1 on raw downsampled pixels, unoccluded test set.

    Centroids come from unoccluded gallery images; unoccluded queries are
    classified by nearest centroid. Returns (rank1, chance).
    """
    centroids, cids = [], []
    for i in sorted({r.identity for r in records if r.split == "gallery"}):
        feats = [
            _downsample(r.image, 8, 4) for r in records
            if r.identity == i and r.split == "gallery" and not r.occluded
        ]
        if feats:
            centroids.append(np.mean(feats, axis=0))
            cids.append(i)
    if not centroids:
        return 0.0, 0.0
    centroids = np.stack(centroids)
    cids = np.asarray(cids)
    hits = total = 0
    for r in records:
        if r.split != "query" or r.occluded or r.identity not in set(cids):
            continue
        q = _downsample(r.image, 8, 4)
        nearest = cids[np.linalg.norm(centroids - q, axis=1).argmin()]
        hits += int(nearest == r.identity)
        total += 1
    if total == 0:
        return 0.0, 0.0
    return hits / total, 1.0 / len(cids)


def generate_dataset(out_dir, n_ids: int, imgs_per_id: int, n_cameras: int,
                     occlusion_rate: float, h: int, w: int, seed: int,
                     query_frac: float = 0.3) -> dict:
    """Render, split, and write the corpus. Returns the manifest mapping."""
    if n_ids < 2 or imgs_per_id < 4 or n_cameras < 2:
        raise ContractError(
            "need n_ids >= 2, imgs_per_id >= 4, n_cameras >= 2"
        )
    if not 0.0 <= occlusion_rate <= 1.0:
        raise ContractError("occlusion_rate must lie in [0, 1]")
    if not 0.0 < query_frac < 1.0:
        raise ContractError("query_frac must lie in (0, 1)")

    specs: list[IdentitySpec] = []
    id_rng = derive_rng(seed, "identities")
    for i in range(n_ids):
        specs.append(_sample_identity(i, id_rng, specs))

    total = n_ids * imgs_per_id
    occ_rng = derive_rng(seed, "occlusion")
    occluded_idx = set(
        occ_rng.permutation(total)[: int(round(occlusion_rate * total))]
    )

    records: list[RenderedRecord] = []
    for i, spec in enumerate(specs):
        for j in range(imgs_per_id):
            flat = i * imgs_per_id + j
            camera = (i + j) % n_cameras
            rng = derive_rng(seed, "record", flat)
            image, mask = render_body(spec, h, w, rng)
            image = _camera_transform(image, camera, seed)
            occluded = False
            if flat in occluded_idx:
                image, occluded = draw_occluder(image, mask > 0, rng)
            image, _ = quantize(image)
            records.append(RenderedRecord(
                image=image, part_mask=mask, identity=i, camera=camera,
                occluded=occluded, split="train",
                relative_path=f"images/id{i:03d}_img{j:02d}_cam{camera}.ppm",
                mask_path=f"masks/id{i:03d}_img{j:02d}.pgm",
            ))

    records = split_dataset(records, query_frac, seed)
    rank1, chance = identifiability_floor(records)

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for r in records:
        write_ppm(out / r.relative_path,
                  np.round(r.image * 255.0).astype(np.uint8))
        write_pgm(out / r.mask_path, r.part_mask)

    lines = ["\t".join(INDEX_COLUMNS)]
    for r in records:
        lines.append("\t".join([
            r.relative_path, r.mask_path, str(r.identity), str(r.camera),
            str(int(r.occluded)), r.split,
        ]))
    (out / "index.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    manifest = {
        "n_ids": n_ids, "imgs_per_id": imgs_per_id, "n_cameras": n_cameras,
        "occlusion_rate": occlusion_rate, "height": h, "width": w,
        "seed": seed, "query_frac": query_frac, "n_records": total,
        "identifiability_rank1": rank1, "identifiability_chance": chance,
    }
    manifest_lines = [f"{k}\t{v!r}" if isinstance(v, str) else f"{k}\t{v:.17g}"
                      if isinstance(v, float) else f"{k}\t{v}"
                      for k, v in manifest.items()]
    (out / "manifest.tsv").write_text("\n".join(manifest_lines) + "\n",
                                      encoding="utf-8")
    return manifest


def load_record(dataset_dir, row: dict) -> RenderedRecord:
    base = Path(dataset_dir)
    raw = read_ppm(base / row["relative_path"])
    mask = read_pgm(base / row["mask_path"])
    if raw.shape[:2] != mask.shape:
        raise DataError(f"{row['relative_path']}: image/mask shape mismatch")
    if mask.max(initial=0) > P_PARTS:
        raise DataError(
            f"{row['mask_path']}: part label {mask.max()} exceeds {P_PARTS}"
        )
    return RenderedRecord(
        image=raw.astype(np.float64) / 255.0,
        part_mask=mask.astype(np.uint8),
        identity=int(row["identity"]),
        camera=int(row["camera"]),
        occluded=bool(int(row["occluded"])),
        split=row["split"],
        relative_path=row["relative_path"],
        mask_path=row["mask_path"],
    )


def load_index(dataset_dir) -> list[dict]:
    path = Path(dataset_dir) / "index.tsv"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read index {path}: {e}") from e
    lines = [ln for ln in text.split("\n") if ln]
    header = tuple(lines[0].split("\t"))
    if header != INDEX_COLUMNS:
        raise DataError(f"{path}: unexpected columns {header}")
    rows = []
    for ln in lines[1:]:
        fields = ln.split("\t")
        if len(fields) != len(INDEX_COLUMNS):
            raise DataError(f"{path}: malformed row {ln!r}")
        rows.append(dict(zip(INDEX_COLUMNS, fields)))
    return rows


def load_dataset(dataset_dir) -> list[RenderedRecord]:
    return [load_record(dataset_dir, row) for row in load_index(dataset_dir)]


def load_manifest(dataset_dir) -> dict[str, str]:
    path = Path(dataset_dir) / "manifest.tsv"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    out = {}
    for ln in text.splitlines():
        if ln:
            k, v = ln.split("\t", 1)
            out[k] = v
    return out
