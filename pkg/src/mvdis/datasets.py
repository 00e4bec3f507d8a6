"""Multi-view data: synthetic generator with known factors, Edge-MNIST, augmentation."""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

# ---------------------------------------------------------------------------
# containers


@dataclass
class MultiViewBatch:
    """Aligned views of the same N objects: row k of every view is object k."""

    views: list[np.ndarray]
    labels: np.ndarray | None = None
    gt_specific: list[np.ndarray] | None = None
    gt_consistent: np.ndarray | None = None
    ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.views) < 2:
            raise ValueError("a multi-view batch needs at least two views")
        self.views = [np.asarray(v, dtype=np.float64) for v in self.views]
        n = self.views[0].shape[0]
        if any(v.ndim != 2 or v.shape[0] != n for v in self.views):
            raise ValueError("views must be 2-D and share the instance count")
        if self.ids is None:
            self.ids = np.arange(n)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError("labels must have one entry per instance")

    @property
    def n(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> list[int]:
        return [v.shape[1] for v in self.views]

    def subset(self, idx) -> "MultiViewBatch":
        idx = np.asarray(idx)
        return MultiViewBatch(
            views=[v[idx] for v in self.views],
            labels=None if self.labels is None else self.labels[idx],
            gt_specific=None if self.gt_specific is None else [p[idx] for p in self.gt_specific],
            gt_consistent=None if self.gt_consistent is None else self.gt_consistent[idx],
            ids=self.ids[idx],
            meta=dict(self.meta),
        )


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticSpec:
    C: int = 4
    V: int = 2
    d_s: int = 4
    d_p: int = 2
    d_v: int = 32
    N: int = 2000
    noise_std: float = 0.05
    seed: int = 0
    jitter_std: float = 0.3
    class_radius: float = 2.0
    specific_radius: float = 2.0
    specific_std: float = 0.6

    def validate(self) -> None:
        if self.C < 2:
            raise ValueError("need at least two classes")
        if self.N < self.C:
            raise ValueError("need at least one instance per class")
        if self.V < 2:
            raise ValueError("need at least two views")
        if min(self.d_s, self.d_p, self.d_v) < 1:
            raise ValueError("factor and view dimensions must be positive")
        if self.noise_std < 0 or self.jitter_std < 0:
            raise ValueError("noise levels must be non-negative")


def _spread_points(rng: np.random.Generator, k: int, dim: int, radius: float,
                   min_sep: float, tries: int = 1000) -> np.ndarray:
    best, best_sep = None, -1.0
    for _ in range(tries):
        pts = rng.normal(size=(k, dim))
        pts *= radius / np.linalg.norm(pts, axis=1, keepdims=True)
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        sep = d[np.triu_indices(k, 1)].min() if k > 1 else np.inf
        if sep > best_sep:
            best, best_sep = pts, sep
        if sep >= min_sep:
            return pts
    raise ValueError(f"could not place {k} points {min_sep:.3g} apart at radius {radius}")


def _well_conditioned(rng: np.random.Generator, n_in: int, n_out: int, lo: float, hi: float) -> np.ndarray:
    # singular values in [lo, hi] bound the condition number by hi/lo
    a = np.linalg.qr(rng.normal(size=(max(n_in, n_out), max(n_in, n_out))))[0]
    b = np.linalg.qr(rng.normal(size=(max(n_in, n_out), max(n_in, n_out))))[0]
    k = min(n_in, n_out)
    s = rng.uniform(lo, hi, size=k)
    return (a[:n_in, :k] * s) @ b[:k, :n_out]


class RandomNonlinearMap:
    """Frozen one-hidden-layer tanh map from factors to an observed view."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, input_scale: float):
        hidden = max(2 * n_in, 16)
        self.w1 = _well_conditioned(rng, n_in, hidden, 0.6, 1.0) / input_scale
        self.b1 = rng.uniform(-0.2, 0.2, size=hidden)
        self.w2 = _well_conditioned(rng, hidden, n_out, 0.6, 1.0)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return np.tanh(u @ self.w1 + self.b1) @ self.w2


def gen_synthetic(spec: SyntheticSpec) -> MultiViewBatch:
    """Draw a full synthetic dataset with known consistent and specific factors.

    Each object has a class c and a consistent factor s = mean_c + jitter
    shared by all views.  Each view v adds its own specific factor p_v drawn
    from a view-dependent 3-component Gaussian mixture that ignores the
    class, and observes x_v = map_v([s; p_v]) + noise.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    class_means = _spread_points(rng, spec.C, spec.d_s, spec.class_radius, spec.class_radius)
    labels = rng.permutation(np.arange(spec.N) % spec.C)
    s = class_means[labels] + spec.jitter_std * rng.normal(size=(spec.N, spec.d_s))

    views, specific = [], []
    for _v in range(spec.V):
        comp_means = _spread_points(rng, 3, spec.d_p, spec.specific_radius, spec.specific_radius)
        comp = rng.integers(0, 3, size=spec.N)
        p = comp_means[comp] + spec.specific_std * rng.normal(size=(spec.N, spec.d_p))
        fmap = RandomNonlinearMap(rng, spec.d_s + spec.d_p, spec.d_v,
                                  input_scale=max(spec.class_radius, spec.specific_radius))
        x = fmap(np.concatenate([s, p], axis=1))
        # unit mean feature variance, so noise_std is relative to the signal scale
        x = (x - x.mean(0)) / np.sqrt(x.var(0).mean())
        x = x + spec.noise_std * rng.normal(size=x.shape)
        views.append(x)
        specific.append(p)
    return MultiViewBatch(views=views, labels=labels, gt_specific=specific, gt_consistent=s,
                          meta={"C": spec.C, "V": spec.V, "seed": spec.seed,
                                "source": "synthetic", "spec": asdict(spec)})


# ---------------------------------------------------------------------------
# IDX files and the edge view


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    """Header magic is not an unsigned-byte IDX image or label file."""


class IdxTruncatedError(IdxError):
    """Payload is shorter than the header dimensions promise."""


class IdxDimensionError(IdxError):
    """Header dimensions are inconsistent with what the caller expects."""


IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _open_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Raw uint8 array from an IDX image (rank 3) or label (rank 1) file."""
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise IdxMagicError(f"{path}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxTruncatedError(f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, image_shape=(28, 28)):
    """Images scaled to [0, 1] as B×H×W, plus labels when a label file is given."""
    images = read_idx(images_path)
    if images.ndim != 3:
        raise IdxDimensionError(f"{images_path}: expected an image file, got rank {images.ndim}")
    if image_shape is not None and images.shape[1:] != tuple(image_shape):
        raise IdxDimensionError(f"{images_path}: images are {images.shape[1:]}, expected {tuple(image_shape)}")
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise IdxDimensionError(f"{labels_path}: expected a label file, got rank {labels.ndim}")
        if labels.shape[0] != images.shape[0]:
            raise IdxDimensionError(f"{labels.shape[0]} labels for {images.shape[0]} images")
        labels = labels.astype(np.int64)
    return images.astype(np.float64) / 255.0, labels


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES, 1: IDX_LABELS}[array.ndim]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


def edge_view(images: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude per image, rescaled so each image peaks at 1.

    Borders replicate edge pixels, so a constant image has no response at
    all and maps to zeros.
    """
    imgs = np.asarray(images, dtype=np.float64)
    single = imgs.ndim == 2
    if single:
        imgs = imgs[None]
    if imgs.ndim != 3:
        raise ValueError("edge_view expects H×W or B×H×W single-channel images")
    padded = np.pad(imgs, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = imgs.shape[1:]
    gx = np.zeros_like(imgs)
    gy = np.zeros_like(imgs)
    for di in range(3):
        for dj in range(3):
            win = padded[:, di:di + h, dj:dj + w]
            gx += _SOBEL_X[di, dj] * win
            gy += _SOBEL_X.T[di, dj] * win
    mag = np.hypot(gx, gy)
    peak = mag.reshape(len(mag), -1).max(axis=1)
    scale = np.where(peak > 1e-12, peak, 1.0)
    out = np.where(peak[:, None, None] > 1e-12, mag / scale[:, None, None], 0.0)
    return out[0] if single else out


def edge_mnist(images_path, labels_path, subset: int | None = 10_000, seed: int = 0) -> MultiViewBatch:
    """Two-view Edge-MNIST: flattened digits and their edge maps."""
    images, labels = load_idx(images_path, labels_path)
    if subset is not None and subset < len(images):
        idx = np.sort(np.random.default_rng(seed).choice(len(images), size=subset, replace=False))
        images, labels = images[idx], labels[idx]
    edges = edge_view(images)
    n = len(images)
    return MultiViewBatch(views=[images.reshape(n, -1), edges.reshape(n, -1)], labels=labels,
                          meta={"C": int(labels.max()) + 1, "V": 2, "seed": seed,
                                "source": "edge-mnist", "image_shape": list(images.shape[1:])})


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationPolicy:
    gaussian_noise_std: float = 0.1
    feature_dropout_prob: float = 0.1
    scale_jitter_range: tuple[float, float] = (0.9, 1.1)
    occlusion_prob: float = 0.0
    occlusion_frac: float = 0.3
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        lo, hi = self.scale_jitter_range
        if self.gaussian_noise_std < 0:
            raise ValueError("noise std must be non-negative")
        if not 0 <= self.feature_dropout_prob < 1:
            raise ValueError("dropout probability must lie in [0, 1)")
        if not (0 < lo <= 1 <= hi):
            raise ValueError("scale jitter range must satisfy 0 < lo <= 1 <= hi")
        if not 0 <= self.occlusion_prob <= 1:
            raise ValueError("occlusion probability must lie in [0, 1]")
        if self.occlusion_prob > 0 and self.image_shape is None:
            raise ValueError("occlusion needs the image shape")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(0.0, 0.0, (1.0, 1.0))


def _augment_once(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    n, d = x.shape
    out = x.copy()
    lo, hi = policy.scale_jitter_range
    if hi > lo:
        out *= rng.uniform(lo, hi, size=(n, 1))
    if policy.feature_dropout_prob > 0:
        out *= rng.random(size=(n, d)) >= policy.feature_dropout_prob
    if policy.occlusion_prob > 0:
        h, w = policy.image_shape
        img = out.reshape(n, h, w)
        oh, ow = max(1, int(round(h * policy.occlusion_frac))), max(1, int(round(w * policy.occlusion_frac)))
        hit = rng.random(n) < policy.occlusion_prob
        tops = rng.integers(0, h - oh + 1, size=n)
        lefts = rng.integers(0, w - ow + 1, size=n)
        for k in np.flatnonzero(hit):
            img[k, tops[k]:tops[k] + oh, lefts[k]:lefts[k] + ow] = 0.0
    if policy.gaussian_noise_std > 0:
        out += policy.gaussian_noise_std * rng.normal(size=(n, d))
    return out


def augment(views: list[np.ndarray] | MultiViewBatch, policy: AugmentationPolicy,
            rng: np.random.Generator) -> list[np.ndarray]:
    """Two independently augmented copies of every view.

    Returns 2V blocks ordered view-major: [v0 copy a, v0 copy b, v1 copy a, ...].
    Rows stay aligned with the input rows.
    """
    if isinstance(views, MultiViewBatch):
        views = views.views
    blocks = []
    for x in views:
        blocks.append(_augment_once(np.asarray(x, dtype=np.float64), policy, rng))
        blocks.append(_augment_once(np.asarray(x, dtype=np.float64), policy, rng))
    return blocks


# ---------------------------------------------------------------------------
# dataset files

_DS_MAGIC = b"MVDS"
_DS_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def save_blocks(path, blocks: list[np.ndarray], labels: np.ndarray | None = None,
                specific: list[np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Write aligned row blocks as a self-describing file; ``.jsonl`` selects the text form.

    The header carries {C, V, dims, N, seed}; binary payloads are little-endian
    float64 blocks, then int64 labels, then the specific-factor blocks.
    """
    path = Path(path)
    meta = dict(meta or {})
    blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
    n = blocks[0].shape[0]
    header = {
        "C": meta.pop("C", None if labels is None else int(np.max(labels)) + 1),
        "V": len(blocks),
        "dims": [b.shape[1] for b in blocks],
        "N": n,
        "seed": meta.pop("seed", None),
        "has_labels": labels is not None,
        "specific_dims": None if specific is None else [p.shape[1] for p in specific],
        "meta": {k: v for k, v in meta.items() if k != "V"},
    }
    if path.suffix == ".jsonl":
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for k in range(n):
                row = {"views": [b[k].tolist() for b in blocks]}
                if labels is not None:
                    row["label"] = int(labels[k])
                if specific is not None:
                    row["specific"] = [p[k].tolist() for p in specific]
                fh.write(json.dumps(row) + "\n")
        return
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_DS_MAGIC + bytes([_DS_VERSION]) + struct.pack("<I", len(blob)) + blob)
        for b in blocks:
            fh.write(b.astype("<f8").tobytes())
        if labels is not None:
            fh.write(np.asarray(labels).astype("<i8").tobytes())
        if specific is not None:
            for p in specific:
                fh.write(np.asarray(p).astype("<f8").tobytes())


def load_blocks(path) -> tuple[dict, list[np.ndarray], np.ndarray | None, list[np.ndarray] | None]:
    """Inverse of :func:`save_blocks`: (header, blocks, labels, specific)."""
    path = Path(path)
    if path.suffix == ".jsonl":
        with open(path) as fh:
            header = json.loads(fh.readline())
            rows = [json.loads(line) for line in fh if line.strip()]
        n = len(rows)
        blocks = [np.array([r["views"][v] for r in rows], dtype=np.float64).reshape(n, d)
                  for v, d in enumerate(header["dims"])]
        labels = np.array([r["label"] for r in rows], dtype=np.int64) if header["has_labels"] else None
        specific = None
        if header.get("specific_dims"):
            specific = [np.array([r["specific"][v] for r in rows], dtype=np.float64).reshape(n, d)
                        for v, d in enumerate(header["specific_dims"])]
        return header, blocks, labels, specific
    raw = path.read_bytes()
    if raw[:4] != _DS_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file")
    if len(raw) < 9 or raw[4] != _DS_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version")
    (hlen,) = struct.unpack("<I", raw[5:9])
    try:
        header = json.loads(raw[9:9 + hlen])
    except ValueError:
        raise DatasetFormatError(f"{path}: corrupt header") from None
    off = 9 + hlen
    n = header["N"]

    def grab(count, dtype):
        nonlocal off
        if off + 8 * count > len(raw):
            raise DatasetFormatError(f"{path}: payload truncated")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += 8 * count
        return arr

    blocks = [grab(n * d, "<f8").reshape(n, d).astype(np.float64) for d in header["dims"]]
    labels = grab(n, "<i8").astype(np.int64) if header["has_labels"] else None
    specific = None
    if header.get("specific_dims"):
        specific = [grab(n * d, "<f8").reshape(n, d).astype(np.float64) for d in header["specific_dims"]]
    return header, blocks, labels, specific


def save_dataset(path, batch: MultiViewBatch) -> None:
    meta = dict(batch.meta)
    meta.setdefault("C", None if batch.labels is None else int(batch.labels.max()) + 1)
    save_blocks(path, batch.views, batch.labels, batch.gt_specific, meta)


def load_dataset(path) -> MultiViewBatch:
    header, views, labels, specific = load_blocks(path)
    meta = dict(header.get("meta") or {})
    meta.update({"C": header["C"], "V": header["V"], "seed": header["seed"]})
    return MultiViewBatch(views=views, labels=labels, gt_specific=specific, meta=meta)
