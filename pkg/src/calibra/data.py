"""Synthetic two-domain glyph datasets, normalization, batching and file I/O."""

from __future__ import annotations

import itertools
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T

__all__ = [
    "DomainDataset",
    "ShiftConfig",
    "LabelAccessError",
    "DatasetFormatError",
    "generate_domain_pair",
    "render_glyphs",
    "apply_shift",
    "normalize",
    "denormalize",
    "patch_shuffle_indices",
    "sample_patch_and_shuffle",
    "batch_indices",
    "make_batches",
    "split",
    "save_dataset",
    "load_dataset",
]


class LabelAccessError(PermissionError):
    """Training code tried to read labels of a dataset whose labels are hidden."""


class DatasetFormatError(ValueError):
    pass


@dataclass
class DomainDataset:
    """Images in [-1, 1] (N x C x H x W) with labels that may be held out.

    Reading :attr:`labels` on a dataset with ``labels_visible=False`` raises;
    evaluation code goes through :meth:`held_out_labels` instead.
    """

    images: np.ndarray
    _labels: np.ndarray | None = field(default=None, repr=False)
    domain: str = "source"
    labels_visible: bool = True

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if not np.all(np.isfinite(self.images)) or self.images.size and (
                self.images.min() < -1.0 or self.images.max() > 1.0):
            raise ValueError("pixels must be finite and lie in [-1, 1]")
        if self._labels is not None:
            self._labels = np.asarray(self._labels, dtype=np.int64)
            if self._labels.shape != (len(self.images),):
                raise ValueError("need exactly one label per image")
            if self._labels.size and self._labels.min() < 0:
                raise ValueError("labels must be non-negative")
        elif self.labels_visible:
            raise ValueError("a dataset without labels cannot have labels_visible=True")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    @property
    def labels(self) -> np.ndarray:
        if not self.labels_visible:
            raise LabelAccessError(f"labels of this {self.domain} dataset are held out for evaluation")
        return self._labels

    def held_out_labels(self) -> np.ndarray:
        """Ground-truth labels for evaluation, regardless of visibility."""
        if self._labels is None:
            raise LabelAccessError(f"this {self.domain} dataset carries no labels")
        return self._labels

    def subset(self, index) -> "DomainDataset":
        labels = None if self._labels is None else self._labels[index]
        return DomainDataset(self.images[index], labels, self.domain, self.labels_visible)


# ---------------------------------------------------------------------------
# glyph rendering

# segment endpoints in glyph coordinates (x right, y down), roughly [-0.5, 0.5] x [-0.8, 0.8]
_SEGMENTS = np.array([
    [[-0.45, -0.8], [0.45, -0.8]],   # top
    [[0.45, -0.8], [0.45, 0.0]],     # upper right
    [[0.45, 0.0], [0.45, 0.8]],      # lower right
    [[-0.45, 0.8], [0.45, 0.8]],     # bottom
    [[-0.45, 0.0], [-0.45, 0.8]],    # lower left
    [[-0.45, -0.8], [-0.45, 0.0]],   # upper left
    [[-0.45, 0.0], [0.45, 0.0]],     # middle
    [[-0.45, 0.8], [0.45, -0.8]],    # rising diagonal
    [[-0.45, -0.8], [0.45, 0.8]],    # falling diagonal
])

_DIGITS = ["012345", "12", "01643", "01623", "5612", "05623", "056432", "012", "0123456", "012356"]


def glyph_patterns(n_classes: int) -> list[tuple[int, ...]]:
    """Segment sets for each class: seven-segment digits first, then diagonal combinations."""
    patterns = [tuple(int(c) for c in d) for d in _DIGITS]
    if n_classes > len(patterns):
        extra = []
        for r in (1, 2, 3):
            for combo in itertools.combinations(range(len(_SEGMENTS)), r):
                if 7 in combo or 8 in combo:
                    extra.append(combo)
        patterns += extra
    if n_classes > len(patterns):
        raise ValueError(f"at most {len(patterns)} glyph classes are available")
    return patterns[:n_classes]


def render_glyphs(labels: np.ndarray, image_size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Render one jittered glyph per label; returns raw pixels in [0, 1]."""
    n = len(labels)
    patterns = glyph_patterns(int(labels.max()) + 1 if n else 1)
    H = W = image_size
    coords = (np.arange(image_size) + 0.5) / image_size * 2.0 - 1.0
    gx, gy = np.meshgrid(coords, coords)
    pix = np.stack([gx.ravel(), gy.ravel()], axis=1)  # (P, 2)

    angle = rng.uniform(-0.2, 0.2, n)
    scale = rng.uniform(0.65, 0.8, n)
    shift = rng.uniform(-0.12, 0.12, (n, 2))
    thick = rng.uniform(0.07, 0.12, n)
    ink = rng.uniform(0.8, 1.0, (n, channels))
    soft = 2.0 / image_size

    out = np.empty((n, channels, H, W))
    for i in range(n):
        c, s = np.cos(angle[i]), np.sin(angle[i])
        rot = np.array([[c, -s], [s, c]]) * scale[i]
        segs = _SEGMENTS[list(patterns[labels[i]])] @ rot.T + shift[i]  # (S, 2, 2)
        a, b = segs[:, 0], segs[:, 1]
        ab = b - a
        rel = pix[:, None, :] - a[None]
        t = np.clip((rel * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
        d = np.linalg.norm(rel - t[..., None] * ab[None], axis=-1).min(axis=1)
        mask = np.clip((thick[i] - d) / soft + 0.5, 0.0, 1.0).reshape(H, W)
        out[i] = mask[None] * ink[i][:, None, None]
    noise = rng.normal(0.0, 0.02, out.shape)
    return np.clip(out + np.abs(noise), 0.0, 1.0)


# ---------------------------------------------------------------------------
# shifts

@dataclass(frozen=True)
class ShiftConfig:
    """Domain shift applied to target images (in normalized [-1, 1] units).

    ``texture`` is ``(frequency in cycles/pixel, amplitude)``; ``channel_bias``
    holds one offset per channel; ``elastic_jitter`` is the displacement scale
    in pixels.
    """

    contrast_inversion: bool = False
    texture: tuple[float, float] | None = None
    channel_bias: tuple[float, ...] | None = None
    elastic_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.texture is not None:
            freq, amp = self.texture
            if not (0 < freq <= 0.5) or not (0 <= amp <= 2):
                raise ValueError("texture frequency must be in (0, 0.5] and amplitude in [0, 2]")
        if self.channel_bias is not None and any(abs(b) > 2 for b in self.channel_bias):
            raise ValueError("channel bias offsets must lie in [-2, 2]")
        if self.elastic_jitter < 0:
            raise ValueError("elastic_jitter must be non-negative")

    @property
    def is_empty(self) -> bool:
        return not (self.contrast_inversion or self.texture or self.channel_bias or self.elastic_jitter)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "ShiftConfig":
        """Parse e.g. ``"contrast_inversion, additive_texture(0.4, 0.5)"``; ``"none"`` is empty."""
        kw: dict = {}
        text = text.strip()
        if text.lower() in ("", "none"):
            return cls(seed=seed)
        for m in re.finditer(r"(\w+)\s*(?:\(([^)]*)\))?", text):
            name, args = m.group(1), m.group(2)
            vals = [float(v) for v in args.split(",")] if args else []
            if name == "contrast_inversion":
                kw["contrast_inversion"] = True
            elif name == "additive_texture":
                if len(vals) != 2:
                    raise ValueError("additive_texture takes (frequency, amplitude)")
                kw["texture"] = (vals[0], vals[1])
            elif name == "channel_bias":
                kw["channel_bias"] = tuple(vals)
            elif name == "elastic_jitter":
                if len(vals) != 1:
                    raise ValueError("elastic_jitter takes (scale)")
                kw["elastic_jitter"] = vals[0]
            else:
                raise ValueError(f"unknown shift kind {name!r}")
        return cls(seed=seed, **kw)

    def describe(self) -> str:
        parts = []
        if self.elastic_jitter:
            parts.append(f"elastic_jitter({self.elastic_jitter:g})")
        if self.contrast_inversion:
            parts.append("contrast_inversion")
        if self.channel_bias:
            parts.append("channel_bias(" + ",".join(f"{b:g}" for b in self.channel_bias) + ")")
        if self.texture:
            parts.append(f"additive_texture({self.texture[0]:g},{self.texture[1]:g})")
        return ", ".join(parts) or "none"


def _elastic(images: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    n, c, h, w = images.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty_like(images)
    for i in range(n):
        dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), 3.0)
        dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), 3.0)
        norm = max(np.abs(dy).max(), np.abs(dx).max(), 1e-12)
        dy, dx = dy / norm * scale, dx / norm * scale
        for ch in range(c):
            out[i, ch] = ndimage.map_coordinates(images[i, ch], [yy + dy, xx + dx], order=1, mode="nearest")
    return out


def apply_shift(images: np.ndarray, shift: ShiftConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply ``shift`` to normalized images and clamp back into [-1, 1]."""
    x = np.array(images, dtype=np.float64)
    n, c, h, w = x.shape
    if shift.elastic_jitter:
        x = _elastic(x, shift.elastic_jitter, rng)
    if shift.contrast_inversion:
        x = -x
    if shift.channel_bias:
        if len(shift.channel_bias) != c:
            raise ValueError(f"channel_bias has {len(shift.channel_bias)} offsets for {c} channels")
        x = x + np.asarray(shift.channel_bias)[None, :, None, None]
    if shift.texture:
        freq, amp = shift.texture
        theta = rng.uniform(0.0, np.pi, n)
        phase = rng.uniform(0.0, 2 * np.pi, n)
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
        pattern = amp * np.sin(2 * np.pi * freq * proj + phase[:, None, None])
        x = x + pattern[:, None]
    return np.clip(x, -1.0, 1.0)


def generate_domain_pair(n_classes: int, n_per_class: int, image_size: int,
                         shift: ShiftConfig, seed: int = 0, channels: int = 1
                         ) -> tuple[DomainDataset, DomainDataset]:
    """Render a labeled source set and an independently rendered, shifted target set.

    Both domains hold ``n_per_class`` images of every class.  Target labels are
    stored but hidden (``labels_visible=False``).
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_per_class < 1 or image_size < 8 or channels < 1:
        raise ValueError("degenerate dataset size: need n_per_class >= 1, image_size >= 8, channels >= 1")
    glyph_patterns(n_classes)
    src_ss, tgt_ss, shift_ss = np.random.SeedSequence([seed, shift.seed]).spawn(3)

    def draw(ss) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(ss)
        labels = rng.permutation(np.repeat(np.arange(n_classes), n_per_class))
        return normalize(render_glyphs(labels, image_size, channels, rng)), labels

    xs, ys = draw(src_ss)
    xt, yt = draw(tgt_ss)
    xt = apply_shift(xt, shift, np.random.default_rng(shift_ss))
    source = DomainDataset(xs, ys, "source", labels_visible=True)
    target = DomainDataset(xt, yt, "target", labels_visible=False)
    return source, target


# ---------------------------------------------------------------------------
# normalization

def normalize(raw) -> np.ndarray:
    """Map raw pixels in [0, 1] to [-1, 1] via 2x - 1."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and (raw.min() < 0.0 or raw.max() > 1.0 or not np.all(np.isfinite(raw))):
        raise ValueError("raw pixels must lie in [0, 1]")
    return 2.0 * raw - 1.0


def denormalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < -1.0 or x.max() > 1.0):
        raise ValueError("normalized pixels must lie in [-1, 1]")
    return (x + 1.0) / 2.0


# ---------------------------------------------------------------------------
# pixel-discriminator patches

def patch_shuffle_indices(image_shape: tuple[int, int, int], batch: int, patch_size: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Flat gather indices (batch x C*p*p) for random, spatially shuffled patches.

    Each row picks a uniformly random p x p window and a fresh permutation of
    its spatial positions, shared by all channels.  Use with
    :func:`calibra.tensor.take` to keep the transform differentiable.
    """
    C, H, W = image_shape
    if patch_size < 1 or patch_size > min(H, W):
        raise ValueError(f"patch size {patch_size} does not fit a {H}x{W} image")
    p = patch_size
    top = rng.integers(0, H - p + 1, batch)
    left = rng.integers(0, W - p + 1, batch)
    perm = np.argsort(rng.random((batch, p * p)), axis=1)
    py, px = np.divmod(perm, p)
    spatial = (top[:, None] + py) * W + (left[:, None] + px)  # (B, p*p)
    chan = np.arange(C)[None, :, None] * (H * W)
    return (chan + spatial[:, None, :]).reshape(batch, C * p * p)


def sample_patch_and_shuffle(image, patch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Shuffled patch of one C x H x W image, flattened channel-major."""
    image = np.asarray(image.data if isinstance(image, T.Tensor) else image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected a C x H x W image, got shape {image.shape}")
    idx = patch_shuffle_indices(image.shape, 1, patch_size, rng)
    return image.reshape(-1)[idx[0]]


# ---------------------------------------------------------------------------
# batching

def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch: a random permutation cut into batches; the short tail is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if n < 1:
        raise ValueError("cannot batch an empty dataset")
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def make_batches(dataset: DomainDataset, batch_size: int, rng: np.random.Generator):
    """List of ``(images, labels)`` pairs; labels are ``None`` when hidden."""
    out = []
    for idx in batch_indices(len(dataset), batch_size, rng):
        labels = dataset.labels[idx] if dataset.labels_visible else None
        out.append((dataset.images[idx], labels))
    return out


def split(dataset: DomainDataset, fraction: float, rng: np.random.Generator
          ) -> tuple[DomainDataset, DomainDataset]:
    """Random (1 - fraction, fraction) split."""
    n = len(dataset)
    k = int(round(n * fraction))
    order = rng.permutation(n)
    return dataset.subset(np.sort(order[k:])), dataset.subset(np.sort(order[:k]))


# ---------------------------------------------------------------------------
# file format: b"CALD", u32 version, u8 domain (0 source / 1 target), u8 labels_visible,
# u8 has_labels, u32 N, C, H, W, u32 labels * N, pixel tensor in CALT format

DATASET_MAGIC = b"CALD"
DATASET_VERSION = 1


def encode_dataset(ds: DomainDataset) -> bytes:
    n, c, h, w = ds.images.shape
    head = DATASET_MAGIC + struct.pack(
        "<IBBBIIII", DATASET_VERSION, 0 if ds.domain == "source" else 1,
        int(ds.labels_visible), int(ds.has_labels), n, c, h, w)
    labels = ds._labels if ds.has_labels else np.zeros(n, dtype=np.int64)
    return head + labels.astype("<u4").tobytes() + T.encode_tensor(ds.images)


def decode_dataset(buf: bytes) -> DomainDataset:
    if buf[:4] != DATASET_MAGIC:
        raise DatasetFormatError("not a calibra dataset file (bad magic)")
    try:
        version, dom, visible, has_labels, n, c, h, w = struct.unpack_from("<IBBBIIII", buf, 4)
    except struct.error:
        raise DatasetFormatError("truncated dataset header") from None
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    if dom not in (0, 1):
        raise DatasetFormatError(f"bad domain tag {dom}")
    pos = 4 + struct.calcsize("<IBBBIIII")
    if len(buf) < pos + 4 * n:
        raise DatasetFormatError("truncated label block")
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=pos).astype(np.int64)
    pos += 4 * n
    try:
        images, end = T.decode_tensor(buf, pos)
    except T.TensorFormatError as exc:
        raise DatasetFormatError(f"bad pixel block: {exc}") from None
    if end != len(buf):
        raise DatasetFormatError("trailing bytes after pixel block")
    if images.shape != (n, c, h, w):
        raise DatasetFormatError(f"pixel block shape {images.shape} disagrees with header {(n, c, h, w)}")
    return DomainDataset(images.data, labels if has_labels else None,
                         "source" if dom == 0 else "target", bool(visible))


def save_dataset(ds: DomainDataset, path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path) -> DomainDataset:
    return decode_dataset(Path(path).read_bytes())
