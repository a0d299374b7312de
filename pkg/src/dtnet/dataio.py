"""Tensor files, dataset manifests, the synthetic shapes corpus and image export."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dtnet.tensor import Tensor

MAGIC = b"DTTENSOR"
DTT_VERSION = 1
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("u1"): 3}
_DTYPES = {v: k for k, v in _CODES.items()}


class DttError(ValueError):
    pass


# ---------------------------------------------------------------------------
# DTT


def dtt_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" else arr.dtype
    if dt not in _CODES:
        raise DttError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise DttError("too many dimensions")
    header = MAGIC + bytes([DTT_VERSION, _CODES[dt], arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def dtt_write(t, path) -> None:
    Path(path).write_bytes(dtt_bytes(t))


def dtt_parse(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 11 or buf[:8] != MAGIC:
        raise DttError(f"{source}: bad magic")
    version, code, ndim = buf[8], buf[9], buf[10]
    if version != DTT_VERSION:
        raise DttError(f"{source}: unsupported version {version}")
    if code not in _DTYPES:
        raise DttError(f"{source}: unknown dtype code {code}")
    head = 11 + 4 * ndim
    if len(buf) < head:
        raise DttError(f"{source}: truncated header")
    shape = struct.unpack(f"<{ndim}I", buf[11:head])
    dt = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    actual = len(buf) - head
    if actual != expected:
        raise DttError(f"{source}: payload length mismatch, expected {expected} bytes, got {actual}")
    return np.frombuffer(buf, dtype=dt, offset=head).reshape(shape).astype(dt.newbyteorder("="))


def dtt_read(path) -> np.ndarray:
    return dtt_parse(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, pairs: list[tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{img}\t{msk}\n" for img, msk in pairs), encoding="utf-8")


def read_manifest(path) -> list[tuple[Path, Path]]:
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise ValueError(f"{path}:{lineno}: expected image<TAB>mask")
        pairs.append((path.parent / cols[0], path.parent / cols[1]))
    return pairs


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Load a manifest (or a directory holding ``manifest.txt``) into arrays.

    Returns images as float32 (N, C, S, S) and masks as uint8 (N, S, S).
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    pairs = read_manifest(path)
    if not pairs:
        raise ValueError(f"{path}: empty dataset")
    images, masks = [], []
    for img_path, mask_path in pairs:
        img, mask = dtt_read(img_path), dtt_read(mask_path)
        if img.ndim != 3 or img.dtype != np.float32:
            raise ValueError(f"{img_path}: images must be float32 [C,S,S]")
        if mask.dtype != np.uint8 or mask.shape != img.shape[1:]:
            raise ValueError(f"{mask_path}: mask must be uint8 matching the image extent")
        if images and img.shape != images[0].shape:
            raise ValueError(f"{img_path}: shape {img.shape} differs from {images[0].shape}")
        images.append(img)
        masks.append(mask)
    return np.stack(images), np.stack(masks)


def dataset_digest(images: np.ndarray, masks: np.ndarray) -> str:
    """Order-independent content hash of (image, mask) pairs."""
    items = sorted(
        hashlib.sha256(dtt_bytes(np.asarray(img, np.float32)) + dtt_bytes(msk)).hexdigest()
        for img, msk in zip(images, masks)
    )
    return hashlib.sha256("".join(items).encode()).hexdigest()


# ---------------------------------------------------------------------------
# synthetic shapes

MAX_FOREGROUND = 8
BACKGROUND_LEVEL = 0.1


@dataclass(frozen=True)
class SynthSpec:
    n_images: int
    size: int = 64
    n_classes: int = 5
    seed: int = 0
    channels: int = 1
    shape_kinds: tuple[str, ...] = ("ellipse", "rectangle")
    noise: float = 0.05

    def __post_init__(self):
        if self.n_images < 1:
            raise ValueError("n_images must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.size % 32 or self.size < 32:
            raise ValueError(f"size must be a positive multiple of 32, got {self.size}")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        bad = set(self.shape_kinds) - {"ellipse", "rectangle"}
        if not self.shape_kinds or bad:
            raise ValueError(f"unknown shape kinds {sorted(bad)}")
        if self.n_classes - 1 > MAX_FOREGROUND or self.noise >= self.band_width / 2:
            raise ValueError(
                f"{self.n_classes - 1} foreground classes do not fit distinct intensity "
                f"bands at noise {self.noise}"
            )

    @property
    def band_width(self) -> float:
        return 0.65 / (self.n_classes - 1)

    def class_level(self, c: int) -> float:
        return 0.3 + (c - 0.5) * self.band_width

    def class_kind(self, c: int) -> str:
        return self.shape_kinds[(c - 1) % len(self.shape_kinds)]


@dataclass(frozen=True)
class Shape:
    label: int
    kind: str
    cy: float
    cx: float
    ry: float
    rx: float

    def contains(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        """Analytic membership of pixel centres."""
        if self.kind == "ellipse":
            return ((yy - self.cy) / self.ry) ** 2 + ((xx - self.cx) / self.rx) ** 2 <= 1.0
        return (np.abs(yy - self.cy) <= self.ry) & (np.abs(xx - self.cx) <= self.rx)


@dataclass
class Sample:
    image: np.ndarray  # float32 (C, S, S)
    mask: np.ndarray  # uint8 (S, S)
    shapes: list[Shape] = field(default_factory=list)


def generate_sample(spec: SynthSpec, index: int) -> Sample:
    """One image/mask pair; a pure function of ``(spec, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    s = spec.size
    k = spec.n_classes - 1
    present = list(range(1, k + 1))
    if k >= 2 and index % 10 == 9:
        present.remove(int(rng.integers(1, k + 1)))
    rng.shuffle(present)

    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    level = np.full((s, s), BACKGROUND_LEVEL)
    mask = np.zeros((s, s), np.uint8)
    shapes = []
    for c in present:
        kind = spec.class_kind(c)
        ry, rx = rng.uniform(s / 12, s / 5, size=2)
        cy, cx = rng.uniform(ry, s - ry), rng.uniform(rx, s - rx)
        shape = Shape(c, kind, float(cy), float(cx), float(ry), float(rx))
        inside = shape.contains(yy, xx)
        jitter = rng.uniform(-0.2, 0.2) * spec.band_width
        level[inside] = spec.class_level(c) + jitter
        mask[inside] = c
        shapes.append(shape)

    gains = 1.0 + 0.2 * np.linspace(-1, 1, spec.channels) if spec.channels > 1 else np.ones(1)
    image = level[None] * gains[:, None, None] + rng.normal(0, spec.noise, (spec.channels, s, s))
    return Sample(image.astype(np.float32), mask, shapes)


@dataclass
class SynthResult:
    manifest: Path
    digest: str
    n_images: int


def synth_generate(spec: SynthSpec, out_dir) -> SynthResult:
    """Write ``images/``, ``masks/`` and ``manifest.txt`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    pairs = []
    images, masks = [], []
    for i in range(spec.n_images):
        sample = generate_sample(spec, i)
        img_rel, mask_rel = f"images/{i:05d}.dtt", f"masks/{i:05d}.dtt"
        dtt_write(sample.image, out / img_rel)
        dtt_write(sample.mask, out / mask_rel)
        pairs.append((img_rel, mask_rel))
        images.append(sample.image)
        masks.append(sample.mask)
    manifest = out / "manifest.txt"
    write_manifest(manifest, pairs)
    digest = dataset_digest(images, masks)
    (out / "digest.txt").write_text(digest + "\n", encoding="utf-8")
    return SynthResult(manifest, digest, spec.n_images)


# ---------------------------------------------------------------------------
# image export

DEFAULT_PALETTE = {
    0: (0, 0, 0),
    1: (255, 0, 0),
    2: (0, 255, 0),
    3: (255, 255, 0),
    4: (0, 0, 255),
    5: (255, 0, 255),
    6: (0, 255, 255),
    7: (255, 128, 0),
    8: (128, 128, 128),
}


def pgm_bytes(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D array, got shape {arr.shape}")
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        pix = np.rint((arr - lo) / (hi - lo) * 255).astype(np.uint8)
    else:
        pix = np.full(arr.shape, 128, np.uint8)
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()


def export_pgm(t, path) -> None:
    Path(path).write_bytes(pgm_bytes(t))


def ppm_bytes(labels, palette: dict[int, tuple[int, int, int]] | None = None) -> bytes:
    labels = np.asarray(labels)
    palette = DEFAULT_PALETTE if palette is None else palette
    if labels.ndim != 2:
        raise ValueError("PPM export needs a 2-D label map")
    missing = set(np.unique(labels).tolist()) - set(palette)
    if missing:
        raise ValueError(f"palette has no colour for labels {sorted(missing)}")
    lut = np.zeros((max(palette) + 1, 3), np.uint8)
    for label, rgb in palette.items():
        if len(rgb) != 3 or not all(0 <= v <= 255 for v in rgb):
            raise ValueError(f"invalid colour {rgb} for label {label}")
        lut[label] = rgb
    h, w = labels.shape
    return f"P6\n{w} {h}\n255\n".encode() + lut[labels].tobytes()


def export_ppm(labels, path, palette=None) -> None:
    Path(path).write_bytes(ppm_bytes(labels, palette))
