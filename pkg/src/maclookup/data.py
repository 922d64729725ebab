"""Paired image datasets: binary PPM I/O, directory pairing, augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

Image = np.ndarray  # [H, W, 3] float in [0, 1]


class PpmError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DatasetError(RuntimeError):
    pass


class AugmentConfigError(ValueError):
    pass


# ---------------------------------------------------------------- PPM

_WHITESPACE = b" \t\r\n\x0b\x0c"


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in _WHITESPACE:
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        if pos >= n:
            raise PpmError("truncated header", pos)
        start = pos
        while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos


def decode_ppm(data: bytes) -> Image:
    """Decode binary P6 with maxval 255 into an ``[H,W,3]`` float64 array in [0,1]."""
    tokens, pos = _header_tokens(data, 4)
    if tokens[0] != b"P6":
        raise PpmError(f"unsupported magic {tokens[0]!r}, expected b'P6'", 0)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PpmError("non-integer width, height or maxval", pos) from None
    if width < 1 or height < 1:
        raise PpmError(f"invalid extents {width}x{height}", pos)
    if maxval != 255:
        raise PpmError(f"unsupported maxval {maxval}", pos)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise PpmError("missing whitespace after maxval", pos)
    pos += 1
    need = width * height * 3
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise PpmError(f"truncated payload: need {need} bytes, have {len(payload)}", pos + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / 255.0


def to_bytes_u8(img: Image) -> np.ndarray:
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(img: Image) -> bytes:
    """Encode an ``[H,W,3]`` image in [0,1] as binary P6 (values rounded to nearest)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an [H,W,3] image, got shape {img.shape}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes_u8(img).tobytes()


def quantize(img: Image) -> Image:
    return to_bytes_u8(img).astype(np.float64) / 255.0


def read_ppm(path: str | Path) -> Image:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    try:
        return decode_ppm(data)
    except PpmError as exc:
        raise PpmError(f"{path}: {exc}", exc.offset) from None


def write_ppm(path: str | Path, img: Image) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_ppm(img))
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- pairing

@dataclass
class PairedDataset:
    pairs: list[tuple[Path, Path]]
    resolution: int | None = None
    unmatched: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def names(self) -> list[str]:
        return [p.name for p, _ in self.pairs]

    def load(self) -> list[tuple[Image, Image]]:
        out = []
        for inp, gt in self.pairs:
            a, b = read_ppm(inp), read_ppm(gt)
            if a.shape != b.shape:
                raise DatasetError(f"{inp.name}: input {a.shape[:2]} and ground truth {b.shape[:2]} differ")
            out.append((a, b))
        return out


def scan_pairs(input_dir: str | Path, gt_dir: str | Path, resolution: int | None = None) -> PairedDataset:
    """Match ``*.ppm`` files by name across the two directories, in lexicographic order."""
    input_dir, gt_dir = Path(input_dir), Path(gt_dir)
    for d in (input_dir, gt_dir):
        if not d.is_dir():
            raise DatasetError(f"not a readable directory: {d}")
    inputs = {p.name: p for p in input_dir.glob("*.ppm")}
    gts = {p.name: p for p in gt_dir.glob("*.ppm")}
    common = sorted(inputs.keys() & gts.keys())
    unmatched = sorted(inputs.keys() ^ gts.keys())
    if unmatched:
        logger.warning("unmatched files ignored: %s", ", ".join(unmatched))
    if not common:
        raise DatasetError(f"no matching .ppm pairs between {input_dir} and {gt_dir}")
    return PairedDataset([(inputs[n], gts[n]) for n in common], resolution, unmatched)


def dataset_from_root(root: str | Path, resolution: int | None = None) -> PairedDataset:
    root = Path(root)
    return scan_pairs(root / "input", root / "gt", resolution)


def write_dataset(root: str | Path, pairs: list[tuple[Image, Image]], prefix: str = "img") -> list[str]:
    root = Path(root)
    (root / "input").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    names = []
    for i, (inp, gt) in enumerate(pairs):
        name = f"{prefix}{i:04d}.ppm"
        write_ppm(root / "input" / name, inp)
        write_ppm(root / "gt" / name, gt)
        names.append(name)
    return names


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    crop: int | None = None
    p_flip_h: float = 0.5
    p_rot90: float = 0.5
    mixup_alpha: float = 1.2
    use_crop: bool = True
    use_flip: bool = True
    use_rot90: bool = True
    use_mixup: bool = True

    def __post_init__(self):
        for name in ("p_flip_h", "p_rot90"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise AugmentConfigError(f"{name} must be in [0, 1], got {v}")
        if self.mixup_alpha <= 0:
            raise AugmentConfigError("mixup_alpha must be positive")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(use_crop=False, use_flip=False, use_rot90=False, use_mixup=False)


def flip_h(pair: tuple[Image, Image]) -> tuple[Image, Image]:
    return pair[0][:, ::-1].copy(), pair[1][:, ::-1].copy()


def rot90(pair: tuple[Image, Image], k: int = 1) -> tuple[Image, Image]:
    return np.rot90(pair[0], k).copy(), np.rot90(pair[1], k).copy()


def crop(pair: tuple[Image, Image], top: int, left: int, size: int) -> tuple[Image, Image]:
    sl = (slice(top, top + size), slice(left, left + size))
    return pair[0][sl].copy(), pair[1][sl].copy()


def mixup(a: tuple[Image, Image], b: tuple[Image, Image], lam: float) -> tuple[Image, Image]:
    if lam == 1.0:
        return a[0].copy(), a[1].copy()
    return lam * a[0] + (1 - lam) * b[0], lam * a[1] + (1 - lam) * b[1]


def augment(batch: list[tuple[Image, Image]], cfg: AugmentConfig, rng: np.random.Generator | int,
            mixup_lambda: float | None = None) -> list[tuple[Image, Image]]:
    """Random crop / horizontal flip / 90-degree rotation per pair, then mix-up across pairs.

    Geometric transforms are drawn once per pair and applied to input and target
    alike.  ``mixup_lambda`` fixes the blend weight instead of sampling it.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    out = []
    for inp, gt in batch:
        pair = (inp, gt)
        h, w = inp.shape[:2]
        if cfg.use_crop and cfg.crop:
            if cfg.crop > min(h, w):
                raise AugmentConfigError(f"crop {cfg.crop} exceeds image extent {h}x{w}")
            top = int(rng.integers(0, h - cfg.crop + 1))
            left = int(rng.integers(0, w - cfg.crop + 1))
            pair = crop(pair, top, left, cfg.crop)
        if cfg.use_flip and rng.random() < cfg.p_flip_h:
            pair = flip_h(pair)
        if cfg.use_rot90 and rng.random() < cfg.p_rot90:
            pair = rot90(pair, int(rng.integers(1, 4)))
        out.append(pair)

    if cfg.use_mixup and len(out) > 1:
        partners = rng.permutation(len(out))
        lams = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha, size=len(out))
        if mixup_lambda is not None:
            lams[:] = mixup_lambda
        mixed = []
        for i, pair in enumerate(out):
            other = out[partners[i]]
            if other[0].shape != pair[0].shape:
                raise AugmentConfigError("mix-up needs equal image extents; enable cropping")
            mixed.append(mixup(pair, other, float(lams[i])))
        out = mixed
    return out


# ---------------------------------------------------------------- synthetic underwater pairs

def _smooth_field(rng: np.random.Generator, size: int, blobs: int = 6) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    field_ = rng.uniform(-0.5, 0.5) * xx + rng.uniform(-0.5, 0.5) * yy
    for _ in range(blobs):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.08, 0.3)
        field_ = field_ + rng.uniform(-1, 1) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return field_


def synthesize_clean(rng: np.random.Generator, size: int) -> Image:
    """A smooth colourful scene with some mid-frequency texture."""
    img = np.stack([_smooth_field(rng, size) for _ in range(3)], axis=-1)
    yy, xx = np.mgrid[0:size, 0:size] / size
    freq = rng.uniform(4, 10, size=2)
    texture = 0.08 * np.sin(2 * np.pi * (freq[0] * xx + freq[1] * yy) + rng.uniform(0, 2 * np.pi))
    img = img + texture[..., None]
    lo, hi = img.min(), img.max()
    return 0.08 + 0.84 * (img - lo) / (hi - lo)


def degrade_underwater(clean: Image, rng: np.random.Generator) -> Image:
    """Wavelength-dependent attenuation with a spatially varying range plus veiling light."""
    size = clean.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] / size
    depth = 0.6 + 1.2 * yy + 0.4 * np.abs(_smooth_field(rng, size, blobs=3))
    beta = np.array([rng.uniform(0.9, 1.3), rng.uniform(0.25, 0.45), rng.uniform(0.15, 0.3)])
    veil = np.array([rng.uniform(0.02, 0.08), rng.uniform(0.35, 0.5), rng.uniform(0.45, 0.6)])
    t = np.exp(-beta[None, None, :] * depth[..., None])
    return np.clip(clean * t + veil * (1.0 - t), 0.0, 1.0)


def synthesize_pairs(count: int, size: int = 64, seed: int = 0) -> list[tuple[Image, Image]]:
    """Deterministic (degraded, clean) pairs quantized to 8 bits."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        clean = synthesize_clean(rng, size)
        pairs.append((quantize(degrade_underwater(clean, rng)), quantize(clean)))
    return pairs
