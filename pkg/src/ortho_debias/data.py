"""Synthetic scene/attribute images with exact attribute co-occurrence ratios.

Each image is a grayscale class-specific sinusoidal grating with seeded noise
(the "scene") and one colored glyph pasted at a random location (the
protected attribute). For every class ``s`` exactly ``M * rho_s`` images carry
the ``A=1`` glyph; classes in the biased subset ``K`` use ``rho_K``, the rest
use 0.5.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ODDS"
VERSION = 1
SUPPORTED_K_SIZES = (1, 3, 5, 7, 10)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class BiasConfig:
    n_classes: int = 10
    per_class: int = 200
    height: int = 32
    width: int = 32
    biased: tuple[int, ...] = ()
    rho_biased: float = 0.5
    rho_default: float = 0.5
    seed: int = 0
    marker_size: int = 10
    # scene difficulty knobs
    grating_amplitude: float = 0.25
    blend_frac: float = 0.3
    phase_jitter: float = 1.0
    noise_std: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "biased", tuple(sorted(int(k) for k in self.biased)))

    def rho(self, cls: int) -> float:
        return self.rho_biased if cls in self.biased else self.rho_default

    def positives(self, cls: int) -> int:
        """Number of ``A=1`` samples in class ``cls``; raises if not integral."""
        exact = self.per_class * self.rho(cls)
        count = int(round(exact))
        if abs(exact - count) > 1e-9:
            step = _min_multiple(self.rho(cls))
            raise DatasetError(
                f"class {cls}: per_class={self.per_class} * rho={self.rho(cls)} is not integral; "
                f"per_class must be a multiple of {step}"
            )
        return count

    def validate(self) -> None:
        if self.n_classes < 1 or self.per_class < 1:
            raise DatasetError("n_classes and per_class must be positive")
        if len(set(self.biased)) != len(self.biased):
            raise DatasetError(f"duplicate entries in biased subset {self.biased}")
        bad = [k for k in self.biased if not 0 <= k < self.n_classes]
        if bad:
            raise DatasetError(f"biased classes {bad} out of range 0..{self.n_classes - 1}")
        if not (0.0 <= self.rho_biased <= 1.0 and 0.0 <= self.rho_default <= 1.0):
            raise DatasetError("ratios must lie in [0, 1]")
        if self.marker_size > min(self.height, self.width) / 3:
            raise DatasetError(f"marker_size {self.marker_size} exceeds min(H, W)/3")
        for c in range(self.n_classes):
            self.positives(c)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["biased"] = list(self.biased)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BiasConfig":
        d = dict(d)
        d["biased"] = tuple(d.get("biased", ()))
        return cls(**d)


def _min_multiple(rho: float) -> int:
    for m in range(1, 10001):
        if abs(m * rho - round(m * rho)) < 1e-9:
            return m
    return 10000


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    label: int
    attribute: int
    bbox: tuple[int, int, int]  # row, col, size


@dataclass
class BiasDataset:
    images: np.ndarray  # n x 3 x H x W
    labels: np.ndarray
    attrs: np.ndarray
    bboxes: np.ndarray  # n x 3
    config: BiasConfig
    seeds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), int(self.attrs[i]), tuple(int(v) for v in self.bboxes[i]))

    def subset(self, idx) -> "BiasDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return BiasDataset(
            self.images[idx], self.labels[idx], self.attrs[idx], self.bboxes[idx], self.config, self.seeds[idx]
        )

    def manifest(self) -> dict:
        per_class = {}
        for c in range(self.config.n_classes):
            m = self.labels == c
            n = int(m.sum())
            pos = int(self.attrs[m].sum())
            per_class[str(c)] = {"count": n, "a1": pos, "rho": pos / n if n else None}
        return {"config": self.config.to_dict(), "n_samples": len(self), "per_class": per_class}


# ------------------------------------------------------------------ rendering


def _grating(cls: int, height: int, width: int, phase: float, amplitude: float) -> np.ndarray:
    angle = np.pi * (cls % 5) / 5.0
    freq = 2.0 + 2.0 * (cls // 5)  # cycles per image side
    base_phase = 2.0 * np.pi * ((cls * 0.37) % 1.0)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    u = (xx * np.cos(angle) + yy * np.sin(angle)) / width
    return 0.5 + amplitude * np.sin(2.0 * np.pi * freq * u + base_phase + phase)


def _glyph(attribute: int, size: int) -> np.ndarray:
    """Boolean mask: A=1 is a filled square, A=0 a filled disc."""
    if attribute == 1:
        return np.ones((size, size), dtype=bool)
    r = np.arange(size) - (size - 1) / 2.0
    yy, xx = np.meshgrid(r, r, indexing="ij")
    return yy**2 + xx**2 <= (size / 2.0) ** 2


GLYPH_COLORS = {1: np.array([0.95, 0.15, 0.1]), 0: np.array([0.1, 0.2, 0.95])}


def blend_partner(class_index: int, n_classes: int) -> int:
    """Classes are paired (0, 1), (2, 3), ...; an odd last class pairs with its predecessor."""
    p = class_index ^ 1
    return p if p < n_classes else class_index - 1


def render_sample(
    class_index: int,
    attribute: int,
    height: int,
    width: int,
    seed,
    marker_size: int = 8,
    grating_amplitude: float = 0.25,
    phase_jitter: float = 1.0,
    noise_std: float = 0.25,
    blend_frac: float = 0.0,
    n_classes: int = 10,
) -> Sample:
    if marker_size > min(height, width) / 3:
        raise DatasetError(f"marker_size {marker_size} exceeds min(H, W)/3")
    rng = np.random.default_rng(seed)
    # background draws come first so they do not depend on the attribute
    phase = rng.uniform(-phase_jitter, phase_jitter)
    # a blended scene mixes in an equally strong grating of the paired class
    blended = rng.uniform() < blend_frac and n_classes > 1
    partner = blend_partner(class_index, n_classes)
    noise = rng.normal(0.0, noise_std, size=(height, width))
    row = int(rng.integers(0, height - marker_size + 1))
    col = int(rng.integers(0, width - marker_size + 1))
    if blended:
        half = 0.5 * grating_amplitude
        scene = _grating(class_index, height, width, phase, half) + _grating(partner, height, width, phase, half) - 0.5
    else:
        scene = _grating(class_index, height, width, phase, grating_amplitude)
    gray = np.clip(scene + noise, 0.0, 1.0)
    img = np.repeat(gray[None], 3, axis=0)
    mask = _glyph(attribute, marker_size)
    patch = img[:, row : row + marker_size, col : col + marker_size]
    patch[:, mask] = GLYPH_COLORS[attribute][:, None]
    return Sample(img, int(class_index), int(attribute), (row, col, marker_size))


def sample_seed(master: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), int(index)])


def generate(config: BiasConfig) -> BiasDataset:
    config.validate()
    n = config.n_classes * config.per_class
    images = np.empty((n, 3, config.height, config.width))
    labels = np.repeat(np.arange(config.n_classes), config.per_class)
    attrs = np.zeros(n, dtype=np.int64)
    bboxes = np.zeros((n, 3), dtype=np.int64)
    assign_rng = np.random.default_rng([config.seed, 0xA771])
    for c in range(config.n_classes):
        flags = np.zeros(config.per_class, dtype=np.int64)
        flags[: config.positives(c)] = 1
        attrs[c * config.per_class : (c + 1) * config.per_class] = assign_rng.permutation(flags)
    for i in range(n):
        s = render_sample(
            int(labels[i]),
            int(attrs[i]),
            config.height,
            config.width,
            sample_seed(config.seed, i),
            config.marker_size,
            config.grating_amplitude,
            config.phase_jitter,
            config.noise_std,
            config.blend_frac,
            config.n_classes,
        )
        images[i] = s.image
        bboxes[i] = s.bbox
    return BiasDataset(images, labels, attrs, bboxes, config, np.arange(n, dtype=np.int64))


def split(dataset: BiasDataset, train_frac: float, seed: int) -> tuple[BiasDataset, BiasDataset]:
    """Stratified split over joint (label, attribute) cells."""
    tr, te = split_indices(dataset.labels, dataset.attrs, train_frac, seed)
    return dataset.subset(tr), dataset.subset(te)


def split_indices(labels, attrs, train_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < train_frac < 1.0:
        raise DatasetError(f"train_frac must lie in (0, 1), got {train_frac}")
    labels = np.asarray(labels)
    attrs = np.asarray(attrs)
    rng = np.random.default_rng([int(seed), 0x5EED])
    train, test = [], []
    for y in np.unique(labels):
        for a in (0, 1):
            cell = np.flatnonzero((labels == y) & (attrs == a))
            if cell.size == 0:
                continue
            if cell.size < 2:
                raise DatasetError(f"cell (Y={y}, A={a}) has {cell.size} sample; need at least 2 to split")
            k = min(max(int(round(cell.size * train_frac)), 1), cell.size - 1)
            perm = rng.permutation(cell)
            train.append(perm[:k])
            test.append(perm[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


# ------------------------------------------------------------------ file format
#
# header: magic "ODDS" | u32 version | u16 N | u32 M | u16 H | u16 W
#         | u8 |K| | |K| x u8 class | f64 rho_K | f64 rho_default | i64 seed
#         | u32 json length | json (remaining BiasConfig fields) | u32 sample count
# record: u8 Y | u8 A | 3 x u16 bbox | H*W*3 f64 pixels (row-major H, W, channel)
# All integers and floats little-endian.


def _pack_header(cfg: BiasConfig, count: int) -> bytes:
    extra = {k: v for k, v in cfg.to_dict().items() if k not in _HEADER_FIELDS}
    blob = json.dumps(extra, sort_keys=True).encode()
    parts = [
        MAGIC,
        struct.pack("<IHIHH", VERSION, cfg.n_classes, cfg.per_class, cfg.height, cfg.width),
        struct.pack("<B", len(cfg.biased)),
        bytes(cfg.biased),
        struct.pack("<ddq", cfg.rho_biased, cfg.rho_default, cfg.seed),
        struct.pack("<I", len(blob)),
        blob,
        struct.pack("<I", count),
    ]
    return b"".join(parts)


_HEADER_FIELDS = {"n_classes", "per_class", "height", "width", "biased", "rho_biased", "rho_default", "seed"}


def save(dataset: BiasDataset, path) -> None:
    path = Path(path)
    cfg = dataset.config
    with open(path, "wb") as fh:
        fh.write(_pack_header(cfg, len(dataset)))
        for i in range(len(dataset)):
            fh.write(struct.pack("<BB3H", dataset.labels[i], dataset.attrs[i], *dataset.bboxes[i]))
            fh.write(np.ascontiguousarray(dataset.images[i].transpose(1, 2, 0)).astype("<f8").tobytes())
    path.with_suffix(path.suffix + ".manifest.json").write_text(
        json.dumps(dataset.manifest(), indent=2, sort_keys=True) + "\n"
    )


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise DatasetError(f"truncated dataset file: need {n} bytes for {what} at offset {self.off}, "
                               f"file has {len(self.buf)}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load(path) -> BiasDataset:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise DatasetError("bad magic at offset 0: not a dataset file")
    version, n_cls, per_class, h, w = r.unpack("<IHIHH", "header")
    if version != VERSION:
        raise DatasetError(f"unsupported version {version} at offset 4")
    (k,) = r.unpack("<B", "|K|")
    biased = tuple(r.take(k, "K"))
    rho_k, rho_d, seed = r.unpack("<ddq", "ratios")
    (blen,) = r.unpack("<I", "json length")
    try:
        extra = json.loads(r.take(blen, "json").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"malformed config json before offset {r.off}: {exc}") from None
    (count,) = r.unpack("<I", "sample count")
    cfg = BiasConfig(n_cls, per_class, h, w, biased, rho_k, rho_d, seed, **extra)
    images = np.empty((count, 3, h, w))
    labels = np.empty(count, dtype=np.int64)
    attrs = np.empty(count, dtype=np.int64)
    bboxes = np.empty((count, 3), dtype=np.int64)
    npx = h * w * 3
    for i in range(count):
        y, a, *bb = r.unpack("<BB3H", f"record {i}")
        px = np.frombuffer(r.take(8 * npx, f"pixels of record {i}"), dtype="<f8")
        labels[i], attrs[i], bboxes[i] = y, a, bb
        images[i] = px.reshape(h, w, 3).transpose(2, 0, 1)
    if r.off != len(r.buf):
        raise DatasetError(f"trailing bytes after offset {r.off}")
    return BiasDataset(images, labels, attrs, bboxes, cfg, np.arange(count, dtype=np.int64))
