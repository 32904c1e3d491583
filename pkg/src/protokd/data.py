"""Seeded synthetic multi-modality segmentation benchmark.

Each sample holds a few tumour-like blobs: nested ellipses labelled 1..K-1
from the outside in, over background 0. Modality ``m`` shows class ``k`` at
intensity ``visibility[m][k]`` plus Gaussian noise, so no single modality
separates every class while the full stack does.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import fileformat

DATASET_VERSION = 1

DEFAULT_VISIBILITY = (
    (0.0, 0.0, 1.0),   # modality 0 shows only the inner core
    (0.0, 1.0, 1.0),   # modality 1 shows the whole lesion
    (0.0, 1.0, 0.0),   # modality 2 shows only the outer rim
)


class DatasetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    height: int = 32
    width: int = 32
    classes: int = 3
    modalities: int = 3
    blobs: tuple[int, int] = (1, 2)
    radius: tuple[float, float] = (4.0, 9.0)
    inner_scale: tuple[float, float] = (0.4, 0.7)
    visibility: tuple[tuple[float, ...], ...] = DEFAULT_VISIBILITY
    noise: float = 0.3
    normalize: bool = True
    n_train: int = 64
    n_val: int = 8
    n_test: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blobs", tuple(int(v) for v in self.blobs))
        object.__setattr__(self, "radius", tuple(float(v) for v in self.radius))
        object.__setattr__(self, "inner_scale", tuple(float(v) for v in self.inner_scale))
        object.__setattr__(self, "visibility", tuple(tuple(float(v) for v in row) for row in self.visibility))
        self.validate()

    def validate(self) -> None:
        if self.classes < 2:
            raise DatasetConfigError("need at least two classes (0 is background)")
        if self.modalities < 1 or self.height < 1 or self.width < 1:
            raise DatasetConfigError("height, width and modalities must be positive")
        vis = np.asarray(self.visibility, dtype=float)
        if vis.shape != (self.modalities, self.classes):
            raise DatasetConfigError(f"visibility must be {self.modalities}x{self.classes}, got {vis.shape}")
        if np.any((vis < 0) | (vis > 1)):
            raise DatasetConfigError("visibility entries must lie in [0, 1]")
        hidden = [k for k in range(1, self.classes) if not np.any(vis[:, k] > 0.5)]
        if hidden:
            raise DatasetConfigError(f"classes {hidden} are not visible (> 0.5) in any modality")
        if not np.any(vis[0, 1:] <= 0.2):
            raise DatasetConfigError("modality 0 must hide at least one foreground class (visibility <= 0.2)")
        lo, hi = self.blobs
        if not 0 <= lo <= hi:
            raise DatasetConfigError("blob count range must satisfy 0 <= min <= max")
        if not 0 < self.radius[0] <= self.radius[1]:
            raise DatasetConfigError("radius range must be positive and ordered")
        if not 0 < self.inner_scale[0] <= self.inner_scale[1] <= 1:
            raise DatasetConfigError("inner_scale range must lie in (0, 1]")
        if self.noise < 0:
            raise DatasetConfigError("noise must be non-negative")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise DatasetConfigError("split sizes must be non-negative")

    @property
    def margin(self) -> float:
        """Blob centres keep this distance from the border so ellipses are never clipped."""
        return self.radius[1]


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray      # (M, H, W) float64
    labels: np.ndarray     # (H, W) int64
    seed: int


@dataclass(frozen=True)
class Dataset:
    config: GeneratorConfig
    train: list[SyntheticSample] = field(default_factory=list)
    val: list[SyntheticSample] = field(default_factory=list)
    test: list[SyntheticSample] = field(default_factory=list)

    def split(self, name: str) -> list[SyntheticSample]:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)

    @property
    def modalities(self) -> int:
        return self.config.modalities

    @property
    def classes(self) -> int:
        return self.config.classes


def stack(samples: Sequence[SyntheticSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``(B, M, H, W)`` and ``(B, H, W)``."""
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])


def paint_labels(config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = config.height, config.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.zeros((h, w), dtype=np.int64)
    n_blobs = int(rng.integers(config.blobs[0], config.blobs[1] + 1))
    m = config.margin
    for _ in range(n_blobs):
        cy = rng.uniform(min(m, h - 1 - m), max(m, h - 1 - m))
        cx = rng.uniform(min(m, w - 1 - m), max(m, w - 1 - m))
        a = rng.uniform(*config.radius)
        b = rng.uniform(*config.radius)
        theta = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        scale = 1.0
        for k in range(1, config.classes):
            if k > 1:
                scale *= rng.uniform(*config.inner_scale)
            inside = (u / (a * scale)) ** 2 + (v / (b * scale)) ** 2 <= 1.0
            labels[inside] = k
    return labels


def render(config: GeneratorConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    vis = np.asarray(config.visibility)
    image = vis[:, labels]
    if config.noise > 0:
        image = image + config.noise * rng.standard_normal(image.shape)
    if config.normalize:
        image = image - image.mean(axis=(1, 2), keepdims=True)
        std = image.std(axis=(1, 2), keepdims=True)
        image = image / np.where(std > 0, std, 1.0)
    return image


def make_sample(config: GeneratorConfig, index: int) -> SyntheticSample:
    """Sample ``index`` of the stream; depends only on (config, index)."""
    rng = np.random.default_rng([config.seed, index])
    labels = paint_labels(config, rng)
    return SyntheticSample(render(config, labels, rng), labels, index)


def generate(config: GeneratorConfig) -> Dataset:
    config.validate()
    counts = (config.n_train, config.n_val, config.n_test)
    offsets = np.cumsum((0,) + counts)
    splits = [[make_sample(config, i) for i in range(offsets[j], offsets[j + 1])] for j in range(3)]
    return Dataset(config, *splits)


def select_modality(sample: SyntheticSample, m: int) -> np.ndarray:
    """The single-modality input ``1×H×W`` seen by a student on modality ``m``."""
    n = sample.image.shape[0]
    if not 0 <= m < n:
        raise IndexError(f"modality {m} out of range for {n} modalities")
    return sample.image[m:m + 1]


def config_from_dict(d: dict) -> GeneratorConfig:
    return GeneratorConfig(**d)


def _config_dict(config: GeneratorConfig) -> dict:
    d = asdict(config)
    d["blobs"] = list(config.blobs)
    d["radius"] = list(config.radius)
    d["inner_scale"] = list(config.inner_scale)
    d["visibility"] = [list(r) for r in config.visibility]
    return d


def _encode(dataset: Dataset) -> tuple[dict, bytes]:
    cfg = dataset.config
    header = {
        "kind": "dataset",
        "version": DATASET_VERSION,
        "config": _config_dict(cfg),
        "counts": {"train": len(dataset.train), "val": len(dataset.val), "test": len(dataset.test)},
        "shapes": {"image": [cfg.modalities, cfg.height, cfg.width], "labels": [cfg.height, cfg.width]},
        "seeds": [s.seed for s in dataset.train + dataset.val + dataset.test],
    }
    chunks = []
    for s in dataset.train + dataset.val + dataset.test:
        chunks.append(np.asarray(s.image, dtype="<f8").tobytes())
        chunks.append(np.asarray(s.labels, dtype=np.uint8).tobytes())
    return header, b"".join(chunks)


def to_bytes(dataset: Dataset) -> bytes:
    return fileformat.dump_bytes(*_encode(dataset))


def save(dataset: Dataset, path) -> None:
    fileformat.write_file(path, *_encode(dataset))


def from_bytes(blob: bytes) -> Dataset:
    header, payload = fileformat.parse_bytes(blob, "dataset", DATASET_VERSION)
    try:
        config = config_from_dict(header["config"])
        counts = [int(header["counts"][k]) for k in ("train", "val", "test")]
        img_shape = tuple(int(v) for v in header["shapes"]["image"])
        lab_shape = tuple(int(v) for v in header["shapes"]["labels"])
        seeds = [int(v) for v in header["seeds"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise fileformat.MalformedHeaderError(f"bad dataset header: {exc}") from None
    if img_shape != (config.modalities, config.height, config.width) or lab_shape != img_shape[1:]:
        raise fileformat.MalformedHeaderError("shapes disagree with generator config")
    total = sum(counts)
    if len(seeds) != total:
        raise fileformat.MalformedHeaderError("seed list length disagrees with counts")
    img_bytes = 8 * int(np.prod(img_shape))
    lab_bytes = int(np.prod(lab_shape))
    need = total * (img_bytes + lab_bytes)
    if len(payload) != need:
        raise fileformat.TruncatedPayloadError(f"dataset payload has {len(payload)} bytes, expected {need}")
    samples, offset = [], 0
    for seed in seeds:
        image = np.frombuffer(payload, dtype="<f8", count=img_bytes // 8, offset=offset)
        offset += img_bytes
        labels = np.frombuffer(payload, dtype=np.uint8, count=lab_bytes, offset=offset)
        offset += lab_bytes
        if labels.size and labels.max() >= config.classes:
            raise fileformat.MalformedHeaderError(
                f"label value {labels.max()} exceeds classes={config.classes} in header")
        samples.append(SyntheticSample(image.astype(np.float64).reshape(img_shape),
                                       labels.astype(np.int64).reshape(lab_shape), seed))
    a, b = counts[0], counts[0] + counts[1]
    return Dataset(config, samples[:a], samples[a:b], samples[b:])


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
