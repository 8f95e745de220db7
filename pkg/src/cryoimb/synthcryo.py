"""Synthetic stand-in for the four-class subtomogram dataset.

Each class is a soft-edged parametric solid (double ellipsoid, small sphere,
hollow ring, single ellipsoid) placed at a random orientation with small
scale and translation jitter, plus i.i.d. Gaussian noise.  Every sample
draws from its own RNG stream keyed on ``(seed, class, index)``, so output
does not depend on how generation is split across workers.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import expit

from .dataset import LabeledDataset

GENERATOR_VERSION = 1

CLASS_NAMES = ("proteasome_d", "ribosome", "TRiC", "proteasome_s")
# class sizes of the original tomogram dataset and a half-size desk version
FULL_COUNTS = (1043, 80, 125, 386)
DESK_COUNTS = (522, 40, 62, 193)

EDGE_WIDTH = 0.08  # soft-boundary width, normalised units


@dataclass
class ClassTemplate:
    class_id: int
    shape: str  # double_ellipsoid | sphere | ring | ellipsoid
    size: tuple  # shape parameters in normalised units ([-1, 1] box)
    scale_jitter: float = 0.1
    shift_jitter: float = 0.1
    rotate: bool = True

    def density(self, coords):
        """Noise-free density at ``coords`` (..., 3), already in template frame."""
        x, y, z = coords[..., 0], coords[..., 1], coords[..., 2]
        if self.shape == "sphere":
            (r,) = self.size
            rho = np.sqrt(x * x + y * y + z * z) / r
            return expit((1.0 - rho) * r / EDGE_WIDTH)
        if self.shape == "ellipsoid":
            a, b, c = self.size
            rho = np.sqrt((x / a) ** 2 + (y / b) ** 2 + (z / c) ** 2)
            return expit((1.0 - rho) * min(a, b, c) / EDGE_WIDTH)
        if self.shape == "double_ellipsoid":
            offset, a, b = self.size
            lobes = [
                np.sqrt(((x - s * offset) / a) ** 2 + (y / b) ** 2 + (z / b) ** 2)
                for s in (-1.0, 1.0)
            ]
            rho = np.minimum(*lobes)
            return expit((1.0 - rho) * min(a, b) / EDGE_WIDTH)
        if self.shape == "ring":
            major, minor = self.size
            radial = np.sqrt(x * x + y * y) - major
            rho = np.sqrt(radial * radial + z * z) / minor
            return expit((1.0 - rho) * minor / EDGE_WIDTH)
        raise ValueError(f"unknown template shape {self.shape!r}")


def default_templates():
    return [
        ClassTemplate(0, "double_ellipsoid", (0.38, 0.32, 0.28)),
        ClassTemplate(1, "sphere", (0.42,)),
        ClassTemplate(2, "ring", (0.48, 0.17)),
        ClassTemplate(3, "ellipsoid", (0.56, 0.27, 0.27)),
    ]


@dataclass
class DatasetManifest:
    n_per_class: list = field(default_factory=lambda: list(DESK_COUNTS))
    dim: int = 16
    seed: int = 0
    noise_sigma: float = 0.8
    generator_version: int = GENERATOR_VERSION

    def __post_init__(self):
        self.n_per_class = [int(c) for c in self.n_per_class]
        if any(c < 0 for c in self.n_per_class):
            raise ValueError("class counts must be non-negative")
        if self.dim < 8:
            raise ValueError("volume dim must be at least 8")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.generator_version != GENERATOR_VERSION:
            raise ValueError(f"manifest asks for generator v{self.generator_version}")

    @property
    def n_classes(self):
        return len(self.n_per_class)

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def _grid(dim):
    axis = (np.arange(dim) - (dim - 1) / 2.0) / (dim / 2.0)
    g = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def _sample_rng(seed, class_id, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, class_id, index)))


def render(template, dim, rng=None, noise_sigma=0.0):
    """One volume of ``template``; ``rng=None`` gives the canonical pose, no noise."""
    pts = _grid(dim)
    if rng is not None:
        scale = 1.0 + rng.uniform(-template.scale_jitter, template.scale_jitter)
        shift = rng.uniform(-template.shift_jitter, template.shift_jitter, size=3)
        rot = Rotation.random(random_state=rng) if template.rotate else Rotation.identity()
        # map grid points into the template frame
        pts = rot.inv().apply(pts - shift) / scale
    vol = template.density(pts).reshape(dim, dim, dim)
    if rng is not None and noise_sigma > 0:
        vol = vol + noise_sigma * rng.standard_normal(vol.shape)
    return vol.astype(np.float32)


def generate_dataset(manifest, templates=None, workers=1):
    """Samples for every class in ``manifest``, shuffled into a fixed order."""
    templates = templates or default_templates()
    if len(templates) < manifest.n_classes:
        raise ValueError(f"{manifest.n_classes} classes but {len(templates)} templates")
    jobs = [(c, i) for c, n in enumerate(manifest.n_per_class) for i in range(n)]

    def one(job):
        c, i = job
        rng = _sample_rng(manifest.seed, c, i)
        return render(templates[c], manifest.dim, rng, manifest.noise_sigma)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vols = list(pool.map(one, jobs))
    else:
        vols = [one(j) for j in jobs]
    dim = manifest.dim
    volumes = np.stack(vols) if vols else np.zeros((0, dim, dim, dim), dtype=np.float32)
    labels = np.array([c for c, _ in jobs], dtype=np.int64)
    order = np.random.default_rng(np.random.SeedSequence(manifest.seed, spawn_key=(1,)))
    perm = order.permutation(len(labels))
    return LabeledDataset(volumes[perm], labels[perm], manifest.n_classes)


def scaled_counts(total, ratios=FULL_COUNTS):
    """Class counts summing to ``total`` in the given proportions (largest remainder)."""
    ratios = np.asarray(ratios, dtype=np.float64)
    exact = ratios / ratios.sum() * total
    counts = np.floor(exact).astype(int)
    for c in np.argsort(-(exact - counts), kind="stable")[: total - counts.sum()]:
        counts[c] += 1
    return counts.tolist()
