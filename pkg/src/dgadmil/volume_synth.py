"""Synthetic aging phantoms.

Each subject is a smooth two-Gaussian template inside an ellipsoidal head mask,
plus an age-independent smooth perturbation seeded by the subject, plus a dark
ellipsoid whose size grows affinely with age. The ellipsoid is confined to a
slab of slices along the bagging axis so attention maps have a ground truth.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .container import FormatError, parse_float, parse_ints, read_container, write_container

VOLUME_MAGIC = "DGAVOL1"
MANIFEST_MAGIC = "#DGAMANIFEST"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


@dataclass(frozen=True)
class GeneratorConfig:
    shape: tuple[int, int, int] = (40, 48, 40)
    age_min: float = 44.0
    age_max: float = 82.0
    noise: float = 0.05
    perturbation: float = 0.15
    seed: int = 0
    axis: int = 1
    m: int = 3
    slab_instances: int = 4
    signal_depth: float = 0.7
    edge_sharpness: float = 6.0
    radius_min_frac: float = 0.2
    radius_max_frac: float = 0.45
    perturbation_smoothness: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if len(self.shape) != 3 or any(s <= 0 for s in self.shape):
            raise ConfigError(f"shape must be three positive integers, got {self.shape}")
        if self.axis not in (0, 1, 2):
            raise ConfigError(f"axis must be 0, 1 or 2, got {self.axis}")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if any(s < self.m for s in self.shape):
            raise ConfigError(f"degenerate shape {self.shape}: every axis must be >= m={self.m}")
        if self.shape[self.axis] < self.m * self.slab_instances:
            raise ConfigError(
                f"bagging axis length {self.shape[self.axis]} < m * slab_instances = {self.m * self.slab_instances}"
            )
        if not self.age_max > self.age_min:
            raise ConfigError("age_max must exceed age_min")
        if self.noise < 0 or self.perturbation < 0:
            raise ConfigError("noise and perturbation amplitudes must be >= 0")

    @property
    def signal_slab(self) -> tuple[int, int]:
        """Inclusive slice range of the planted signal, aligned to the instance grid."""
        length = self.shape[self.axis]
        k = length // self.m
        offset = (length - k * self.m) // 2
        first = (k - self.slab_instances) // 2
        start = offset + first * self.m
        return start, start + self.slab_instances * self.m - 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Volume:
    voxels: np.ndarray
    age: float
    subject_seed: int
    signal_slab: tuple[int, int]
    axis: int = 1

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.voxels.shape}")
        lo, hi = self.signal_slab
        if not 0 <= lo <= hi < self.voxels.shape[self.axis]:
            raise ValueError(f"signal_slab {self.signal_slab} outside axis of length {self.voxels.shape[self.axis]}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class ManifestEntry:
    path: str
    age: float
    subject_seed: int
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    config: GeneratorConfig
    root: Path = field(default_factory=Path)
    version: int = MANIFEST_VERSION

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def load(self, entry: ManifestEntry) -> Volume:
        return read_volume(self.resolve(entry))


def _grid(shape):
    return np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")


def _template(config: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Base intensity template and head mask (both deterministic in config)."""
    shape = np.array(config.shape, dtype=np.float64)
    coords = _grid(config.shape)
    centre = (shape - 1) / 2

    def gaussian(c, sigma, amp):
        r2 = sum(((x - ci) / si) ** 2 for x, ci, si in zip(coords, c, sigma))
        return amp * np.exp(-0.5 * r2)

    head = gaussian(centre, 0.35 * shape, 1.0)
    band_centre = centre.copy()
    band_centre[0] += 0.12 * shape[0]
    band = gaussian(band_centre, 0.2 * shape, 0.5)
    rho2 = sum(((x - ci) / (0.45 * si)) ** 2 for x, ci, si in zip(coords, centre, shape))
    mask = rho2 <= 1.0
    return head + band, mask


def signal_radius_fraction(age: float, config: GeneratorConfig) -> float:
    t = (age - config.age_min) / (config.age_max - config.age_min)
    return config.radius_min_frac + (config.radius_max_frac - config.radius_min_frac) * t


def _signal_factor(age: float, config: GeneratorConfig) -> np.ndarray:
    """Multiplicative darkening, 1 outside the slab and < 1 inside it."""
    frac = signal_radius_fraction(age, config)
    lo, hi = config.signal_slab
    shape = np.array(config.shape, dtype=np.float64)
    centre = (shape - 1) / 2
    centre[config.axis] = (lo + hi) / 2
    # in-plane diameter spans frac of the axis; along the bagging axis the
    # ellipsoid never exceeds the slab half-width
    semi = frac * shape / 2
    semi[config.axis] = (hi - lo + 1) / 2 * frac / config.radius_max_frac
    coords = _grid(config.shape)
    rho = np.sqrt(sum(((x - c) / s) ** 2 for x, c, s in zip(coords, centre, semi)))
    darkening = config.signal_depth / (1.0 + np.exp(-config.edge_sharpness * (1.0 - rho)))
    in_slab = (coords[config.axis] >= lo) & (coords[config.axis] <= hi)
    return np.where(in_slab, 1.0 - darkening, 1.0)


def synth_subject(subject_seed: int, age: float, config: GeneratorConfig) -> Volume:
    if not config.age_min <= age <= config.age_max:
        raise ConfigError(f"age {age} outside configured range [{config.age_min}, {config.age_max}]")
    template, mask = _template(config)
    dyn_range = float(template[mask].max() - template[mask].min())
    rng = np.random.default_rng(subject_seed)
    white = rng.standard_normal(config.shape)
    smooth = gaussian_filter(white, config.perturbation_smoothness, mode="reflect")
    smooth /= smooth.std() + 1e-12
    noise = rng.standard_normal(config.shape)
    body = (template + config.perturbation * dyn_range * smooth) * _signal_factor(age, config)
    body = body + config.noise * dyn_range * noise
    voxels = np.where(mask, body, 0.0).astype(np.float32)
    return Volume(voxels, float(age), int(subject_seed), config.signal_slab, config.axis)


def write_volume(volume: Volume, path: str | os.PathLike) -> None:
    meta = {
        "age": float(volume.age),
        "seed": int(volume.subject_seed),
        "slab": tuple(volume.signal_slab),
        "axis": int(volume.axis),
    }
    write_container(path, VOLUME_MAGIC, volume.voxels, meta)


def read_volume(path: str | os.PathLike) -> Volume:
    voxels, fields = read_container(path, VOLUME_MAGIC)
    if voxels.ndim != 3:
        raise FormatError(f"shape: expected 3 axes, found {voxels.ndim}")
    slab = parse_ints(fields, "slab")
    if len(slab) != 2:
        raise FormatError("slab: expected two indices")
    (axis,) = parse_ints(fields, "axis")
    (seed,) = parse_ints(fields, "seed")
    try:
        return Volume(voxels, parse_float(fields, "age"), seed, (slab[0], slab[1]), axis)
    except ValueError as exc:
        raise FormatError(f"slab: {exc}") from exc


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError("split fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    val = math.floor(n * fractions[1] + 1e-9)
    test = math.floor(n * fractions[2] + 1e-9)
    return n - val - test, val, test


def synth_dataset(
    config: GeneratorConfig,
    n_subjects: int,
    split_fractions=(0.8, 0.1, 0.1),
    out_dir: str | os.PathLike = ".",
) -> DatasetManifest:
    if n_subjects < 3:
        raise ConfigError("n_subjects must be >= 3")
    sizes = split_sizes(n_subjects, split_fractions)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")

    rng = np.random.default_rng(config.seed)
    ages = rng.uniform(config.age_min, config.age_max, size=n_subjects)
    tags = np.array([t for t, s in zip(SPLITS, sizes) for _ in range(s)])
    tags = tags[rng.permutation(n_subjects)]
    entries = []
    for i in range(n_subjects):
        seed = config.seed * 1_000_003 + i
        vol = synth_subject(seed, float(ages[i]), config)
        name = f"vol_{i:05d}.dgavol"
        write_volume(vol, out / name)
        entries.append(ManifestEntry(name, float(ages[i]), seed, str(tags[i])))
    manifest = DatasetManifest(entries, config, out)
    write_manifest(manifest, out / "manifest.txt")
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    lines = [f"{MANIFEST_MAGIC} version={manifest.version}", "[config]"]
    for key, value in manifest.config.to_dict().items():
        lines.append(f"{key}={json.dumps(value)}")
    lines.append("[entries]")
    for e in manifest.entries:
        lines.append(f"{e.path}\t{e.age!r}\t{e.subject_seed}\t{e.split}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(MANIFEST_MAGIC):
        raise FormatError("magic: not a dataset manifest")
    try:
        version = int(lines[0].split("version=")[1])
    except (IndexError, ValueError) as exc:
        raise FormatError("version: missing or malformed") from exc
    section = None
    cfg: dict = {}
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line in ("[config]", "[entries]"):
            section = line
            continue
        if section == "[config]":
            key, _, value = line.partition("=")
            cfg[key] = json.loads(value)
        elif section == "[entries]":
            parts = line.split("\t")
            if len(parts) != 4 or parts[3] not in SPLITS:
                raise FormatError(f"entry: malformed record on line {lineno}")
            entries.append(ManifestEntry(parts[0], float(parts[1]), int(parts[2]), parts[3]))
        else:
            raise FormatError(f"section: content outside a section on line {lineno}")
    if len({e.path for e in entries}) != len(entries):
        raise FormatError("entry: duplicate paths")
    return DatasetManifest(entries, GeneratorConfig.from_dict(cfg), path.parent, version)


def manifest_hash(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
