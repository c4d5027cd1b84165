"""Volume -> bag-of-instances conversion."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .container import FormatError, parse_float, parse_ints, read_container, write_container
from .volume_synth import ConfigError, Volume

BAG_MAGIC = "DGABAG1"
NORM_MODES = ("zscore_nonzero", "zscore", "minmax", "none")


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class BagConfig:
    m: int = 3
    K: int | None = None  # None: as many instances as fit on the axis
    axis: int = 1
    norm: str = "zscore_nonzero"
    pad_multiple: int = 16

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.K is not None and self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.axis not in (0, 1, 2):
            raise ConfigError(f"invalid bagging axis {self.axis}")
        if self.norm not in NORM_MODES:
            raise ConfigError(f"unknown normalization {self.norm!r}, expected one of {NORM_MODES}")
        if self.pad_multiple < 1:
            raise ConfigError("pad_multiple must be >= 1")


@dataclass
class Bag:
    instances: np.ndarray  # (K, m, H, W)
    age: float
    instance_axis_ranges: list[tuple[int, int]]
    subject_id: int
    signal_slab: tuple[int, int] | None = None

    @property
    def K(self) -> int:
        return self.instances.shape[0]

    def signal_instances(self) -> list[int]:
        """Indices of instances overlapping the planted slab."""
        if self.signal_slab is None:
            return []
        lo, hi = self.signal_slab
        return [j for j, (s, e) in enumerate(self.instance_axis_ranges) if s <= hi and e - 1 >= lo]


def crop_to_mask(volume: Volume) -> Volume:
    nz = np.argwhere(volume.voxels > 0)
    if nz.size == 0:
        raise DegenerateInputError("cannot crop a volume without positive voxels")
    lo = nz.min(axis=0)
    hi = nz.max(axis=0) + 1
    voxels = volume.voxels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].copy()
    a = volume.axis
    length = hi[a] - lo[a]
    s0 = min(max(volume.signal_slab[0] - lo[a], 0), length - 1)
    s1 = min(max(volume.signal_slab[1] - lo[a], 0), length - 1)
    return replace(volume, voxels=voxels, signal_slab=(int(s0), int(s1)))


def normalize_volume(volume: Volume, mode: str = "zscore_nonzero") -> Volume:
    v = volume.voxels.astype(np.float64)
    if not np.all(np.isfinite(v)):
        raise DegenerateInputError("volume contains non-finite voxels")
    if mode == "none":
        out = v
    elif mode == "zscore":
        std = v.std()
        if std == 0:
            raise DegenerateInputError("constant volume cannot be z-scored")
        out = (v - v.mean()) / std
    elif mode == "zscore_nonzero":
        mask = v != 0
        if mask.sum() < 2 or v[mask].std() == 0:
            raise DegenerateInputError("constant volume cannot be z-scored")
        out = np.where(mask, (v - v[mask].mean()) / v[mask].std(), 0.0)
    elif mode == "minmax":
        lo, hi = v.min(), v.max()
        out = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    else:
        raise ConfigError(f"unknown normalization {mode!r}")
    return replace(volume, voxels=out.astype(np.float32))


def _pad_plane(stack: np.ndarray, multiple: int) -> np.ndarray:
    pads = [(0, 0)]
    for size in stack.shape[1:]:
        extra = (-size) % multiple
        pads.append((extra // 2, extra - extra // 2))
    return np.pad(stack, pads) if any(p != (0, 0) for p in pads) else stack


def make_bag(volume: Volume, cfg: BagConfig = BagConfig(), normalize: bool = True) -> Bag:
    """Slice ``volume`` along ``cfg.axis`` into K instances of m adjacent slices.

    Instance j covers slices ``[start + j*m, start + (j+1)*m)`` and its channel
    c is slice ``start + j*m + c``; ``start`` centres the K*m slices on the axis.
    """
    if normalize and cfg.norm != "none":
        volume = normalize_volume(volume, cfg.norm)
    length = volume.voxels.shape[cfg.axis]
    K = cfg.K if cfg.K is not None else length // cfg.m
    if K * cfg.m > length:
        raise ConfigError(f"K*m = {K * cfg.m} exceeds axis length {length}")
    start = (length - K * cfg.m) // 2
    stack = np.moveaxis(volume.voxels, cfg.axis, 0)[start:start + K * cfg.m]
    stack = _pad_plane(stack, cfg.pad_multiple)
    instances = stack.reshape(K, cfg.m, *stack.shape[1:]).astype(np.float32)
    ranges = [(start + j * cfg.m, start + (j + 1) * cfg.m) for j in range(K)]
    slab = volume.signal_slab if volume.axis == cfg.axis else None
    return Bag(np.ascontiguousarray(instances), float(volume.age), ranges, int(volume.subject_seed), slab)


def write_bag(bag: Bag, path: str | os.PathLike) -> None:
    m = bag.instances.shape[1]
    meta = {"age": bag.age, "subject": bag.subject_id, "start": bag.instance_axis_ranges[0][0], "m": m}
    if bag.signal_slab is not None:
        meta["slab"] = tuple(bag.signal_slab)
    write_container(path, BAG_MAGIC, bag.instances, meta)


def read_bag(path: str | os.PathLike) -> Bag:
    instances, fields = read_container(path, BAG_MAGIC)
    if instances.ndim != 4:
        raise FormatError(f"shape: expected 4 axes, found {instances.ndim}")
    (start,) = parse_ints(fields, "start")
    (m,) = parse_ints(fields, "m")
    (subject,) = parse_ints(fields, "subject")
    if m != instances.shape[1]:
        raise FormatError(f"m: header says {m}, shape says {instances.shape[1]}")
    slab = parse_ints(fields, "slab") if "slab" in fields else None
    ranges = [(start + j * m, start + (j + 1) * m) for j in range(instances.shape[0])]
    return Bag(instances, parse_float(fields, "age"), ranges, subject, slab)
