"""Keypoint features and their rasterization onto coarse grid maps.

The point encoder is a fixed, seeded stand-in for a learned point network:
each point's feature is ``tanh(A @ [x/W, y/H, desc...] + b)`` with ``A`` and
``b`` drawn once from the seed. Rasterization floors ``x * scale`` and
``y * scale`` to a cell and pools the features of all points in a cell.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

POOLING_MODES = ("max", "mean", "sum")


@dataclass
class KeypointSet:
    points: np.ndarray  # (n, 2)
    descriptors: np.ndarray  # (n, d), d may be 0
    frame_w: int
    frame_h: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.descriptors is None:
            self.descriptors = np.zeros((len(self.points), 0))
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim == 1 and self.descriptors.size == 0:
            self.descriptors = np.zeros((len(self.points), 0))
        if self.descriptors.ndim != 2 or (
                self.descriptors.shape[1] > 0 and len(self.descriptors) != len(self.points)):
            raise ContractViolation(
                f"descriptor count {len(self.descriptors)} != point count {len(self.points)}")
        if self.descriptors.shape[1] == 0:
            self.descriptors = np.zeros((len(self.points), 0))

    def __len__(self):
        return len(self.points)


@dataclass
class PointFeatureSet:
    features: np.ndarray  # (n, c)
    coords: np.ndarray  # (n, 2)


@dataclass
class GeometricFeatureMap:
    data: np.ndarray  # (c, grid_h, grid_w)
    scale: float

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid_h(self) -> int:
        return self.data.shape[1]

    @property
    def grid_w(self) -> int:
        return self.data.shape[2]


def encoder_params(in_dim: int, channels: int, seed: int):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((channels, in_dim))
    b = rng.standard_normal(channels) * 0.1
    return a, b


def encode_points(kp: KeypointSet, channels: int = 8, seed: int = 0) -> PointFeatureSet:
    if len(kp) == 0:
        raise ContractViolation("cannot encode an empty keypoint set")
    inputs = np.concatenate(
        [kp.points[:, :1] / kp.frame_w, kp.points[:, 1:] / kp.frame_h, kp.descriptors], axis=1)
    a, b = encoder_params(inputs.shape[1], channels, seed)
    return PointFeatureSet(np.tanh(inputs @ a.T + b), kp.points.copy())


def grid_size(frame_w: int, frame_h: int, scale: float):
    return int(np.floor(frame_h * scale)), int(np.floor(frame_w * scale))


def cell_indices(coords: np.ndarray, scale: float, frame_w: int, frame_h: int):
    """Floor-quantized (row, col) cells; points in a trailing partial strip join the last cell."""
    coords = np.asarray(coords, dtype=np.float64)
    bad = np.flatnonzero(~((coords[:, 0] >= 0) & (coords[:, 0] < frame_w)
                           & (coords[:, 1] >= 0) & (coords[:, 1] < frame_h)))
    if bad.size:
        raise ContractViolation(f"point {int(bad[0])} lies outside the {frame_w}x{frame_h} frame")
    gh, gw = grid_size(frame_w, frame_h, scale)
    cx = np.minimum(np.floor(coords[:, 0] * scale).astype(np.intp), gw - 1)
    cy = np.minimum(np.floor(coords[:, 1] * scale).astype(np.intp), gh - 1)
    return cy, cx


def rasterize(pf: PointFeatureSet, scale: float, frame_w: int, frame_h: int,
              pooling: str = "max") -> GeometricFeatureMap:
    """Scatter point features onto a zero grid, pooling points that share a cell."""
    if pooling not in POOLING_MODES:
        raise ContractViolation(f"pooling must be one of {POOLING_MODES}")
    gh, gw = grid_size(frame_w, frame_h, scale)
    if gh < 1 or gw < 1:
        raise ContractViolation("frame too small for this scale")
    feats = np.asarray(pf.features, dtype=np.float64)
    c = feats.shape[1]
    cy, cx = cell_indices(pf.coords, scale, frame_w, frame_h)
    flat = cy * gw + cx
    counts = np.bincount(flat, minlength=gh * gw)
    if pooling == "max":
        acc = np.full((gh * gw, c), -np.inf)
        np.maximum.at(acc, flat, feats)
    else:
        acc = np.zeros((gh * gw, c))
        np.add.at(acc, flat, feats)
        if pooling == "mean":
            acc[counts > 0] /= counts[counts > 0, None]
    acc[counts == 0] = 0.0
    return GeometricFeatureMap(acc.T.reshape(c, gh, gw), scale)
