"""View graphs: adjacency from angular stride distance, plus normalization.

Two views taken from the same direction group are connected when the
circular stride distance between their indices is at most the threshold
angle.  The default normalization is the symmetric degree scaling
D^{-1/2} (A with self-loops) D^{-1/2}; the one-sided ``literal`` variant is
kept behind a switch purely for comparison because it is not symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class IndexOutOfRange(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


NORMALIZATION_MODES = ("symmetric", "paper_literal")


def rs_dist(i, j, rs_deg, n_views):
    """Circular angular distance between two view indices, in degrees."""
    if not (0 <= i < n_views and 0 <= j < n_views):
        raise IndexOutOfRange(f"view indices ({i}, {j}) out of range for {n_views} views")
    step = abs(i - j)
    return min(step, n_views - step) * rs_deg


def build_adjacency(n_views, rs_deg, theta_deg):
    """Binary symmetric adjacency: 1 where the stride distance is <= theta.

    The diagonal is always 1 (distance zero) for any theta >= 0.
    """
    idx = np.arange(n_views)
    step = np.abs(idx[:, None] - idx[None, :])
    dist = np.minimum(step, n_views - step) * rs_deg
    return (dist <= theta_deg).astype(np.float64)


def normalize_adjacency(adjacency, mode="symmetric"):
    """Degree-normalize a binary symmetric adjacency matrix.

    symmetric: ensure self-loops (saturating, the diagonal stays 1), then
    scale both sides by the inverse square root of the with-loop degrees.
    Isolated nodes keep degree 1 through their self-loop, so the result is
    always finite, symmetric, and has spectral radius <= 1.

    paper_literal: the one-sided form D^{-1/2} (A + I) D^{+1/2} with degrees
    taken from A alone and the identity truly added; exposed only so the two
    can be compared.
    """
    adjacency = np.asarray(adjacency, dtype=np.float64)
    n = adjacency.shape[0]
    if adjacency.shape != (n, n):
        raise ShapeMismatch(f"adjacency must be square, got {adjacency.shape}")
    if mode not in NORMALIZATION_MODES:
        raise ValueError(f"normalization mode must be one of {NORMALIZATION_MODES}")
    if mode == "symmetric":
        looped = adjacency.copy()
        np.fill_diagonal(looped, 1.0)
        inv_sqrt = 1.0 / np.sqrt(looped.sum(axis=1))
        return looped * inv_sqrt[:, None] * inv_sqrt[None, :]
    degrees = adjacency.sum(axis=1)
    if np.any(degrees <= 0):
        raise ValueError("literal normalization undefined for isolated nodes (zero degree)")
    looped = adjacency + np.eye(n)
    scale = np.sqrt(degrees)
    return looped / scale[:, None] * scale[None, :]


@dataclass
class ViewGraph:
    """Node feature matrix plus raw and normalized adjacency for one direction."""

    nodes: object  # (N, D) array or Tensor
    adjacency_raw: np.ndarray
    adjacency_norm: np.ndarray
    rs_deg: float
    theta_deg: float

    @property
    def n_views(self):
        return self.adjacency_raw.shape[0]


def build_graph(node_features, rs_deg, theta_deg, normalization="symmetric"):
    """Assemble a ViewGraph; the node count must equal floor(360 / rs)."""
    n = node_features.shape[0]
    expected = int(360.0 // rs_deg)
    if n != expected:
        raise ShapeMismatch(f"{n} node vectors but stride {rs_deg} implies {expected} views")
    raw = build_adjacency(n, rs_deg, theta_deg)
    return ViewGraph(node_features, raw, normalize_adjacency(raw, normalization), rs_deg, theta_deg)
