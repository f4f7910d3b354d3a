"""
Shared inducing set and the IP-data conditioning rules.

The inducing inputs live in embedding space and are server state, shipped
and averaged together with the network parameters.  Their labels are fixed
and spread evenly across classes.  At a tree node an inducing point takes
the binary routing label of its class, exactly like a real data point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "InducingSet",
    "init_inducing",
    "class_means",
    "route_inducing",
    "ipdata_train_conditioning",
    "ipdata_test_conditioning",
    "label_distribution",
    "conditioning_distribution",
]


@dataclass
class InducingSet:
    """Pseudo-inputs ``Xbar`` (M, e) with fixed class labels ``ybar`` (M,)."""

    Xbar: np.ndarray
    ybar: np.ndarray

    def __post_init__(self):
        self.Xbar = np.atleast_2d(np.asarray(self.Xbar, dtype=float))
        self.ybar = np.asarray(self.ybar, dtype=int).ravel()
        if self.Xbar.shape[0] != self.ybar.size:
            raise ValueError("Xbar and ybar lengths differ")
        if self.ybar.size == 0:
            raise ValueError("an inducing set needs at least one point")

    @property
    def n_points(self) -> int:
        return self.ybar.size

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.ybar)

    def counts(self) -> dict:
        vals, cnt = np.unique(self.ybar, return_counts=True)
        return dict(zip(vals.tolist(), cnt.tolist()))

    def with_inputs(self, Xbar) -> "InducingSet":
        Xbar = np.asarray(Xbar, dtype=float)
        if Xbar.shape != self.Xbar.shape:
            raise ValueError("replacement inputs have the wrong shape")
        return InducingSet(Xbar, self.ybar.copy())

    def copy(self) -> "InducingSet":
        return InducingSet(self.Xbar.copy(), self.ybar.copy())


def class_means(embeddings, labels, n_classes: int) -> np.ndarray:
    """Per-class embedding means; classes with no points get the global mean."""
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels, dtype=int)
    overall = embeddings.mean(axis=0) if embeddings.size else np.zeros(embeddings.shape[1])
    out = np.tile(overall, (n_classes, 1))
    for c in range(n_classes):
        sel = labels == c
        if sel.any():
            out[c] = embeddings[sel].mean(axis=0)
    return out


def init_inducing(means, n_points: int, rng: np.random.Generator, noise: float = 0.1) -> InducingSet:
    """Spread ``n_points`` evenly over classes around the class means.

    When ``n_points`` is not a multiple of the class count the first classes
    get one extra point.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    n_classes = means.shape[0]
    if n_points < 1:
        raise ValueError("need at least one inducing point")
    base, extra = divmod(int(n_points), n_classes)
    ybar = np.concatenate([np.full(base + (c < extra), c) for c in range(n_classes)]).astype(int)
    Xbar = means[ybar] + noise * rng.standard_normal((ybar.size, means.shape[1]))
    return InducingSet(Xbar, ybar)


def route_inducing(inducing: InducingSet, left_classes, right_classes):
    """Indices of inducing points under a node and their routing labels (1 = left)."""
    left = np.isin(inducing.ybar, list(left_classes))
    right = np.isin(inducing.ybar, list(right_classes))
    idx = np.flatnonzero(left | right)
    return idx, left[idx].astype(float)


def ipdata_train_conditioning(inducing: InducingSet, left_classes, right_classes):
    """Training conditioning set at a node: the routed inducing points only."""
    idx, y = route_inducing(inducing, left_classes, right_classes)
    if idx.size == 0:
        raise ValueError("no inducing points route to this node")
    return inducing.Xbar[idx], y, idx


def ipdata_test_conditioning(inducing: InducingSet, left_classes, right_classes, client_X, client_y,
                             combine: bool = True):
    """Test-time conditioning set: routed inducing points, plus the client's routed data.

    Returns inputs, routing labels and a boolean mask marking rows that are
    inducing points.  With ``combine`` off only the inducing part is kept.
    """
    idx, y = route_inducing(inducing, left_classes, right_classes)
    xs, ys = [inducing.Xbar[idx]], [y]
    client_X = np.asarray(client_X, dtype=float).reshape(-1, inducing.Xbar.shape[1])
    client_y = np.asarray(client_y, dtype=float).ravel()
    if combine and client_y.size:
        xs.append(client_X)
        ys.append(client_y)
    X = np.concatenate(xs)
    yv = np.concatenate(ys)
    is_inducing = np.zeros(yv.size, dtype=bool)
    is_inducing[: idx.size] = True
    return X, yv, is_inducing


def label_distribution(labels, classes) -> np.ndarray:
    """Empirical distribution of ``labels`` over ``classes`` (zeros allowed)."""
    labels = np.asarray(labels, dtype=int).ravel()
    counts = np.array([np.sum(labels == c) for c in classes], dtype=float)
    total = counts.sum()
    if total == 0:
        raise ValueError("no labels to count")
    return counts / total


def conditioning_distribution(inducing: InducingSet, client_labels, classes, source: str = "combined"):
    """Class distribution of the set an IP-data model conditions on at test time.

    ``source`` is ``"combined"`` (inducing labels of the client's classes plus
    the client's labels) or ``"inducing"`` (inducing labels alone).
    """
    if source not in ("combined", "inducing"):
        raise ValueError(f"unknown ratio source {source!r}")
    ind = inducing.ybar[np.isin(inducing.ybar, list(classes))]
    labels = ind if source == "inducing" else np.concatenate([ind, np.asarray(client_labels, dtype=int).ravel()])
    return label_distribution(labels, classes)
