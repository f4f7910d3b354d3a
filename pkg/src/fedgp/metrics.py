"""Accuracy and calibration metrics over equal-width confidence bins."""

from __future__ import annotations

import csv
import io

import numpy as np

__all__ = ["accuracy", "ece", "mce", "brier", "reliability_table", "reliability_export", "confidence_and_correct"]


def _check(confidences, correct):
    conf = np.asarray(confidences, dtype=float).ravel()
    corr = np.asarray(correct, dtype=float).ravel()
    if conf.size == 0:
        raise ValueError("metrics need at least one prediction")
    if conf.shape != corr.shape:
        raise ValueError("confidences and correctness differ in length")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    return conf, corr


def _bins(conf, n_bins):
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    # bin b covers (b/n, (b+1)/n]; zero goes to the first bin
    return np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)


def reliability_table(confidences, correct, n_bins: int = 10):
    """Per-bin (center, accuracy, mean confidence, count); empty bins give NaN."""
    conf, corr = _check(confidences, correct)
    b = _bins(conf, n_bins)
    count = np.bincount(b, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.bincount(b, weights=corr, minlength=n_bins) / count
        mean_conf = np.bincount(b, weights=conf, minlength=n_bins) / count
    centers = (np.arange(n_bins) + 0.5) / n_bins
    return centers, acc, mean_conf, count


def ece(confidences, correct, n_bins: int = 10) -> float:
    _, acc, conf, count = reliability_table(confidences, correct, n_bins)
    nz = count > 0
    return float(np.sum(count[nz] * np.abs(acc[nz] - conf[nz])) / count.sum())


def mce(confidences, correct, n_bins: int = 10) -> float:
    _, acc, conf, count = reliability_table(confidences, correct, n_bins)
    nz = count > 0
    return float(np.max(np.abs(acc[nz] - conf[nz])))


def brier(probs, labels) -> float:
    """Mean squared distance between probability rows and one-hot labels.

    ``labels`` are either integer column indices or a one-hot matrix.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    labels = np.asarray(labels)
    onehot = labels.astype(float) if labels.ndim == 2 else np.eye(p.shape[1])[labels.astype(int)]
    if onehot.shape != p.shape:
        raise ValueError("probabilities and labels differ in shape")
    return float(np.mean(np.sum((p - onehot) ** 2, axis=1)))


def accuracy(probs, labels) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def confidence_and_correct(probs, labels):
    """Max-probability confidence and 0/1 correctness per row."""
    probs = np.asarray(probs, dtype=float)
    return probs.max(axis=1), (probs.argmax(axis=1) == np.asarray(labels)).astype(float)


def reliability_export(confidences, correct, n_bins: int = 10, path=None) -> str:
    """Reliability-diagram data as CSV text (also written to ``path`` if given)."""
    centers, acc, conf, count = reliability_table(confidences, correct, n_bins)
    buf = io.StringIO()
    buf.write("# format: fedgp-reliability/1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_center", "accuracy", "confidence", "count"])
    for row in zip(centers, acc, conf, count):
        w.writerow([repr(float(row[0])), "" if np.isnan(row[1]) else repr(float(row[1])),
                    "" if np.isnan(row[2]) else repr(float(row[2])), int(row[3])])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
