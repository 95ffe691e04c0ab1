"""Frozen-feature evaluation: linear probe, L1 retrieval, view audits.

Everything here consumes precomputed feature arrays; encoder parameters
are never touched, so probing cannot perturb a trained model.
"""

from __future__ import annotations

import logging

import numpy as np

from . import diffmath as dm
from .errors import ConfigError, ShapeError
from .optim import AdamState, adaptive_moment_update

log = logging.getLogger(__name__)


def linear_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    epochs: int = 200,
    lr: float = 1e-2,
) -> float:
    """Multinomial logistic regression on frozen features; top-1 test accuracy.

    Full-batch adaptive-moment training from a zero init (the objective is
    convex, so the start point only affects the path).
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    classes = np.unique(np.concatenate([train_y, test_y]))
    missing = np.setdiff1d(classes, np.unique(train_y))
    if missing.size:
        raise ConfigError(f"classes {missing.tolist()} absent from training labels")
    class_of = {c: i for i, c in enumerate(classes.tolist())}
    y_idx = np.array([class_of[c] for c in train_y.tolist()])
    n, d = train_x.shape
    c = len(classes)
    params = {"W": np.zeros((d, c)), "b": np.zeros(c)}
    state = AdamState()
    label_cols = np.arange(n) * c + y_idx
    for _ in range(epochs):
        w = dm.Node(params["W"], op="W")
        b = dm.Node(params["b"], op="b")
        logits = dm.affine(dm.constant(train_x), w, b)
        lse = dm.logsumexp(logits, axis=1)
        picked = dm.gather_rows(dm.reshape(logits, (n * c,)), label_cols)
        loss = dm.reduce_mean(lse - picked)
        gw, gb = dm.backward(loss, [w, b])
        params, state = adaptive_moment_update(
            params, {"W": gw, "b": gb}, state, lr
        )
    pred = np.argmax(test_x @ params["W"] + params["b"], axis=1)
    truth = np.array([class_of[c] for c in test_y.tolist()])
    return float(np.mean(pred == truth))


def knn_retrieve(query: np.ndarray, gallery: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest gallery rows by L1 distance, ties to lower index."""
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ShapeError("gallery must be a non-empty (N, D) matrix")
    if k > gallery.shape[0] or k < 0:
        raise ConfigError(f"k={k} outside [0, {gallery.shape[0]}]")
    dists = np.sum(np.abs(gallery - np.asarray(query, dtype=np.float64)), axis=1)
    order = np.argsort(dists, kind="stable")
    return order[:k]


def view_discriminability(embeddings: np.ndarray, view_labels: np.ndarray) -> float:
    """Probe accuracy at predicting an embedding's source view.

    Lower is better alignment: if views are indistinguishable the probe
    cannot beat chance.  Uses a deterministic per-view even/odd split.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    view_labels = np.asarray(view_labels, dtype=np.int64)
    if len(np.unique(view_labels)) < 2:
        raise ConfigError("need embeddings from at least two views")
    train_mask = np.zeros(len(view_labels), dtype=bool)
    for v in np.unique(view_labels):
        members = np.flatnonzero(view_labels == v)
        train_mask[members[::2]] = True
    return linear_probe(
        embeddings[train_mask],
        view_labels[train_mask],
        embeddings[~train_mask],
        view_labels[~train_mask],
    )


def export_embedding_2d(features: np.ndarray) -> np.ndarray:
    """Top-2 principal-component coordinates with a deterministic sign.

    Each component is flipped so its largest-magnitude entry is positive;
    a rank-deficient second direction yields zeroed second coordinates.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 3:
        raise ShapeError("need at least 3 samples of (n, d) features")
    centered = features - features.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    comps = np.zeros((2, features.shape[1]))
    ranks = min(2, vt.shape[0])
    for i in range(ranks):
        if svals[i] <= 1e-12 * max(1.0, svals[0]):
            log.warning("component %d is rank-deficient; zeroing it", i + 1)
            continue
        comp = vt[i]
        if comp[np.argmax(np.abs(comp))] < 0:
            comp = -comp
        comps[i] = comp
    return centered @ comps.T
