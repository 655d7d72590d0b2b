"""Shared fixtures and the finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np
import pytest

from gicl.graphstore import TagGraph, sample_label_fraction, synth_sbm
from gicl.nncore import ParamSet, Tape


def finite_difference_grads(loss_fn, params: ParamSet, step: float = 1e-4) -> dict[str, np.ndarray]:
    """Central finite differences of loss_fn() w.r.t. every parameter entry.

    loss_fn takes no arguments and must rebuild the forward pass from the
    current parameter values; this keeps the oracle independent of the
    reverse-mode path it is checking.
    """
    grads: dict[str, np.ndarray] = {}
    for name, tensor in params.tensors.items():
        g = np.zeros_like(tensor.data, dtype=np.float64)
        flat = tensor.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = loss_fn()
            flat[i] = keep - step
            down = loss_fn()
            flat[i] = keep
            gflat[i] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def gradcheck_errors(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> float:
    """Worst relative error across all entries; tiny gradients compared
    absolutely (denominator floored at 1e-4, so 1e-4 relative tolerance
    means 1e-8 absolute for near-zero entries)."""
    worst = 0.0
    for name in analytic:
        a = analytic[name].astype(np.float64)
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-4)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@pytest.fixture
def path_graph() -> TagGraph:
    """0-1-2-3-4-5 undirected path plus isolated node 6; two classes."""
    edges = "\n".join(f"{i}\t{i + 1}" for i in range(5))
    n = 7
    offsets = [0]
    targets: list[int] = []
    adj = {i: [] for i in range(n)}
    for i in range(5):
        adj[i].append(i + 1)
        adj[i + 1].append(i)
    for i in range(n):
        targets.extend(sorted(adj[i]))
        offsets.append(len(targets))
    feats = np.eye(n, 4, dtype=np.float32)
    feats[4:, 0] = 0.5
    return TagGraph(
        n_nodes=n,
        csr_offsets=np.array(offsets),
        csr_targets=np.array(targets),
        features=feats,
        texts=tuple(f"node {i}" for i in range(n)),
        labels=np.array([0, 0, 0, 1, 1, 1, 0]),
        label_vocab=("alpha", "beta"),
    )


@pytest.fixture
def clean_sbm() -> TagGraph:
    """Zero-noise two-block graph: features are exact class centroids."""
    return synth_sbm(n_nodes=30, n_classes=3, p_in=0.8, p_out=0.05, d=6, noise=0.0, seed=11)


@pytest.fixture
def noisy_sbm() -> TagGraph:
    return synth_sbm(n_nodes=90, n_classes=3, p_in=0.3, p_out=0.03, d=8, noise=0.4, seed=4)


@pytest.fixture
def clean_split(clean_sbm):
    return sample_label_fraction(clean_sbm, 0.5, seed=2)


def make_tape() -> Tape:
    return Tape()
