"""Adversarial attacks on deep clustering models, with defenses and a mock
face-album service. Thin layer over the native ``_clusterbreak`` module."""

import json

from ._clusterbreak import (
    ClusterbreakError,
    ClusterModel,
    Generator,
    acc,
    ari,
    make_synthetic,
    nmi,
)
from . import _clusterbreak as _native

__all__ = [
    "ClusterbreakError",
    "ClusterModel",
    "Generator",
    "acc",
    "ari",
    "make_synthetic",
    "metrics_report",
    "nmi",
    "run",
    "train_attack",
]


def metrics_report(pred, truth):
    """NMI, ARI, ACC, confusion table and cluster-to-class mapping."""
    return json.loads(_native._metrics_report(pred, truth))


def train_attack(victim, images, epsilon=0.5, max_batches=300, seed=0):
    """Returns (generator, ledger dict, converged)."""
    gen, ledger, converged = Generator._train(victim, images, epsilon, max_batches, seed)
    return gen, json.loads(ledger), converged


def run(config=None, **overrides):
    """Runs one experiment from flat config keys (same keys as the CLI's
    ``--set``) and returns the report as a dict."""
    values = dict(config or {})
    values.update(overrides)
    return json.loads(_native._run({k: _flat(v) for k, v in values.items()}))


def _flat(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)
