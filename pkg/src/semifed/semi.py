"""Client-side pseudo-labelling, uncertainty gating and fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .nn import LossSpec, minibatches, softmax, train_step

EVIDENTIAL = "evidential"
CONFIDENCE = "confidence"


@dataclass
class PseudoDataset:
    features: np.ndarray
    labels: np.ndarray
    uncertainty: np.ndarray

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx):
        return PseudoDataset(self.features[idx], self.labels[idx], self.uncertainty[idx])


def uncertainty_score(logits, variant=EVIDENTIAL):
    """Per-sample uncertainty in [0, 1] from logits.

    ``evidential``: ``C / sum(relu(logit) + 1)``, treating positive logits as
    evidence. ``confidence``: one minus the largest softmax probability.
    A 1-D input gives a scalar.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    c = z.shape[1]
    if c < 2:
        raise DimensionError("uncertainty needs at least two classes")
    if variant == EVIDENTIAL:
        u = c / (np.maximum(z, 0.0) + 1.0).sum(axis=1)
    elif variant == CONFIDENCE:
        u = 1.0 - softmax(z).max(axis=1)
    else:
        raise ParameterError(f"unknown uncertainty variant {variant!r}")
    return float(u[0]) if single else u


def pseudo_label(model, unlabeled, variant=EVIDENTIAL):
    """Argmax pseudo-labels (ties to the lowest class) with their uncertainty."""
    x = np.asarray(unlabeled, dtype=np.float64)
    if x.shape[0] == 0:
        empty = np.zeros(0)
        return PseudoDataset(x.reshape(0, model.input_width), empty.astype(np.int64), empty)
    logits = model.forward(x, "eval")
    return PseudoDataset(x, np.argmax(logits, axis=1), uncertainty_score(logits, variant))


def select_confident(pd, delta):
    """Items with uncertainty <= delta, in their original order."""
    if not 0.0 <= delta <= 1.0:
        raise ParameterError(f"delta must lie in [0, 1], got {delta}")
    return pd.subset(np.flatnonzero(pd.uncertainty <= delta))


def fine_tune(model, selected, epochs, lr, batch_size, rng, momentum=0.0, bn_l1=0.0):
    """Train a copy of ``model`` with cross-entropy on the pseudo-labels.

    A set with fewer than two items cannot feed train-mode batch norm and
    leaves the model untouched. ``bn_l1`` adds the scale-sparsity penalty
    used before channel pruning.
    """
    model = model.copy()
    if len(selected) < 2 or epochs <= 0:
        return model
    for _ in range(epochs):
        for idx in minibatches(len(selected), batch_size, rng):
            spec = LossSpec(labels=selected.labels[idx], bn_l1=bn_l1)
            train_step(model, selected.features[idx], spec, lr, momentum)
    return model
