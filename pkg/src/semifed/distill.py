"""Server-side knowledge transfer: teacher-guided initialisation,
mask-similarity helper weighting and collaborative distillation."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .nn import KLTerm, LossSpec, minibatches, train_step


def supervised_train(net, labeled, epochs, lr, batch_size, rng, momentum=0.0):
    """Plain cross-entropy training of a copy of ``net`` on a labeled set."""
    return _train(net, labeled, epochs, lr, batch_size, rng, momentum,
                  lambda x, y: LossSpec(labels=y))


def _train(net, labeled, epochs, lr, batch_size, rng, momentum, make_spec):
    net = net.copy()
    if labeled.size < 2:
        return net
    for _ in range(epochs):
        for idx in minibatches(labeled.size, batch_size, rng):
            x, y = labeled.features[idx], labeled.labels[idx]
            train_step(net, x, make_spec(x, y), lr, momentum)
    return net


def init_distill(student, teacher, labeled, epochs, lr, batch_size, temperature, rng,
                 kl_weight=1.0, ce_weight=1.0, momentum=0.0, reverse_kl=False):
    """Train a copy of the freshly initialised ``student`` with CE + KL(teacher || student).

    ``teacher=None`` (or ``kl_weight=0``) reduces to CE-only training.
    """
    if labeled.size == 0:
        raise DimensionError("init distillation needs a non-empty labeled set")
    if teacher is not None and teacher.num_classes != student.num_classes:
        raise DimensionError("teacher and student head widths differ")

    def spec(x, y):
        terms = []
        if teacher is not None and kl_weight:
            terms.append(KLTerm(teacher.forward(x, "eval"), kl_weight, "teacher"))
        return LossSpec(labels=y, ce_weight=ce_weight, kl_terms=terms,
                        temperature=temperature, reverse_kl=reverse_kl)

    return _train(student, labeled, epochs, lr, batch_size, rng, momentum, spec)


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    # one square root of the product keeps binary masks exact: sqrt(2)*sqrt(2) != 2
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


def helper_weights(leader_mask, helper_masks):
    """Normalised cosine similarity between the leader's mask and each helper's.

    Falls back to uniform weights when every similarity is zero or a helper
    mask is empty.
    """
    leader = np.asarray(getattr(leader_mask, "bits", leader_mask), dtype=np.float64)
    helpers = [np.asarray(getattr(m, "bits", m), dtype=np.float64) for m in helper_masks]
    if not helpers:
        return np.zeros(0)
    if any(h.shape != leader.shape for h in helpers):
        raise DimensionError("all masks must have the same length")
    if not leader.any():
        raise DimensionError("leader mask retains nothing")
    if any(not h.any() for h in helpers):
        return np.full(len(helpers), 1.0 / len(helpers))
    raw = np.array([cosine(leader, h) for h in helpers])
    if raw.sum() <= 0:
        return np.full(len(helpers), 1.0 / len(helpers))
    return raw / raw.sum()


def weighted_avg_logits(helper_logits, beta):
    beta = np.asarray(beta, dtype=np.float64)
    if len(helper_logits) != beta.shape[0]:
        raise DimensionError(f"{len(helper_logits)} helper logits for {beta.shape[0]} weights")
    stacked = np.stack([np.asarray(h, dtype=np.float64) for h in helper_logits])
    return np.tensordot(beta, stacked, axes=1)


def collaborative_loss_spec(x, y, helpers, beta, teacher, temperature=1.0, ce_weight=1.0,
                            helper_weight=1.0, teacher_weight=1.0, reverse_kl=False):
    """Loss for one server batch: CE + KL(helper ensemble || student) + KL(teacher || student).

    Helpers and teacher run in eval mode; an empty helper list or a missing
    teacher drops the corresponding term.
    """
    terms = []
    if helpers:
        avg = weighted_avg_logits([h.forward(x, "eval") for h in helpers], beta)
        terms.append(KLTerm(avg, helper_weight, "helpers"))
    if teacher is not None:
        terms.append(KLTerm(teacher.forward(x, "eval"), teacher_weight, "teacher"))
    return LossSpec(labels=y, ce_weight=ce_weight, kl_terms=terms,
                    temperature=temperature, reverse_kl=reverse_kl)


def collaborative_distill(leader, helpers, beta, teacher, labeled, epochs, lr, batch_size,
                          temperature, rng, ce_weight=1.0, helper_weight=1.0,
                          teacher_weight=1.0, reverse_kl=False, momentum=0.0):
    """Personalised server model for one client, keeping the leader's architecture.

    The student starts as a copy of ``leader`` and is trained on the labeled
    server set against the labels, the beta-weighted helper logits and the
    teacher's logits, all computed on the same mini-batch.
    """
    c = leader.num_classes
    if any(h.num_classes != c for h in helpers) or (teacher is not None and teacher.num_classes != c):
        raise DimensionError("all networks must share the head width")

    def spec(x, y):
        return collaborative_loss_spec(x, y, helpers, beta, teacher, temperature, ce_weight,
                                       helper_weight, teacher_weight, reverse_kl)

    student = _train(leader, labeled, epochs, lr, batch_size, rng, momentum, spec)
    student.descriptor = leader.descriptor
    return student
