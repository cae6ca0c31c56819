"""Structured and unstructured pruning against a shared reference architecture.

Two mask spaces exist, one per variant:

* ``channel``: one bit per batch-norm unit of the reference network
  (network-slimming style channel pruning; shapes genuinely shrink).
* ``weight``: one bit per dense weight of the reference network
  (per-layer magnitude pruning; shapes stay, pruned weights are frozen at 0).

A bit is 1 when the unit/weight is retained.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DescriptorError, DimensionError, ParameterError, PruningFloorError
from .nn import BatchNorm, Dense, Network, ReLU

CHANNEL = "channel"
WEIGHT = "weight"


class ArchDescriptor:
    """Per-layer retained reference indices of a (possibly pruned) network.

    For ``channel`` descriptors the layers are the batch-norm layers and
    indices are unit positions; for ``weight`` descriptors the layers are the
    dense layers and indices are flat weight positions.
    """

    def __init__(self, kind, retained, ref_sizes):
        if kind not in (CHANNEL, WEIGHT):
            raise DescriptorError(f"unknown descriptor kind {kind!r}")
        self.kind = kind
        self.retained = tuple(np.asarray(r, dtype=np.int64) for r in retained)
        self.ref_sizes = tuple(int(s) for s in ref_sizes)
        if len(self.retained) != len(self.ref_sizes):
            raise DescriptorError("retained lists and reference sizes differ in length")

    @classmethod
    def full(cls, net, kind=CHANNEL):
        sizes = _unit_sizes(net, kind)
        return cls(kind, [np.arange(s) for s in sizes], sizes)

    @property
    def reference_total(self):
        return sum(self.ref_sizes)

    @property
    def retained_counts(self):
        return [len(r) for r in self.retained]

    def __eq__(self, other):
        return (isinstance(other, ArchDescriptor) and self.kind == other.kind
                and self.ref_sizes == other.ref_sizes
                and all(np.array_equal(a, b) for a, b in zip(self.retained, other.retained)))

    def __repr__(self):
        return f"ArchDescriptor({self.kind}, retained={self.retained_counts}, ref={list(self.ref_sizes)})"


class PruneMask:
    def __init__(self, bits):
        self.bits = np.asarray(bits, dtype=np.uint8)

    @property
    def retained_count(self):
        return int(self.bits.sum())

    def __len__(self):
        return len(self.bits)

    def __eq__(self, other):
        return isinstance(other, PruneMask) and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"PruneMask({self.retained_count}/{len(self.bits)})"


def _bn_positions(net):
    return [i for i, layer in enumerate(net.layers) if isinstance(layer, BatchNorm)]


def _dense_positions(net):
    return [i for i, layer in enumerate(net.layers) if isinstance(layer, Dense)]


def _unit_sizes(net, kind):
    if kind == CHANNEL:
        return [net.layers[i].width for i in _bn_positions(net)]
    return [net.layers[i].weights.size for i in _dense_positions(net)]


def descriptor_of(net, kind=CHANNEL):
    if net.descriptor is not None:
        if net.descriptor.kind != kind:
            raise DescriptorError(f"network carries a {net.descriptor.kind} descriptor, not {kind}")
        return net.descriptor
    return ArchDescriptor.full(net, kind)


def extract_mask(descriptor, reference_total=None):
    """Bit vector with a 1 at every retained reference index."""
    total = descriptor.reference_total if reference_total is None else int(reference_total)
    if total != descriptor.reference_total:
        raise DescriptorError(f"reference total {total} != descriptor total {descriptor.reference_total}")
    bits = np.zeros(total, dtype=np.uint8)
    offset = 0
    for layer, (idx, size) in enumerate(zip(descriptor.retained, descriptor.ref_sizes)):
        if idx.size and (idx.min() < 0 or idx.max() >= size):
            raise DescriptorError(f"layer {layer}: index out of range [0, {size})")
        if np.unique(idx).size != idx.size:
            raise DescriptorError(f"layer {layer}: duplicate retained index")
        bits[offset + idx] = 1
        offset += size
    return PruneMask(bits)


def mask_of(net, kind=CHANNEL):
    return extract_mask(descriptor_of(net, kind))


def param_count(net):
    """Dense weights and biases transferred with the model; frozen-zero weights excluded.

    Batch-norm scale/shift are not included (see :func:`bn_param_count`), so a
    4->8->2 network counts 58 parameters whether or not it carries batch norm.
    """
    total = 0
    for layer in net.layers:
        if isinstance(layer, Dense):
            total += int(layer.live.sum()) if layer.live is not None else layer.weights.size
            total += layer.biases.size
    return total


def bn_param_count(net):
    return sum(layer.scale.size + layer.shift.size for layer in net.layers if isinstance(layer, BatchNorm))


def _check_gamma(gamma):
    if not 0.0 <= gamma < 1.0:
        raise ParameterError(f"gamma must lie in [0, 1), got {gamma}")


def _n_remove(gamma, units):
    # tolerance guards against products like 0.29 * 100 = 28.999999999999996
    return math.floor(gamma * units + 1e-9)


def _next_dense(net, pos):
    for j in range(pos + 1, len(net.layers)):
        if isinstance(net.layers[j], Dense):
            return j
        if not isinstance(net.layers[j], ReLU):
            break
    raise DimensionError(f"batchnorm at layer {pos} is not followed by a dense layer")


def _select_units(net, keep):
    """Copy of ``net`` keeping local units ``keep[l]`` of its l-th batch-norm layer."""
    layers = [_clone_layer(layer) for layer in net.layers]
    for pos, k in zip(_bn_positions(net), keep):
        k = np.asarray(k, dtype=np.int64)
        prev = layers[pos - 1]
        layers[pos - 1] = Dense(prev.weights[:, k], prev.biases[k],
                                None if prev.live is None else prev.live[:, k])
        bn = layers[pos]
        layers[pos] = BatchNorm(len(k), bn.scale[k], bn.shift[k], bn.running_mean[k],
                                bn.running_var[k], bn.momentum, bn.eps)
        nxt = layers[_next_dense(net, pos)]
        layers[_next_dense(net, pos)] = Dense(nxt.weights[k, :], nxt.biases,
                                              None if nxt.live is None else nxt.live[k, :])
    return Network(layers)


def _clone_layer(layer):
    if isinstance(layer, Dense):
        return Dense(layer.weights.copy(), layer.biases.copy(),
                     None if layer.live is None else layer.live.copy())
    if isinstance(layer, BatchNorm):
        return BatchNorm(layer.width, layer.scale.copy(), layer.shift.copy(),
                         layer.running_mean.copy(), layer.running_var.copy(),
                         layer.momentum, layer.eps)
    return ReLU()


def channel_prune(net, gamma, reference=None):
    """Remove the ``floor(gamma * U)`` batch-norm units with the smallest |scale|.

    Ranking is global across batch-norm layers; ties go to the lower unit
    index. Returns ``(pruned_net, mask, descriptor)`` with the mask in
    reference coordinates.
    """
    _check_gamma(gamma)
    positions = _bn_positions(net)
    if not positions:
        raise DimensionError("channel pruning needs at least one batchnorm layer")
    reference = descriptor_of(net, CHANNEL) if reference is None else reference
    if reference.kind != CHANNEL or reference.retained_counts != [net.layers[p].width for p in positions]:
        raise DescriptorError("reference descriptor does not match the network's batchnorm widths")

    scores = np.concatenate([np.abs(net.layers[p].scale) for p in positions])
    owner = np.concatenate([np.full(net.layers[p].width, li) for li, p in enumerate(positions)])
    local = np.concatenate([np.arange(net.layers[p].width) for p in positions])
    drop = np.argsort(scores, kind="stable")[:_n_remove(gamma, scores.size)]
    removed = np.zeros(scores.size, dtype=bool)
    removed[drop] = True

    keep = []
    for li, pos in enumerate(positions):
        k = local[(owner == li) & ~removed]
        if k.size == 0:
            raise PruningFloorError(f"batchnorm #{li} (network layer {pos})")
        keep.append(k)
    pruned = _select_units(net, keep)
    descriptor = ArchDescriptor(CHANNEL, [r[k] for r, k in zip(reference.retained, keep)],
                                reference.ref_sizes)
    pruned.descriptor = descriptor
    return pruned, extract_mask(descriptor), descriptor


def magnitude_prune(net, gamma):
    """Per dense layer, freeze the ``floor(gamma * n_live)`` smallest-|w| live weights at zero.

    Returns ``(pruned_net, mask)``; shapes are unchanged.
    """
    _check_gamma(gamma)
    reference = descriptor_of(net, WEIGHT)
    pruned = net.copy()
    pruned._velocity = None
    retained = []
    for li, pos in enumerate(_dense_positions(pruned)):
        layer = pruned.layers[pos]
        live = np.ones(layer.weights.shape, dtype=bool) if layer.live is None else layer.live.copy()
        live_idx = np.flatnonzero(live.ravel())
        mags = np.abs(layer.weights.ravel()[live_idx])
        drop = live_idx[np.argsort(mags, kind="stable")[:_n_remove(gamma, live_idx.size)]]
        live.ravel()[drop] = False
        layer.live = live
        layer.weights[~live] = 0.0
        retained.append(np.flatnonzero(live.ravel()))
    descriptor = ArchDescriptor(WEIGHT, retained, reference.ref_sizes)
    pruned.descriptor = descriptor
    return pruned, extract_mask(descriptor)


def _unit_index_maps(descriptor, template):
    """Reference indices of every dense layer's inputs and outputs."""
    bn_pos = _bn_positions(template)
    retained_by_bn = dict(zip(bn_pos, descriptor.retained))
    maps = []
    current = np.arange(template.input_width)
    for i, layer in enumerate(template.layers):
        if isinstance(layer, Dense):
            nxt = i + 1 if i + 1 < len(template.layers) else None
            if nxt is not None and isinstance(template.layers[nxt], BatchNorm):
                out = retained_by_bn[nxt]
            else:
                out = np.arange(layer.out_width)
            maps.append((current, out))
            current = out
    return maps


def _check_against(descriptor, template):
    if descriptor.kind == CHANNEL:
        sizes = _unit_sizes(template, CHANNEL)
    else:
        sizes = _unit_sizes(template, WEIGHT)
    if list(descriptor.ref_sizes) != sizes:
        raise DescriptorError(f"descriptor reference sizes {list(descriptor.ref_sizes)} != template {sizes}")
    extract_mask(descriptor)


def zero_fill_embed(net, reference_arch, descriptor=None):
    """Full reference-shape copy of ``net``; pruned positions hold zeros.

    Embedded pruned batch-norm units get scale/shift/running_mean 0 and
    running_var 1 so the statistics stay valid.
    """
    descriptor = net.descriptor if descriptor is None else descriptor
    if descriptor is None:
        out = net.copy()
        out._velocity = None
        return out
    _check_against(descriptor, reference_arch)
    if descriptor.kind == WEIGHT:
        out = net.copy()
        out._velocity = None
        out.descriptor = None
        for layer in out.layers:
            if isinstance(layer, Dense):
                layer.live = None
        return out

    counts = dict(zip(_bn_positions(reference_arch), descriptor.retained_counts))
    if [net.layers[p].width for p in _bn_positions(net)] != descriptor.retained_counts:
        raise DescriptorError("descriptor widths do not match the network")
    maps = iter(_unit_index_maps(descriptor, reference_arch))
    layers = []
    for i, (ref_layer, layer) in enumerate(zip(reference_arch.layers, net.layers)):
        if isinstance(ref_layer, Dense):
            rows, cols = next(maps)
            w = np.zeros_like(ref_layer.weights)
            b = np.zeros_like(ref_layer.biases)
            w[np.ix_(rows, cols)] = layer.weights
            b[cols] = layer.biases
            layers.append(Dense(w, b))
        elif isinstance(ref_layer, BatchNorm):
            k = descriptor.retained[list(counts).index(i)]
            full = {name: np.zeros(ref_layer.width) for name in ("scale", "shift", "running_mean")}
            full["running_var"] = np.ones(ref_layer.width)
            for name in full:
                full[name][k] = getattr(layer, name)
            layers.append(BatchNorm(ref_layer.width, full["scale"], full["shift"],
                                    full["running_mean"], full["running_var"],
                                    layer.momentum, layer.eps))
        else:
            layers.append(ReLU())
    return Network(layers)


def restrict(full_net, descriptor):
    """Inverse of :func:`zero_fill_embed`: cut a reference-shape net down to ``descriptor``."""
    _check_against(descriptor, full_net)
    if descriptor.kind == CHANNEL:
        out = _select_units(full_net, descriptor.retained)
    else:
        out = full_net.copy()
        out._velocity = None
        for pos, idx in zip(_dense_positions(out), descriptor.retained):
            layer = out.layers[pos]
            live = np.zeros(layer.weights.size, dtype=bool)
            live[idx] = True
            layer.live = live.reshape(layer.weights.shape)
            layer.weights[~layer.live] = 0.0
    out.descriptor = descriptor
    return out
