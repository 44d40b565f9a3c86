"""Central-difference verification of the hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm, Dropout, ReLU, cross_entropy


@dataclass
class GradCheckResult:
    max_rel_error: float
    errors: dict = field(default_factory=dict)  # param name -> max rel error
    n_checked: int = 0
    n_kink_skipped: int = 0
    # biases feeding train-mode BN: the true gradient is identically zero, so a
    # relative error is meaningless; we record max |analytic| and |numeric|.
    structural_zero: dict = field(default_factory=dict)

    def passed(self, tol=1e-4, zero_tol=1e-8):
        zeros_ok = all(max(a, n) <= zero_tol for a, n in self.structural_zero.values())
        return self.max_rel_error < tol and zeros_ok


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _relu_masks(network):
    return [layer._cache.copy() for layer in network.layers
            if isinstance(layer, ReLU) and layer._cache is not None]


def _same_masks(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _pre_bn_biases(network):
    names = set()
    layers = network.layers
    for layer, nxt in zip(layers, layers[1:]):
        # only a per-channel bias is cancelled exactly by the BN mean
        if (isinstance(nxt, BatchNorm) and "bias" in layer.params
                and layer.params["bias"].value.shape == (nxt.num_features,)):
            names.add(f"{layer.name}.bias")
    return names


def grad_check(network, x, y, h=1e-5, samples_per_tensor=12, seed=0, train=True,
               dropout=True, only=None):
    """Compare backprop gradients against central differences.

    The network must be in double precision. Dropout masks are drawn once
    and held fixed across all perturbations; BN running statistics are not
    touched. ``only`` restricts the check to parameters whose qualified name
    starts with one of the given prefixes (e.g. ``["conv1"]``).
    """
    if network.dtype != np.float64:
        raise TypeError("gradient checks require a float64 network")
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)

    bns = [layer for layer in network.layers if isinstance(layer, BatchNorm)]
    drops = [layer for layer in network.layers if isinstance(layer, Dropout)]
    saved_update = [bn.update_running for bn in bns]
    saved_drop = [(d.fixed_mask, d.enabled) for d in drops]
    try:
        for bn in bns:
            bn.update_running = False
        for d in drops:
            d.enabled = dropout
            d.fixed_mask = None
        if train and dropout and drops:
            _freeze_dropout_masks(network, x, drops)

        def loss_at():
            loss, _ = cross_entropy(network.forward(x, train=train), y)
            return loss

        network.zero_grad()
        loss, g = cross_entropy(network.forward(x, train=train), y)
        network.backward(g)
        analytic = {name: p.grad.copy() for name, p in network.named_params()}

        zero_names = _pre_bn_biases(network) if train else set()
        result = GradCheckResult(max_rel_error=0.0)
        for name, p in network.named_params():
            if only and not any(name.startswith(prefix) for prefix in only):
                continue
            flat = p.value.reshape(-1)
            k = min(samples_per_tensor, flat.size)
            idxs = rng.choice(flat.size, size=k, replace=False)
            worst = 0.0
            for i in idxs:
                numeric = _central_difference(network, flat, i, h, loss_at)
                a = analytic[name].reshape(-1)[i]
                if numeric is None:
                    result.n_kink_skipped += 1
                    continue
                result.n_checked += 1
                if name in zero_names:
                    prev = result.structural_zero.get(name, (0.0, 0.0))
                    result.structural_zero[name] = (max(prev[0], abs(a)), max(prev[1], abs(numeric)))
                    continue
                worst = max(worst, relative_error(a, numeric))
            if name not in zero_names:
                result.errors[name] = worst
                result.max_rel_error = max(result.max_rel_error, worst)
        return result
    finally:
        for bn, flag in zip(bns, saved_update):
            bn.update_running = flag
        for d, (mask, enabled) in zip(drops, saved_drop):
            d.fixed_mask, d.enabled = mask, enabled
        network.zero_grad()


def _central_difference(network, flat, i, h, loss_at, retries=2):
    """Central difference at ``flat[i]``; shrinks ``h`` when the step flips a
    ReLU mask and gives up (returns None) if that keeps happening."""
    orig = flat[i]
    step = h
    for _ in range(retries + 1):
        flat[i] = orig + step
        lp = loss_at()
        mp = _relu_masks(network)
        flat[i] = orig - step
        lm = loss_at()
        mm = _relu_masks(network)
        flat[i] = orig
        if _same_masks(mp, mm):
            return (lp - lm) / (2 * step)
        step /= 10
    return None


def _freeze_dropout_masks(network, x, drops):
    # one throwaway train pass records the input shape reaching each dropout
    shapes = {}
    for d in drops:
        d.enabled = False
    out = x
    for layer in network.layers:
        if isinstance(layer, Dropout):
            shapes[id(layer)] = out.shape
        out = layer.forward(out, train=True)
    for d in drops:
        d.enabled = True
        d.fixed_mask = d.rng.random(shapes[id(d)]) >= d.p
