"""Central finite-difference verification of the hand-written backward passes.

Routing masks are frozen before probing so the check sees the smooth
function the backward pass differentiates. A probe whose +/-h evaluations
flip any relu or |.| sign is straddling a kink; it is redrawn rather than
scored, since neither one-sided slope is "the" derivative there.

With no sign flipped, ``L(+h) - L(-h)`` equals ``mean(sign * (pred+ - pred-))``
exactly; differencing predictions first avoids cancelling two O(1) losses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .train import l1_grad, l1_loss

STEP = 1e-5
TOLERANCE = 1e-4
# below this magnitude the relative error is measured against the floor instead;
# observed FD roundoff on the slope is ~1e-13 at h=1e-5, so this leaves a 10x margin
FLOOR = 1e-8

GROUPS = ("camg", "compact_heads", "focused_embed", "focused_heads", "navigators",
          "coefficients", "kernel_bias", "dense_kernel", "bias_block", "unet_convs")


def param_group(name):
    parts = name.split(".")
    if "camg" in parts:
        return "camg"
    if {"f_ci", "f_co", "f_kk"} & set(parts):
        return "compact_heads"
    if {"fc1", "fc2"} & set(parts):
        return "focused_embed"
    if {"g_ci", "g_co", "g_kk"} & set(parts):
        return "focused_heads"
    if {"bias1", "bias2", "bias3"} & set(parts):
        return "bias_block"
    if {"kernel0", "kernel1"} & set(parts):
        leaf = parts[-1]
        if leaf.startswith("nav"):
            return "navigators"
        if leaf.startswith("lam"):
            return "coefficients"
        return "kernel_bias" if leaf == "bias" else "dense_kernel"
    return "unet_convs"


@dataclass
class Probe:
    group: str
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_err(self):
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), FLOOR)


@dataclass
class GradcheckReport:
    probes: list
    redrawn: int
    tolerance: float = TOLERANCE

    @property
    def worst(self):
        return max((p.rel_err for p in self.probes), default=0.0)

    @property
    def passed(self):
        return all(p.rel_err < self.tolerance for p in self.probes)

    def by_group(self):
        out = {}
        for p in self.probes:
            out.setdefault(p.group, []).append(p)
        return out

    def lines(self):
        rows = []
        for group, probes in self.by_group().items():
            worst = max(p.rel_err for p in probes)
            live = sum(max(abs(p.analytic), abs(p.numeric)) >= FLOOR for p in probes)
            rows.append(f"{group:14s} probes={len(probes):3d} nonzero={live:3d} "
                        f"worst_rel={worst:.2e} {'PASS' if worst < self.tolerance else 'FAIL'}")
        return rows


class L1Objective:
    """Mean l1 loss of ``model.forward(*inputs)`` against ``target``."""

    def __init__(self, model, inputs, target):
        self.model, self.inputs, self.target = model, inputs, target

    def loss(self):
        pred = self.model.forward(*self.inputs)
        self._pred = pred
        return l1_loss(pred, self.target)

    def difference(self, pred_plus, pred_minus, sign):
        """``L(+h) - L(-h)`` given unchanged residual signs."""
        return float(np.sum(sign * (pred_plus - pred_minus)) / sign.size)

    def signature(self):
        bits = [np.sign(self._pred - self.target)]
        for m in self.model.modules():
            hook = getattr(m, "kink_inputs", None)
            if hook is not None:
                bits += [a > 0 for a in hook()]
        return np.concatenate([np.ravel(b) for b in bits])

    def gradients(self):
        self.loss()
        self.model.zero_grad()
        self.model.backward(l1_grad(self._pred, self.target))
        return {name: p.grad.copy() for name, p in self.model.parameters().items()}


def freeze(model):
    for m in model.modules():
        if hasattr(m, "freeze") and getattr(m, "last_mask", None) is not None:
            m.freeze()


def unfreeze(model):
    for m in model.modules():
        if hasattr(m, "unfreeze"):
            m.unfreeze()


def gradcheck(objective, per_group=20, seed=0, step=STEP, tolerance=TOLERANCE,
              groups=None, total=None, max_redraws=200):
    """Probe random scalar parameters and compare analytic vs central-difference slopes.

    ``per_group`` probes are drawn from each parameter group present (or
    ``total`` probes spread round-robin across groups when given).
    """
    model = objective.model
    rng = np.random.default_rng(seed)
    objective.loss()
    freeze(model)
    try:
        grads = objective.gradients()
        base_sig = objective.signature()
        sign = np.sign(objective._pred - objective.target)
        params = model.parameters()
        pool = {}
        for name, p in params.items():
            g = param_group(name)
            if groups is None or g in groups:
                pool.setdefault(g, []).append(name)
        order = sorted(pool, key=GROUPS.index)
        if total is None:
            plan = [g for g in order for _ in range(per_group)]
        else:
            plan = [order[i % len(order)] for i in range(total)]

        probes, redrawn = [], 0
        for group in plan:
            for _ in range(max_redraws):
                names = pool[group]
                sizes = np.array([params[n].value.size for n in names])
                name = names[rng.choice(len(names), p=sizes / sizes.sum())]
                p = params[name]
                flat = int(rng.integers(p.value.size))
                idx = np.unravel_index(flat, p.value.shape)
                orig = p.value[idx]
                p.value[idx] = orig + step
                objective.loss()
                pred_p, sig_p = objective._pred, objective.signature()
                p.value[idx] = orig - step
                objective.loss()
                pred_m, sig_m = objective._pred, objective.signature()
                p.value[idx] = orig
                if np.array_equal(sig_p, base_sig) and np.array_equal(sig_m, base_sig):
                    probes.append(Probe(group, name, tuple(int(i) for i in idx),
                                        float(grads[name][idx]),
                                        objective.difference(pred_p, pred_m, sign) / (2 * step)))
                    break
                redrawn += 1
            else:
                raise RuntimeError(f"could not find a kink-free probe in group {group}")
        objective.loss()
    finally:
        unfreeze(model)
    return GradcheckReport(probes, redrawn, tolerance)
