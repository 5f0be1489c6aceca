"""FLOP accounting for BiMAC layers: closed form and execution-counted.

Convention: one multiply-accumulate is two FLOPs (one multiply plus one
add); bias adds fold into the accumulation. Counts are per image.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import StateError
from .mabic import BiMACLayer, hidden_width
from .tensor import FlopTally

PARTS = ("camg", "compact_gap", "compact_heads", "compact_conv", "focused_embed",
         "focused_heads", "focused_conv", "bias_block", "lowrank_expand")
FOCUSED_PARTS = ("focused_embed", "focused_heads", "focused_conv")
CONVENTION = "1 MAC = 2 FLOPs (1 multiply + 1 add)"
# published figure for the core adaptive engines at C=32, H=W=64; context only
REFERENCE_FLOPS = 152.91e6


@dataclass
class FlopsReport:
    mul: dict
    add: dict
    f: float
    label: str = ""
    extra: dict = field(default_factory=dict)

    def flops(self, part):
        return self.mul.get(part, 0) + self.add.get(part, 0)

    @property
    def parts(self):
        return list(PARTS) + [p for p in self.mul if p not in PARTS]

    @property
    def total(self):
        return sum(self.flops(p) for p in self.parts)

    def focused_total(self):
        return sum(self.flops(p) for p in FOCUSED_PARTS)

    def text(self):
        lines = [f"# FLOPs report {self.label}".rstrip(),
                 f"# convention: {CONVENTION}",
                 f"# focused fraction f = {self.f:.4f}",
                 f"{'part':16s} {'mul':>14s} {'add':>14s} {'flops':>14s}"]
        for p in self.parts:
            lines.append(f"{p:16s} {self.mul.get(p, 0):14.0f} {self.add.get(p, 0):14.0f} {self.flops(p):14.0f}")
        lines.append(f"{'total':16s} {sum(self.mul.values()):14.0f} "
                     f"{sum(self.add.values()):14.0f} {self.total:14.0f}")
        for k, v in self.extra.items():
            lines.append(f"# {k}: {v}")
        return "\n".join(lines) + "\n"

    def csv(self):
        # analytic counts at fractional f*H*W pixels are expectations, not integers
        def num(v):
            return int(v) if float(v).is_integer() else round(float(v), 3)

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["part", "mul", "add", "flops"])
        for p in self.parts:
            w.writerow([p, num(self.mul.get(p, 0)), num(self.add.get(p, 0)), num(self.flops(p))])
        w.writerow(["total", num(sum(self.mul.values())), num(sum(self.add.values())), num(self.total)])
        return buf.getvalue()


def default_widths(c_in):
    return {"hidden": hidden_width(c_in), "bias_width": 8, "camg_k": 3, "kernel": "lowrank"}


def flops_analytic(c_in, c_out, k, h, w, f, widths=None):
    """Closed-form per-image counts for one BiMAC layer with focused fraction ``f``."""
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"f must lie in [0, 1], got {f}")
    wd = default_widths(c_in)
    wd.update(widths or {})
    r, bw, kc = wd["hidden"], wd["bias_width"], wd["camg_k"]
    C, O, K, N = c_in, c_out, k * k, h * w
    p1 = f * N
    p0 = N - p1
    mul, add = {}, {}

    def put(part, m, a):
        mul[part], add[part] = m, a

    conv = N * C * C * kc * kc
    put("camg", conv + N * C + 2 * N + 3, conv + N * C + 3 * N + 1)
    put("compact_gap", C, (p0 if p0 > 0 else N) * C)
    heads = C * (C + O + K)
    put("compact_heads", heads + O * C + 2 * O * C * K, heads)
    put("compact_conv", p0 * O * C * K, p0 * O * C * K)
    embed = p1 * (r * C + r * r)
    put("focused_embed", embed, embed)
    fh = p1 * r * (C + O + K)
    put("focused_heads", fh, fh)
    put("focused_conv", p1 * (2 * C * K + O * C * K + O), p1 * O * C * K)
    bias = N * 9 * (C * bw + bw * bw + bw * O)
    put("bias_block", bias, bias + N * O)
    n = O * C * K
    if wd["kernel"] == "lowrank":
        put("lowrank_expand", 2 * (2 * n), 2 * n)
    else:
        put("lowrank_expand", 0, 0)
    return FlopsReport(mul, add, f, label=f"analytic C_in={C} C_out={O} k={k} H={h} W={w}")


def mlp_cost_per_pixel(c_in, c_out, k, widths=None):
    """Focused embed + head FLOPs for one focused pixel."""
    wd = default_widths(c_in)
    wd.update(widths or {})
    r = wd["hidden"]
    return 2 * (r * c_in + r * r) + 2 * r * (c_in + c_out + k * k)


def flops_instrumented(model, inputs, counting=True, hm=None):
    """Run ``model.forward(*inputs)`` with an explicit tally and report what executed.

    ``hm`` pins the routing mask of a single :class:`BiMACLayer`.
    """
    if not counting:
        raise StateError("counting mode is disabled; nothing to report")
    tally = FlopTally()
    if isinstance(model, BiMACLayer):
        x = inputs[0]
        model.forward(x, hm=hm, tally=tally)
        n = x.shape[0]
        f = float(np.mean(model.last_mask.focused_fraction))
        layers = [model]
    else:
        model.forward(*inputs, tally=tally)
        n = inputs[0].shape[0]
        layers = [layer for _, _, layer in model.bimac_layers()]
        sizes = np.array([lay.last_mask.HM[0].size for lay in layers], dtype=float)
        fr = np.array([np.mean(lay.last_mask.focused_fraction) for lay in layers])
        f = float((fr * sizes).sum() / sizes.sum())
    mul = {p: tally.mul.get(p, 0) / n for p in PARTS}
    add = {p: tally.add.get(p, 0) / n for p in PARTS}
    for tag in tally.mul.keys() | tally.add.keys():
        if tag not in PARTS:
            mul[tag], add[tag] = tally.mul.get(tag, 0) / n, tally.add.get(tag, 0) / n
    return FlopsReport(mul, add, f, label=f"instrumented {type(model).__name__}",
                       extra={"bimac_layers": len(layers)})


def random_route(h, w, f, seed=0):
    """A ``(1, 1, h, w)`` hard mask with exactly ``round(f*h*w)`` focused pixels."""
    rng = np.random.default_rng(seed)
    n = h * w
    flat = np.zeros(n, dtype=bool)
    flat[rng.choice(n, size=int(round(f * n)), replace=False)] = True
    return flat.reshape(1, 1, h, w)


def reference_context(widths=None):
    """Our analytic count at the published setting, next to the published figure."""
    rep = flops_analytic(32, 32, 3, 64, 64, 0.15, widths)
    rep.extra["published reference (informational, not a gate)"] = f"{REFERENCE_FLOPS / 1e6:.2f}M"
    rep.extra["this implementation"] = f"{rep.total / 1e6:.2f}M"
    return rep
