"""Acceptance suite: one PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py`` (the lines are repeated in the
terminal summary) or ``python tests/test_acceptance.py``.
"""
import functools
import sys
import time

import numpy as np
import pytest

import oracles
from bimac.camg import CAMG, hard_mask, soft_mask
from bimac.data import make_dataset, stack
from bimac.flops import flops_analytic, flops_instrumented, random_route, reference_context
from bimac.gradcheck import FLOOR, L1Objective, gradcheck
from bimac.lowrank import LowRankKernel, expand_component, param_count
from bimac.mabic import BiMACLayer
from bimac.metrics import ergas, q2n, sam
from bimac.net import ABLATIONS, Bi2MANet, NetConfig, build_variant, net_forward, upsample_bicubic
from bimac.region import hf_ratio, power_spectrum, radial_bins, radial_power_spectrum, svd_spectrum
from bimac.data import synth_scene
from bimac.train import TrainConfig, baseline_scores, dataset_l1, train, validation_scores

LINES = {}


def criterion(num, title):
    """Record a PASS/FAIL line for the wrapped test; the test returns a detail string."""
    def deco(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                LINES[num] = f"FAIL  {num:2d}. {title}: {type(exc).__name__}: {str(exc).splitlines()[0][:160]}"
                print(LINES[num])
                raise
            LINES[num] = f"PASS  {num:2d}. {title}: {detail} [{time.perf_counter() - t0:.1f}s]"
            print(LINES[num])
        return run
    return deco


@criterion(1, "branch-oracle equivalence")
def test_c1_branch_oracles():
    t0 = time.perf_counter()
    worst0 = worst1 = 0.0
    n_focused = 0
    for seed in range(100):
        rng = np.random.default_rng([1, seed])
        layer = BiMACLayer(4, 8, 3, rng=rng)
        x = rng.normal(size=(4, 8, 8))
        hm = rng.random((8, 8)) < rng.uniform(0.05, 0.6)
        e0, e1 = oracles.branch_errors(layer, x, hm)
        worst0, worst1 = max(worst0, e0), max(worst1, e1)
        n_focused += int(hm.sum())
    elapsed = time.perf_counter() - t0
    assert worst0 < 1e-10 and worst1 < 1e-10, (worst0, worst1)
    assert elapsed < 10, elapsed
    return f"compact max|d|={worst0:.1e}, focused max|d|={worst1:.1e} over {n_focused} focused px"


REQUIRED_GROUPS = {"camg", "compact_heads", "focused_embed", "focused_heads", "navigators",
                   "coefficients", "kernel_bias", "bias_block", "unet_convs"}


@criterion(2, "gradient verification")
def test_c2_gradcheck():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    net = build_variant(NetConfig(bands=4, base_channels=4, depth=2, alpha=0.5), seed=2, zero_head=False)
    pan, lrms = rng.random((1, 1, 16, 16)), rng.random((1, 4, 4, 4))
    rep = gradcheck(L1Objective(net, (pan, lrms), rng.random((1, 4, 16, 16))), per_group=20, seed=3)
    elapsed = time.perf_counter() - t0
    groups = rep.by_group()
    assert set(groups) == REQUIRED_GROUPS, sorted(groups)
    assert all(len(v) >= 20 for v in groups.values())
    live = {g: sum(max(abs(p.analytic), abs(p.numeric)) >= FLOOR for p in ps) for g, ps in groups.items()}
    assert all(n > 0 for n in live.values()), live
    assert rep.passed, rep.lines()
    assert elapsed < 120, elapsed
    return (f"{len(rep.probes)} probes in {len(groups)} groups, worst rel {rep.worst:.1e}, "
            f"live {min(live.values())}-{max(live.values())}/group")


def _sort_oracle(flat, t):
    order = np.argsort(flat, kind="stable")
    k = flat.size - np.searchsorted(flat[order], t, side="right")
    sel = np.zeros(flat.size, bool)
    sel[order[flat.size - k:]] = True
    return sel


@criterion(3, "mask invariants")
def test_c3_mask_invariants():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        c, h, w = rng.integers(1, 5), rng.integers(3, 10), rng.integers(3, 10)
        sm = soft_mask(rng.normal(size=(c, h, w)), CAMG(c, rng=rng))
        assert np.all((sm > 0) & (sm < 1))
        a1, a2 = np.sort(rng.uniform(-2.5, 2.5, 2))
        sm_f, mu, sigma, t, hm = hard_mask(sm, a2)
        assert t == mu + a2 * sigma
        np.testing.assert_array_equal(hm.ravel(), _sort_oracle(sm_f.ravel(), t))
        assert not np.any(hm & ~hard_mask(sm, a1)[4])
    x = np.random.default_rng(4).exponential(size=100_000)
    gaps = []
    for alpha in (0.5, 1.0, 2.0):
        _, mu, sigma, t, hm = hard_mask(x.reshape(1, 1, -1), alpha)
        gaps.append(abs(hm.mean() - np.exp(-t)))
    assert max(gaps) <= 0.01, gaps
    return f"1000 masks ok; exponential tail |emp - exp(-T)| <= {max(gaps):.4f}"


@criterion(4, "low-rank structure")
def test_c4_lowrank():
    k = LowRankKernel(5, 7, 3, np.random.default_rng(4))
    for lam, nav in ((k.lam1.value, k.nav1.value), (k.lam2.value, k.nav2.value)):
        w = expand_component(lam, nav)
        for o, i in np.ndindex(7, 5):
            assert np.array_equal(w[o, i], lam[o, i, 0, 0] * nav[0, i])
    counts = param_count(32, 32, 3)
    assert counts == (2656, 9248), counts
    return f"slices exact, param_count(32,32,3)={counts}, {counts[1] / counts[0]:.2f}x"


@criterion(5, "FLOPs triage")
def test_c5_flops():
    rng = np.random.default_rng(5)
    gaps = []
    for i in range(3):
        c_in, c_out, h = int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(6, 17))
        layer = BiMACLayer(c_in, c_out, 3, rng=rng)
        meas = flops_instrumented(layer, (rng.normal(size=(1, c_in, h, h)),),
                                  hm=random_route(h, h, float(rng.uniform(0.05, 0.5)), i))
        ana = flops_analytic(c_in, c_out, 3, h, h, meas.f)
        gaps.append(abs(meas.total - ana.total) / ana.total)
    totals = [flops_analytic(32, 32, 3, 64, 64, f).total for f in np.round(np.arange(11) * 0.1, 1)]
    assert max(gaps) < 0.01, gaps
    assert all(b >= a for a, b in zip(totals, totals[1:]))
    ctx = reference_context()
    print(ctx.text())
    assert "152.91M" in ctx.text()
    return f"instrumented vs analytic max gap {max(gaps):.1e}; monotone in f; ours {ctx.total / 1e6:.2f}M vs 152.91M (context)"


def _desk_run():
    tr = make_dataset(64, 4, 32, 32, seed=0)
    va = make_dataset(16, 4, 32, 32, seed=1)
    net = build_variant(NetConfig(bands=4, base_channels=16, depth=2), seed=0)
    l1_0 = dataset_l1(net, tr)
    res = train(net, tr, TrainConfig(lr0=2e-3, batch=8, epochs=10_000, max_iters=300, seed=0))
    state = {k: v.tobytes() for k, v in net.state_dict().items()}
    return tr, va, net, l1_0, res, state


@pytest.mark.slow
@criterion(6, "desk-scale training")
def test_c6_desk_training():
    t0 = time.perf_counter()
    tr, va, net, l1_0, res, state = _desk_run()
    first = time.perf_counter() - t0
    l1_1 = dataset_l1(net, tr)
    s_net, e_net = validation_scores(net, va)
    s_bic, e_bic = baseline_scores(va)
    *_, res_b, state_b = _desk_run()
    assert res.iters == 300
    assert l1_1 <= 0.5 * l1_0, (l1_0, l1_1)
    assert s_net < s_bic and e_net < e_bic, (s_net, s_bic, e_net, e_bic)
    assert res.iter_losses == res_b.iter_losses and state == state_b
    assert first < 600, first
    return (f"l1 {l1_0:.4f}->{l1_1:.4f} ({l1_1 / l1_0:.3f}x); SAM {s_net:.3f}<{s_bic:.3f}; "
            f"ERGAS {e_net:.3f}<{e_bic:.3f}; rerun bitwise; one run {first:.0f}s")


@criterion(7, "ablation harness")
def test_c7_ablations():
    data = make_dataset(8, 4, 16, 16, seed=7)
    _, pan, lrms = stack(data[:2])
    for ab in ABLATIONS:
        net = build_variant(NetConfig(bands=4, base_channels=4, depth=2, ablation=ab), seed=7)
        res = train(net, data, TrainConfig(lr0=2e-3, batch=4, epochs=1000, max_iters=50, seed=7))
        assert res.iters == 50 and np.all(np.isfinite(res.iter_losses))
        assert np.all(np.isfinite(net.forward(pan, lrms)))
        masks = net.masks()
        if ab == "no_focused":
            assert all(np.all(m.focused_fraction == 0) for _, _, m in masks)
        if ab == "no_compact":
            assert all(np.all(m.focused_fraction == 1) for _, _, m in masks)
        if ab == "no_camg":
            assert all(m.HM[n].sum() == round(0.15 * m.HM[n].size) for _, _, m in masks for n in range(2))
        if ab == "no_lrk":
            assert all(hasattr(layer.kernel0, "weight") for _, _, layer in net.bimac_layers())
        if ab == "shared_weights":
            for _, _, layer in net.bimac_layers():
                assert layer.kernel0 is layer.kernel1
                cell = layer.kernel0.nav1.value
                old = cell[0, 0, 0, 0]
                cell[0, 0, 0, 0] = old + 1.0
                assert layer.kernel1.nav1.value[0, 0, 0, 0] == old + 1.0
                cell[0, 0, 0, 0] = old
    return f"{len(ABLATIONS)} variants x 50 iters finite, structure holds"


@criterion(8, "metric fixed points")
def test_c8_metrics():
    rng = np.random.default_rng(8)
    for c in (4, 8):
        x = rng.random((c, 32, 32)) + 0.05
        assert sam(x, x) == 0.0 and ergas(x, x) == 0.0 and q2n(x, x) == 1.0
        y = rng.random((c, 32, 32)) + 0.05
        assert abs(sam(3.7 * x, y) - sam(x, y)) < 1e-9
    e = ergas(np.full((1, 16, 16), 1.1), np.ones((1, 16, 16)))
    assert abs(e - 2.5) < 1e-12, e
    return f"SAM=0, ERGAS=0, Q2n=1 exact; scale-invariant SAM; ERGAS case {e!r}"


@criterion(9, "region analysis")
def test_c9_region():
    rng = np.random.default_rng(9)
    s = svd_spectrum(np.outer(rng.normal(size=16), rng.normal(size=16)))
    assert s[1] / s[0] < 1e-10
    spec = radial_power_spectrum(np.full((16, 16), 0.4))
    assert spec[0] / spec.sum() > 1 - 1e-12
    r, counts = radial_bins(16)
    for q in (1, 3, 6):
        p = power_spectrum(np.cos(2 * np.pi * q * np.arange(16) / 16)[None, :].repeat(16, axis=0))
        assert p[r == q].sum() / p[r > 0].sum() > 0.99
    patch = rng.normal(size=(16, 16))
    parseval = abs((patch**2).sum() - (radial_power_spectrum(patch) * counts).sum() / 256) / (patch**2).sum()
    assert parseval < 1e-8

    def hf(n_shapes):
        return np.array([hf_ratio(synth_scene([99, i], 4, 16, 16, n_blobs=3, n_shapes=n_shapes).mean(axis=0))
                         for i in range(50)])

    blobs, rects = hf(0), hf(4)
    assert rects.mean() > blobs.mean()
    return (f"rank-1 s2/s1={s[1] / s[0]:.1e}; Parseval rel {parseval:.1e}; "
            f"hf blobs {blobs.mean():.4f} < rects {rects.mean():.4f}")


@criterion(10, "zero-parameter identity")
def test_c10_zero_identity():
    rng = np.random.default_rng(10)
    net = build_variant(NetConfig(bands=4, base_channels=8, depth=3), seed=10, zero_head=False)
    for p in net.parameters().values():
        p.value[...] = 0.0
    pan, lrms = rng.random((1, 32, 32)), rng.random((4, 8, 8))
    out = net_forward(pan, lrms, net)
    assert np.array_equal(out, upsample_bicubic(lrms))
    assert np.array_equal(net_forward(pan, lrms, Bi2MANet(NetConfig(bands=4, base_channels=8, depth=2))),
                          upsample_bicubic(lrms))
    return "output == bicubic(LRMS) bitwise"


if __name__ == "__main__":
    code = pytest.main([__file__, "-q"])
    print("\n".join(LINES[k] for k in sorted(LINES)))
    sys.exit(code)
