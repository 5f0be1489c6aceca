"""Command-line entry point: ``bimac <command> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure,
5 gradient check failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .data import load_dataset, make_dataset, save_dataset, stack
from .errors import ConfigError, DataError, DimensionError, MetricError, NonFiniteError
from .fileio import read_pgm, read_tensor, write_pgm
from .flops import flops_analytic, reference_context
from .gradcheck import L1Objective, gradcheck
from .metrics import evaluate
from .net import build_variant, load_checkpoint, save_checkpoint, upsample_bicubic
from .region import analyze_image
from .train import predict, train

log = logging.getLogger("bimac")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5


def _load_config(args):
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    return cfg


def _out_dir(cfg):
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _datasets(cfg):
    """``(train, val)`` sample lists from ``data.dir`` or freshly synthesized."""
    n_val = cfg["data.val_count"]
    if cfg["data.dir"]:
        samples = load_dataset(cfg["data.dir"])
        if n_val >= len(samples):
            raise DataError(f"data.val_count={n_val} leaves no training samples out of {len(samples)}")
        return samples[:len(samples) - n_val], samples[len(samples) - n_val:]
    seed, c = cfg["train.seed"], cfg["net.bands"]
    kw = dict(blur_sigma=cfg["data.blur_sigma"], pan_weights=cfg.pan_weights())
    tr = make_dataset(cfg["data.count"], c, cfg["data.h"], cfg["data.w"], seed=seed, **kw)
    va = make_dataset(n_val, c, cfg["data.h"], cfg["data.w"], seed=seed + 1, **kw)
    return tr, va


def _net(cfg, checkpoint=None):
    net = build_variant(cfg.net(), cfg["train.seed"])
    if checkpoint:
        if not Path(checkpoint).exists():
            raise DataError(f"checkpoint {checkpoint} not found")
        load_checkpoint(net, checkpoint)
    return net


# -- commands ------------------------------------------------------------------

def cmd_train(args):
    cfg = _load_config(args)
    net = _net(cfg)
    tr, va = _datasets(cfg)
    out = _out_dir(cfg)
    (out / "config.txt").write_text(cfg.dump())
    res = train(net, tr, cfg.train(), val=va, out_dir=out)
    print(f"trained {res.iters} steps; artifacts in {out}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args)
    net = _net(cfg, args.checkpoint)
    samples = load_dataset(args.data) if args.data else _datasets(cfg)[1]
    if not samples:
        raise DataError("no samples to evaluate")
    preds = predict(net, samples)
    out = _out_dir(cfg)
    rows = [("index", "model", "sam", "ergas", "q2n")]
    for i, (p, s) in enumerate(zip(preds, samples)):
        rows.append((i, "net", *evaluate(p, s.gt)))
        if args.baseline:
            rows.append((i, "bicubic", *evaluate(upsample_bicubic(s.lrms), s.gt)))
    with open(out / "eval.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerows(rows)
    return EXIT_OK


def cmd_mask_dump(args):
    cfg = _load_config(args)
    net = _net(cfg, args.checkpoint)
    if args.input:
        samples = load_dataset(args.input)
    else:
        samples = _datasets(cfg)[1]
    if not 0 <= args.index < len(samples):
        raise DataError(f"sample index {args.index} out of range ({len(samples)} samples)")
    _, pan, lrms = stack(samples[args.index:args.index + 1])
    net.forward(pan, lrms)
    out = _out_dir(cfg) / "masks"
    out.mkdir(exist_ok=True)
    written = 0
    for name, scale, mask in net.masks():
        if args.layer not in ("all", name) or (args.scale and scale != args.scale):
            continue
        stem = f"{name}_s{scale}"
        write_pgm(out / f"{stem}_smf.pgm", mask.SM_F[0, 0] if mask.SM_F is not None else mask.HM[0, 0], 0.0, 1.0)
        write_pgm(out / f"{stem}_hm.pgm", mask.HM[0, 0].astype(float), 0.0, 1.0)
        print(f"{stem}: focused fraction {float(mask.focused_fraction[0]):.4f}")
        written += 1
    if not written:
        raise ConfigError(f"no BiMAC layer matches layer={args.layer!r} scale={args.scale}")
    return EXIT_OK


def cmd_flops(args):
    cfg = _load_config(args)
    c = cfg["net.base_channels"]
    rep = flops_analytic(c, c, cfg["net.k"], cfg["data.h"], cfg["data.w"], args.f)
    out = _out_dir(cfg)
    (out / "flops.csv").write_text(rep.csv())
    (out / "flops.txt").write_text(rep.text())
    sys.stdout.write(rep.text())
    if args.reference:
        sys.stdout.write(reference_context().text())
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _load_config(args)
    net = build_variant(cfg.net(), cfg["train.seed"], zero_head=False)
    rng = np.random.default_rng(cfg["train.seed"])
    h, w, c = cfg["data.h"], cfg["data.w"], cfg["net.bands"]
    pan = rng.random((1, 1, h, w))
    lrms = rng.random((1, c, h // 4, w // 4))
    gt = rng.random((1, c, h, w))
    rep = gradcheck(L1Objective(net, (pan, lrms), gt), total=args.probes, seed=cfg["train.seed"])
    for line in rep.lines():
        print(line)
    print(f"probes={len(rep.probes)} redrawn={rep.redrawn} worst_rel={rep.worst:.2e} "
          f"{'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_GRADCHECK


def cmd_analyze(args):
    path = Path(args.input)
    if not path.exists():
        raise DataError(f"input {path} not found")
    img = read_pgm(path) if path.suffix.lower() == ".pgm" else read_tensor(path)
    if img.ndim == 3 and args.band >= 0:
        img = img[args.band]
    rows = analyze_image(img, args.patch, args.rank_thresh, args.hf_thresh)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["patch", "row", "col"] + [f"s{i}" for i in range(1, 9)] + ["eff_rank", "hf_ratio", "class"])
    for pid, ((i, j), prof, label) in enumerate(rows):
        s = list(prof.singular[:8]) + [float("nan")] * max(0, 8 - len(prof.singular))
        w.writerow([pid, i, j] + [f"{v:.6g}" for v in s] + [prof.eff_rank, f"{prof.hf_ratio:.6g}", label])
    if args.class_map:
        plane = img if img.ndim == 2 else img.mean(axis=0)
        cmap = np.zeros(plane.shape)
        for (i, j), _, label in rows:
            cmap[i:i + args.patch, j:j + args.patch] = 1.0 if label == "complex" else 0.5
        write_pgm(args.class_map, cmap, 0.0, 1.0)
    return EXIT_OK


def cmd_synth(args):
    cfg = _load_config(args)
    target = Path(cfg["data.dir"] or Path(cfg["out.dir"]) / "data")
    kw = dict(blur_sigma=cfg["data.blur_sigma"], pan_weights=cfg.pan_weights())
    samples = make_dataset(cfg["data.count"] + cfg["data.val_count"], cfg["net.bands"],
                           cfg["data.h"], cfg["data.w"], seed=cfg["train.seed"], **kw)
    save_dataset(samples, target)
    print(f"wrote {len(samples)} samples to {target}")
    return EXIT_OK


def cmd_config(args):
    sys.stdout.write(_load_config(args).dump())
    return EXIT_OK


def cmd_init(args):
    """Write a fresh checkpoint of the initial network (useful for comparisons)."""
    cfg = _load_config(args)
    save_checkpoint(_net(cfg), args.output)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser():
    keys = config_mod.keys_help()
    parser = argparse.ArgumentParser(prog="bimac", description="Bimodal adaptive convolution toolkit",
                                     epilog=keys, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, with_config=True):
        p = sub.add_parser(name, help=help_, description=help_, epilog=keys,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if with_config:
            p.add_argument("--config", help="key=value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key")
        p.set_defaults(func=fn)
        return p

    add("train", cmd_train, "train a network; writes loss.csv and model.bmck to out.dir")
    p = add("eval", cmd_eval, "per-image SAM, ERGAS and Q2n as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: held-out synthetic samples)")
    p.add_argument("--baseline", action="store_true", help="also score bicubic upsampling")
    p = add("mask-dump", cmd_mask_dump, "write SM_F and HM PGMs for BiMAC layers")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", help="dataset directory (default: held-out synthetic samples)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layer", default="all", help="layer name, e.g. enc0.0.l1, or 'all'")
    p.add_argument("--scale", type=int, default=0, help="only layers at this scale (0 = every scale)")
    p = add("flops", cmd_flops, "analytic FLOPs of one BiMAC layer at width net.base_channels")
    p.add_argument("--f", type=float, default=0.15, help="focused fraction")
    p.add_argument("--reference", action="store_true", help="also print the published-setting context")
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every parameter group")
    p.add_argument("--probes", type=int, default=20)
    p = add("analyze", cmd_analyze, "per-patch SVD / spectrum profile CSV", with_config=False)
    p.add_argument("--input", required=True, help=".bmt tensor or .pgm image")
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--band", type=int, default=-1, help="band to analyze (-1 = band mean)")
    p.add_argument("--rank-thresh", type=int, default=5)
    p.add_argument("--hf-thresh", type=float, default=0.25)
    p.add_argument("--class-map", help="write a PGM class map here")
    add("synth", cmd_synth, "write a synthetic Wald dataset (count + val_count samples) to data.dir")
    add("config", cmd_config, "print the effective configuration")
    p = add("init", cmd_init, "write the initial checkpoint")
    p.add_argument("--output", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimensionError, MetricError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
