"""l1 training with Adam and a step-decay learning rate."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import stack
from .errors import DimensionError, NonFiniteError
from .metrics import ergas, sam
from .net import save_checkpoint, upsample_bicubic

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "lr", "train_l1", "val_sam", "val_ergas")


@dataclass
class TrainConfig:
    lr0: float = 6e-4
    decay: float = 0.8
    period: int = 200
    batch: int = 32
    epochs: int = 1
    seed: int = 0
    max_iters: int | None = None   # stop after this many Adam steps, mid-epoch if needed
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def lr_at(epoch, lr0=6e-4, decay=0.8, period=200):
    """Step decay: ``lr0 * decay ** floor(epoch / period)``."""
    return lr0 * decay ** (epoch // period)


def l1_loss(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"l1_loss: shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.abs(pred - gt).mean())


def l1_grad(pred, gt):
    """d mean|pred - gt| / d pred, with sign(0) = 0."""
    return np.sign(pred - gt) / pred.size


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of ``{name: Param}`` in place, using ``Param.grad``."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad**2
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def predict(net, samples, batch=16):
    """Network outputs for a list of samples, ``(N, C, H, W)``."""
    outs = []
    for i in range(0, len(samples), batch):
        _, pan, lrms = stack(samples[i:i + batch])
        outs.append(net.forward(pan, lrms))
    return np.concatenate(outs)


def dataset_l1(net, samples, batch=16):
    gt = np.stack([s.gt for s in samples])
    return l1_loss(predict(net, samples, batch), gt)


def validation_scores(net, samples, batch=16):
    """Mean ``(SAM, ERGAS)`` of the network over ``samples``."""
    pred = predict(net, samples, batch)
    return (float(np.mean([sam(p, s.gt) for p, s in zip(pred, samples)])),
            float(np.mean([ergas(p, s.gt) for p, s in zip(pred, samples)])))


def baseline_scores(samples):
    """Mean ``(SAM, ERGAS)`` of plain bicubic upsampling of the LRMS input."""
    ups = [upsample_bicubic(s.lrms) for s in samples]
    return (float(np.mean([sam(u, s.gt) for u, s in zip(ups, samples)])),
            float(np.mean([ergas(u, s.gt) for u, s in zip(ups, samples)])))


@dataclass
class TrainResult:
    trace: list            # one dict per epoch, keys TRACE_COLUMNS
    iter_losses: list      # batch l1 before each Adam step
    iters: int


def train_step(net, state, gt, pan, lrms, lr, cfg):
    pred = net.forward(pan, lrms)
    loss = l1_loss(pred, gt)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite training loss at Adam step {state.t + 1}")
    net.zero_grad()
    net.backward(l1_grad(pred, gt))
    adam_step(net.parameters(), state, lr, cfg.beta1, cfg.beta2, cfg.eps)
    return loss


def train(net, samples, cfg, val=None, out_dir=None):
    """Train ``net`` in place.

    Batches are drawn from a per-epoch permutation seeded by ``cfg.seed``.
    Writes ``loss.csv`` and ``model.bmck`` to ``out_dir`` when given.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    trace, iter_losses = [], []
    n = len(samples)
    gt_all, pan_all, lrms_all = stack(samples) if n else (None, None, None)
    done = False
    for epoch in range(cfg.epochs):
        if done:
            break
        lr = lr_at(epoch, cfg.lr0, cfg.decay, cfg.period)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch):
            if cfg.max_iters is not None and state.t >= cfg.max_iters:
                done = True
                break
            idx = np.sort(order[start:start + cfg.batch])
            try:
                loss = train_step(net, state, gt_all[idx], pan_all[idx], lrms_all[idx], lr, cfg)
            except NonFiniteError as exc:
                raise NonFiniteError(f"{exc} (epoch {epoch}, lr {lr:g})") from exc
            losses.append(loss)
        if not losses:
            break
        iter_losses += losses
        row = {"epoch": epoch, "lr": lr, "train_l1": float(np.mean(losses)),
               "val_sam": float("nan"), "val_ergas": float("nan")}
        if val:
            row["val_sam"], row["val_ergas"] = validation_scores(net, val)
        trace.append(row)
        log.info("epoch %d lr %.3g l1 %.5f", epoch, lr, row["train_l1"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_trace(out / "loss.csv", trace)
        save_checkpoint(net, out / "model.bmck")
    return TrainResult(trace, iter_losses, state.t)


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in TRACE_COLUMNS[1:]])
