"""Bi2MANet: a small U-Net whose ResBlocks are built from BiMAC layers.

Data flow for ``L`` levels (scales ``1, 2, ..., 2**(L-1)``)::

    [pan, up4(lrms)] -> stem -> (ResBlocks -> down) x (L-1) -> ResBlocks
                     -> (up -> concat skip -> 1x1 fuse -> ResBlocks) x (L-1)
                     -> head -> + up4(lrms)

Down-sampling is a 3x3 conv followed by 2x decimation (identical to a
stride-2 conv); up-sampling is nearest-neighbour 2x followed by a 3x3 conv.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .camg import DEFAULT_ALPHA
from .errors import ConfigError, DimensionError
from .fileio import read_checkpoint, write_checkpoint
from .layers import Conv2d, Module, upsample_nearest2, upsample_nearest2_backward
from .mabic import BiMACLayer
from .tensor import relu

ABLATIONS = ("full", "no_focused", "no_compact", "no_camg", "no_lrk", "shared_weights")
RATIO = 4


@dataclass
class NetConfig:
    bands: int = 4
    base_channels: int = 32
    depth: int = 3
    blocks: int = 1
    k: int = 3
    alpha: float = DEFAULT_ALPHA
    ablation: str = "full"

    def validate(self):
        if self.bands < 1:
            raise ConfigError("bands must be positive")
        if self.base_channels < 1 or self.depth < 1 or self.blocks < 1:
            raise ConfigError("base_channels, depth and blocks must be positive")
        if self.k % 2 == 0:
            raise ConfigError(f"k must be odd, got {self.k}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {', '.join(ABLATIONS)}")
        if not np.isfinite(self.alpha):
            raise ConfigError("alpha must be finite")
        return self

    def layer_options(self):
        """Keyword arguments for every BiMAC layer under this ablation."""
        return {
            "full": {},
            "no_focused": {"route": "compact"},
            "no_compact": {"route": "focused"},
            "no_camg": {"route": "random"},
            "no_lrk": {"kernel": "dense"},
            "shared_weights": {"shared": True},
        }[self.ablation]


# -- bicubic 4x upsampling ---------------------------------------------------

def _cubic(t, a=-0.5):
    t = np.abs(t)
    return np.where(t <= 1, (a + 2) * t**3 - (a + 3) * t**2 + 1,
                    np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0))


@lru_cache(maxsize=32)
def _bicubic_matrix(n_in, ratio, offset):
    """``(n_in*ratio, n_in)`` interpolation matrix, edge-clamped.

    Low-res sample ``j`` sits at high-res position ``ratio*j + offset``.
    """
    n_out = n_in * ratio
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i - offset) / ratio
        base = int(np.floor(src))
        for tap in range(base - 1, base + 3):
            m[i, min(max(tap, 0), n_in - 1)] += _cubic(src - tap)
    m.setflags(write=False)
    return m


def upsample_bicubic(x, ratio=RATIO, offset=None):
    """Bicubic upsampling (Keys, a = -0.5) of ``(..., h, w)`` by ``ratio``.

    Half-pixel aligned by default: each low-res pixel is centred on its
    footprint, ``offset = (ratio - 1) / 2``, matching the Wald degradation.
    """
    x = np.asarray(x, dtype=np.float64)
    offset = (ratio - 1) / 2 if offset is None else offset
    mh = _bicubic_matrix(x.shape[-2], ratio, offset)
    mw = _bicubic_matrix(x.shape[-1], ratio, offset)
    return np.matmul(np.matmul(mh, x), mw.T)


# -- blocks ------------------------------------------------------------------

class ResBlock(Module):
    """``y = x + L2(relu(L1(x)))`` with two BiMAC layers of equal width."""

    def __init__(self, channels, cfg, rng, name, mask_seed):
        opts = cfg.layer_options()
        self.l1 = BiMACLayer(channels, channels, cfg.k, cfg.alpha, rng, mask_seed=mask_seed, **opts)
        self.l2 = BiMACLayer(channels, channels, cfg.k, cfg.alpha, rng, mask_seed=mask_seed + 1, **opts)
        self.name = name
        self._cache = None

    def forward(self, x, tally=None):
        a = self.l1.forward(x, tally=tally)
        y = x + self.l2.forward(relu(a), tally=tally)
        self._cache = a
        return y

    def kink_inputs(self):
        return [self._need_cache()]

    def backward(self, dy):
        a = self._need_cache()
        g = self.l2.backward(dy) * (a > 0)
        return dy + self.l1.backward(g)


def resblock_forward(x, block):
    """Single-image convenience wrapper around :meth:`ResBlock.forward`."""
    return block.forward(np.asarray(x, dtype=np.float64)[None])[0]


class Bi2MANet(Module):
    def __init__(self, cfg, rng=None, seed=0, zero_head=False):
        """Build with uniform fan-in init from ``rng``; ``rng=None`` gives all-zero parameters.

        ``zero_head`` starts the residual head at zero so the untrained net
        outputs exactly the bicubic upsampled LRMS.
        """
        cfg.validate()
        self.cfg = cfg
        b, c = cfg.base_channels, cfg.bands
        mask_seed = [seed * 1000]

        def block(name):
            mask_seed[0] += 2
            return ResBlock(b, cfg, rng, name, mask_seed[0])

        self.stem = Conv2d(c + 1, b, 3, rng)
        self.enc, self.down, self.upconv, self.fuse, self.dec = [], [], [], [], []
        for lvl in range(cfg.depth - 1):
            self.enc.append([block(f"enc{lvl}.{i}") for i in range(cfg.blocks)])
            self.down.append(Conv2d(b, b, 3, rng))
        self.mid = [block(f"mid.{i}") for i in range(cfg.blocks)]
        for lvl in reversed(range(cfg.depth - 1)):
            self.upconv.append(Conv2d(b, b, 3, rng))
            self.fuse.append(Conv2d(2 * b, b, 1, rng))
            self.dec.append([block(f"dec{lvl}.{i}") for i in range(cfg.blocks)])
        self.head = Conv2d(b, c, 3, rng)
        if zero_head:
            self.head.w.value[...] = 0.0
            self.head.b.value[...] = 0.0
        self._cache = None

    def _children(self):
        # enc/dec are lists of per-level block lists
        yield from super()._children()
        for attr in ("enc", "dec"):
            for lvl, blocks in enumerate(getattr(self, attr)):
                for i, blk in enumerate(blocks):
                    yield f"{attr}.{lvl}.{i}", blk

    def bimac_layers(self):
        """``[(name, scale, layer)]`` in execution order."""
        out = []
        for lvl, blocks in enumerate(self.enc):
            for blk in blocks:
                out += [(f"{blk.name}.l1", 2**lvl, blk.l1), (f"{blk.name}.l2", 2**lvl, blk.l2)]
        for blk in self.mid:
            s = 2 ** (self.cfg.depth - 1)
            out += [(f"{blk.name}.l1", s, blk.l1), (f"{blk.name}.l2", s, blk.l2)]
        for j, blocks in enumerate(self.dec):
            lvl = self.cfg.depth - 2 - j
            for blk in blocks:
                out += [(f"{blk.name}.l1", 2**lvl, blk.l1), (f"{blk.name}.l2", 2**lvl, blk.l2)]
        return out

    def freeze_masks(self):
        for _, _, layer in self.bimac_layers():
            layer.freeze()

    def unfreeze_masks(self):
        for _, _, layer in self.bimac_layers():
            layer.unfreeze()

    def check_input(self, pan, lrms):
        if pan.ndim != 4 or pan.shape[1] != 1:
            raise DimensionError(f"pan must be (N, 1, H, W), got {pan.shape}")
        n, _, h, w = pan.shape
        mult = RATIO * 2 ** (self.cfg.depth - 1)
        if h % mult or w % mult:
            raise DimensionError(f"H and W must be multiples of {mult}, got {h}x{w}")
        if lrms.shape != (n, self.cfg.bands, h // RATIO, w // RATIO):
            raise DimensionError(f"lrms must be {(n, self.cfg.bands, h // RATIO, w // RATIO)}, got {lrms.shape}")

    def forward(self, pan, lrms, tally=None):
        """Batched ``(N,1,H,W), (N,C,H/4,W/4) -> (N,C,H,W)``."""
        pan = np.asarray(pan, dtype=np.float64)
        lrms = np.asarray(lrms, dtype=np.float64)
        self.check_input(pan, lrms)
        up = upsample_bicubic(lrms)
        f = self.stem.forward(np.concatenate([pan, up], axis=1), tally, "backbone")
        skips, down_shapes = [], []
        for lvl, blocks in enumerate(self.enc):
            for blk in blocks:
                f = blk.forward(f, tally)
            skips.append(f)
            full = self.down[lvl].forward(f, tally, "backbone")
            down_shapes.append(full.shape)
            f = full[:, :, ::2, ::2]
        for blk in self.mid:
            f = blk.forward(f, tally)
        for j, blocks in enumerate(self.dec):
            f = self.upconv[j].forward(upsample_nearest2(f), tally, "backbone")
            f = self.fuse[j].forward(np.concatenate([f, skips[-1 - j]], axis=1), tally, "backbone")
            for blk in blocks:
                f = blk.forward(f, tally)
        out = up + self.head.forward(f, tally, "backbone")
        self._cache = down_shapes
        return out

    def backward(self, dout):
        """Accumulate parameter gradients for ``d loss / d output``."""
        down_shapes = self._need_cache()
        b = self.cfg.base_channels
        g = self.head.backward(dout)
        dskips = [None] * len(self.enc)
        # decoder levels run coarse to fine, so unwind them fine to coarse
        for j in reversed(range(len(self.dec))):
            for blk in reversed(self.dec[j]):
                g = blk.backward(g)
            g = self.fuse[j].backward(g)
            dskips[len(self.enc) - 1 - j] = g[:, b:]
            g = upsample_nearest2_backward(self.upconv[j].backward(g[:, :b]))
        for blk in reversed(self.mid):
            g = blk.backward(g)
        for lvl in reversed(range(len(self.enc))):
            full = np.zeros(down_shapes[lvl])
            full[:, :, ::2, ::2] = g
            g = self.down[lvl].backward(full) + dskips[lvl]
            for blk in reversed(self.enc[lvl]):
                g = blk.backward(g)
        self.stem.backward(g)

    def masks(self):
        """Masks from the last forward: ``[(name, scale, MaskPair)]``."""
        return [(name, scale, layer.last_mask) for name, scale, layer in self.bimac_layers()]

    def state_dict(self):
        return {name: p.value for name, p in self.parameters().items()}

    def load_state_dict(self, state):
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for name, p in params.items():
            if state[name].shape != p.value.shape:
                raise ConfigError(f"shape mismatch for {name}: {state[name].shape} vs {p.value.shape}")
            p.value[...] = state[name]


def net_forward(pan, lrms, net):
    """Single-image forward: ``(1,H,W), (C,H/4,W/4) -> (C,H,W)``."""
    return net.forward(np.asarray(pan)[None], np.asarray(lrms)[None])[0]


def build_variant(cfg, seed=0, zero_head=True):
    """Construct a randomly initialised network for ``cfg.ablation``.

    The head starts at zero by default (training starts from the bicubic
    baseline); pass ``zero_head=False`` for a fully random net, e.g. for
    gradient checks, where a zero head would zero every upstream gradient.
    """
    cfg.validate()
    return Bi2MANet(cfg, np.random.default_rng(seed), seed=seed, zero_head=zero_head)


def save_checkpoint(net, path):
    write_checkpoint(path, net.state_dict())


def load_checkpoint(net, path):
    net.load_state_dict(read_checkpoint(path))
    return net
