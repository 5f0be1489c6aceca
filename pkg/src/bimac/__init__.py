"""Bimodal adaptive convolution (BiMAC) for pansharpening, in numpy.

Public surface, by area:

* layers: :class:`BiMACLayer`, :func:`bimac_forward`, :class:`CAMG`, low-rank kernels
* network: :class:`Bi2MANet`, :func:`build_variant`, :func:`net_forward`
* training: :func:`train`, :func:`adam_step`, :func:`l1_loss`, :func:`gradcheck`
* data: :func:`synth_scene`, :func:`wald_degrade`
* evaluation: :func:`sam`, :func:`ergas`, :func:`q2n`, FLOPs and region analysis
"""
from .camg import CAMG, MaskPair, camg_forward, hard_mask, soft_mask
from .data import WaldSample, make_dataset, synth_scene, wald_degrade
from .errors import (BimacError, ConfigError, DataError, DimensionError, MetricError,
                     NonFiniteError, StateError)
from .flops import FlopsReport, flops_analytic, flops_instrumented
from .gradcheck import gradcheck
from .lowrank import LowRankKernel, param_count
from .mabic import BiMACLayer, bimac_forward
from .metrics import ergas, q2n, sam
from .net import Bi2MANet, NetConfig, build_variant, net_forward, upsample_bicubic
from .region import classify_patch, profile_patch, radial_power_spectrum, svd_spectrum
from .tensor import FlopTally, conv2d
from .train import TrainConfig, adam_step, l1_loss, lr_at, train

__version__ = "0.1.0"
