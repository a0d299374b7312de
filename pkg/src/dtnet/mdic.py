"""Threshold convolution and the encoder/decoder MDIC modules.

An MDIC module splits its input channels into four quarters, applies a
different direction transform to each quarter (identity, transpose, 180
degree rotation, width mirror), convolves, undoes the transform and fuses the
four local maps with a full-channel global branch. Every convolution is
followed by ReLU and then batch normalization.

Parameter layout (``/``-separated names inside a flat store)::

    enc{m}/part{i}/branch{j}/{conv,bn}/...   local branch j of quarter i
    enc{m}/global/{conv,bn}/...
    enc{m}/integrate_a/{conv,bn}/...         1x1, 2F -> F
    enc{m}/integrate_b/{conv,bn}/...         1x1, F -> F
    dec{m}/part{i}/branch{j}/{conv,bn}/...
    dec{m}/retain/conv/...                   1x1, C -> F, no BN
    dec{m}/fuse/{conv,bn}/...                1x1, 2F -> F
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from dtnet import ops
from dtnet.ops import PART_FLIPS, FlipKind
from dtnet.tensor import Tensor, as_tensor, note_decision, record

VARIANTS = ("hard", "epsilon")


@dataclass(frozen=True)
class ThresholdSpec:
    T: float = 0.1
    variant: str = "epsilon"
    epsilon: float = 1e-10

    def __post_init__(self):
        if not self.T >= 0:
            raise ValueError(f"threshold must be non-negative, got {self.T}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.variant == "epsilon" and self.T > 0 and self.epsilon >= self.T:
            raise ValueError("epsilon must be much smaller than the threshold")


def threshold_conv(x, spec: ThresholdSpec) -> Tensor:
    """Zero (hard) or floor at ``epsilon`` every entry whose ReLU response is <= T.

    Surviving entries pass through unchanged. The mask is a constant for the
    backward pass, so gradient only flows through survivors.
    """
    x = as_tensor(x)
    keep = np.maximum(x.data, 0) > spec.T
    note_decision(keep)
    out = np.where(keep, x.data, 0).astype(x.dtype, copy=False)
    if spec.variant == "epsilon":
        out = out + np.where(keep, 0, spec.epsilon).astype(x.dtype)
    return record(Tensor(out), (x,), lambda g: (g * keep,))


@dataclass(frozen=True)
class MdicConfig:
    in_channels: int
    out_channels: int
    part_kernels: tuple[int, int, int, int] = (1, 3, 5, 7)
    global_kernel: int = 3
    multiscale: bool = True
    directional: bool = True

    def __post_init__(self):
        if len(self.part_kernels) != 4:
            raise ValueError("part_kernels needs exactly four sizes")
        for k in (*self.part_kernels, self.global_kernel):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and positive, got {k}")
        if all(k == self.global_kernel for k in self.part_kernels):
            raise ValueError("global kernel must differ from at least one part kernel")
        if self.out_channels % 4:
            raise ValueError(f"out_channels must be divisible by 4, got {self.out_channels}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")

    @property
    def splits_input(self) -> bool:
        """Whether the quarters are disjoint channel slices (vs. the whole input)."""
        return self.directional and self.in_channels % 4 == 0

    @property
    def part_in(self) -> int:
        return self.in_channels // 4 if self.splits_input else self.in_channels

    def branch_kernels(self, part: int) -> list[tuple[int, int]]:
        """(branch index, kernel size) pairs for quarter ``part`` (0-based)."""
        if self.multiscale:
            return list(enumerate(self.part_kernels))
        return [(part, self.part_kernels[part])]


# ---------------------------------------------------------------------------
# parameter shapes and views


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # "he", "zeros", "ones"
    trainable: bool = True
    fan_in: int = 0


def conv_specs(prefix: str, fin: int, fout: int, k: int, bn: bool = True) -> list[ParamSpec]:
    out = [
        ParamSpec(f"{prefix}/conv/weight", (fout, fin, k, k), "he", fan_in=fin * k * k),
        ParamSpec(f"{prefix}/conv/bias", (fout,), "zeros"),
    ]
    if bn:
        out += [
            ParamSpec(f"{prefix}/bn/gamma", (fout,), "ones"),
            ParamSpec(f"{prefix}/bn/beta", (fout,), "zeros"),
            ParamSpec(f"{prefix}/bn/running_mean", (fout,), "zeros", trainable=False),
            ParamSpec(f"{prefix}/bn/running_var", (fout,), "ones", trainable=False),
        ]
    return out


def _part_specs(prefix: str, cfg: MdicConfig) -> list[ParamSpec]:
    q = cfg.out_channels // 4
    specs = []
    for i in range(4):
        for j, k in cfg.branch_kernels(i):
            specs += conv_specs(f"{prefix}/part{i + 1}/branch{j + 1}", cfg.part_in, q, k)
    return specs


def em_param_specs(prefix: str, cfg: MdicConfig) -> list[ParamSpec]:
    f = cfg.out_channels
    return (
        _part_specs(prefix, cfg)
        + conv_specs(f"{prefix}/global", cfg.in_channels, f, cfg.global_kernel)
        + conv_specs(f"{prefix}/integrate_a", 2 * f, f, 1)
        + conv_specs(f"{prefix}/integrate_b", f, f, 1)
    )


def dm_param_specs(prefix: str, cfg: MdicConfig) -> list[ParamSpec]:
    f = cfg.out_channels
    return (
        _part_specs(prefix, cfg)
        + conv_specs(f"{prefix}/retain", cfg.in_channels, f, 1, bn=False)
        + conv_specs(f"{prefix}/fuse", 2 * f, f, 1)
    )


@dataclass
class ConvBN:
    weight: Tensor
    bias: Tensor
    gamma: Tensor | None = None
    beta: Tensor | None = None
    running_mean: Tensor | None = None
    running_var: Tensor | None = None

    @classmethod
    def from_store(cls, store: Mapping[str, Tensor], prefix: str, bn: bool = True) -> "ConvBN":
        conv = cls(store[f"{prefix}/conv/weight"], store[f"{prefix}/conv/bias"])
        if bn:
            conv.gamma = store[f"{prefix}/bn/gamma"]
            conv.beta = store[f"{prefix}/bn/beta"]
            conv.running_mean = store[f"{prefix}/bn/running_mean"]
            conv.running_var = store[f"{prefix}/bn/running_var"]
        return conv

    def __call__(self, x: Tensor, mode: str, kind: FlipKind | None = None) -> Tensor:
        """conv -> ReLU -> BN. ``kind`` convolves with the kind-transformed kernel."""
        w = self.weight if kind is None else ops.flip_apply(self.weight, kind)
        y = ops.conv2d(x, w, self.bias)
        if self.gamma is None:
            return y
        return ops.batchnorm(
            ops.relu(y), self.gamma, self.beta, self.running_mean, self.running_var, mode
        )


def _parts_from_store(store, prefix, cfg) -> list[list[ConvBN]]:
    return [
        [ConvBN.from_store(store, f"{prefix}/part{i + 1}/branch{j + 1}") for j, _ in cfg.branch_kernels(i)]
        for i in range(4)
    ]


@dataclass
class EmParams:
    cfg: MdicConfig
    parts: list[list[ConvBN]]
    global_: ConvBN
    integrate_a: ConvBN
    integrate_b: ConvBN
    threshold: ThresholdSpec | None

    @classmethod
    def from_store(cls, store, prefix, cfg, threshold: ThresholdSpec | None) -> "EmParams":
        return cls(
            cfg,
            _parts_from_store(store, prefix, cfg),
            ConvBN.from_store(store, f"{prefix}/global"),
            ConvBN.from_store(store, f"{prefix}/integrate_a"),
            ConvBN.from_store(store, f"{prefix}/integrate_b"),
            threshold,
        )


@dataclass
class DmParams:
    cfg: MdicConfig
    parts: list[list[ConvBN]]
    retain: ConvBN
    fuse: ConvBN

    @classmethod
    def from_store(cls, store, prefix, cfg) -> "DmParams":
        return cls(
            cfg,
            _parts_from_store(store, prefix, cfg),
            ConvBN.from_store(store, f"{prefix}/retain", bn=False),
            ConvBN.from_store(store, f"{prefix}/fuse"),
        )


# ---------------------------------------------------------------------------
# forward passes


def _quarters(x: Tensor, cfg: MdicConfig) -> tuple[Tensor, ...]:
    if cfg.splits_input:
        return ops.split4(x)
    return (x, x, x, x)


def local_branch(
    x: Tensor, branches: list[ConvBN], kind: FlipKind, mode: str, conjugate: bool = True
) -> Tensor:
    """flip -> (sum over kernel sizes of BN(ReLU(conv))) -> unflip.

    With ``conjugate=False`` the same map is computed without moving the data:
    each convolution uses the kind-transformed kernel instead. ReLU and BN are
    per-element and per-channel, so both forms agree.
    """
    if conjugate:
        y = ops.flip_apply(x, kind)
        acc = branches[0](y, mode)
        for br in branches[1:]:
            acc = ops.add(acc, br(y, mode))
        return ops.flip_apply(acc, ops.flip_inverse(kind))
    acc = branches[0](x, mode, kind)
    for br in branches[1:]:
        acc = ops.add(acc, br(x, mode, kind))
    return acc


def _check_square(x: Tensor, who: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{who} expects a 4-D tensor, got shape {x.shape}")
    if x.shape[2] != x.shape[3]:
        raise ValueError(f"{who} needs square feature maps, got {x.shape[2]}x{x.shape[3]}")


def _local_maps(x, parts, cfg, mode, conjugate) -> list[Tensor]:
    kinds = PART_FLIPS if cfg.directional else (FlipKind.IDENTITY,) * 4
    return [
        local_branch(xi, branches, kind, mode, conjugate)
        for xi, branches, kind in zip(_quarters(x, cfg), parts, kinds)
    ]


def em_forward(
    x, p: EmParams, mode: str = "train", conjugate: bool = True, capture: dict | None = None
) -> tuple[Tensor, Tensor]:
    """Encoder module. Returns ``(skip, pooled)`` with skip at the input extent."""
    x = as_tensor(x)
    _check_square(x, "em_forward")
    if x.shape[1] != p.cfg.in_channels:
        raise ValueError(f"em_forward expects {p.cfg.in_channels} channels, got {x.shape[1]}")
    if x.shape[2] % 2:
        raise ValueError(f"em_forward needs even spatial extent, got {x.shape[2]}")
    g = p.global_(x, mode)
    local = _local_maps(x, p.parts, p.cfg, mode, conjugate)
    u = p.integrate_a(ops.concat_channels([*local, g]), mode)
    t = u if p.threshold is None else threshold_conv(u, p.threshold)
    skip = p.integrate_b(t, mode)
    if capture is not None:
        capture.update(local=local, global_=g, integrated=u, thresholded=t, skip=skip)
    return skip, ops.maxpool2(skip)


def dm_forward(
    x,
    skip,
    p: DmParams,
    mode: str = "train",
    conjugate: bool = True,
    capture: dict | None = None,
) -> Tensor:
    """Decoder module: upsample, local MDIC maps fused with the encoder skip, 1x1 fusion."""
    x, skip = as_tensor(x), as_tensor(skip)
    _check_square(x, "dm_forward")
    n, c, h, w = x.shape
    f = p.cfg.out_channels
    if c != p.cfg.in_channels:
        raise ValueError(f"dm_forward expects {p.cfg.in_channels} channels, got {c}")
    if skip.shape != (n, f, 2 * h, 2 * w):
        raise ValueError(f"skip must have shape {(n, f, 2 * h, 2 * w)}, got {skip.shape}")
    u = ops.bilinear_up2(x)
    r = p.retain(u, mode)
    local = _local_maps(u, p.parts, p.cfg, mode, conjugate)
    fused = [ops.add(d, s) for d, s in zip(local, ops.split4(skip))]
    out = p.fuse(ops.concat_channels([*fused, r]), mode)
    if capture is not None:
        capture.update(upsampled=u, retained=r, local=local, fused=fused, out=out)
    return out
