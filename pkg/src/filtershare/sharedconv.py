"""Convolution layers with a shared seed-filter bank.

A shared layer stores P seed filters (each with S elements) plus an M x N x P
array of mixing coefficients; the full M x N filter set is expanded on every
forward pass as v[i,j] = sum_p alpha[i,j,p] * seed[p]. Backprop reaches the
bank and the coefficients through the tape, so training them directly needs
no hand-derived gradients. Weight counts: M*N*S unshared, M*N*P + P*S shared;
the bias (M scalars) is never shared.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .tensor import Shape, Tensor, dump_tensor, load_tensor

VALID = "valid"
SAME = "same"


@dataclass(frozen=True)
class ConvLayerSpec:
    """Static description of one convolution layer.

    in_channels is N, out_channels is M, and the product of kernel_extents is
    the per-filter element count S. sharing_p is None for an unshared layer.
    """

    in_channels: int
    out_channels: int
    kernel_extents: tuple[int, ...]
    padding: str = VALID
    sharing_p: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kernel_extents",
                           tuple(int(e) for e in self.kernel_extents))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(
                f"channel counts must be >= 1, got in={self.in_channels} "
                f"out={self.out_channels}"
            )
        Shape(self.kernel_extents)
        if self.padding not in (VALID, SAME):
            raise ConfigError(f"unknown padding mode {self.padding!r}")
        if self.padding == SAME and any(e % 2 == 0 for e in self.kernel_extents):
            raise ConfigError(
                f"same padding needs odd kernel extents, got {self.kernel_extents}"
            )
        if self.sharing_p is not None and self.sharing_p < 1:
            raise ConfigError(f"sharing_p must be >= 1, got {self.sharing_p}")

    @property
    def spatial_dims(self) -> int:
        return len(self.kernel_extents)

    @property
    def filter_size(self) -> int:
        """S: number of elements in one filter."""
        return int(np.prod(self.kernel_extents))

    @property
    def shared(self) -> bool:
        return self.sharing_p is not None


class FilterBank:
    """The P seed filters of a shared layer, stacked as one (P, *k) tensor."""

    __slots__ = ("seeds",)

    def __init__(self, seeds: Tensor):
        seeds = seeds if isinstance(seeds, Tensor) else Tensor(seeds)
        if seeds.array.ndim < 2:
            raise ShapeError(
                f"filter bank must be (P, *kernel_extents), got {tuple(seeds.shape)}"
            )
        self.seeds = seeds

    @property
    def count(self) -> int:
        return self.seeds.array.shape[0]

    @property
    def kernel_extents(self) -> tuple[int, ...]:
        return tuple(self.seeds.array.shape[1:])

    def seed(self, p: int) -> Tensor:
        return self.seeds[p]

    def norms(self) -> np.ndarray:
        flat = self.seeds.array.reshape(self.count, -1)
        return np.sqrt((flat * flat).sum(axis=1))


@dataclass(frozen=True)
class MixingCoefficients:
    """The M x N x P weights combining seed filters into full filters."""

    alpha: Tensor

    def __post_init__(self):
        alpha = self.alpha if isinstance(self.alpha, Tensor) else Tensor(self.alpha)
        object.__setattr__(self, "alpha", alpha)
        if alpha.array.ndim != 3:
            raise ShapeError(
                f"mixing coefficients must be (M, N, P), got {tuple(alpha.shape)}"
            )

    @property
    def count(self) -> int:
        return self.alpha.array.shape[2]


def _seeds_operand(bank):
    if isinstance(bank, FilterBank):
        return bank.seeds
    return bank  # Parameter/Var/Tensor holding the (P, *k) stack


def _alpha_operand(alpha):
    if isinstance(alpha, MixingCoefficients):
        return alpha.alpha
    return alpha


def expand_filters(bank, alpha) -> ad.Var:
    """v[i,j] = sum_p alpha[i,j,p] * seed[p], differentiable in both."""
    return ad.mix_filters(_seeds_operand(bank), _alpha_operand(alpha))


def layer_forward(spec: ConvLayerSpec, filters, bias, inputs) -> ad.Var:
    """out[i] = sum_j corr(in[j], v[i,j]) + b[i] over a channel stack.

    `inputs` is the (N, *spatial) stack; `filters` the (M, N, *k) stack.
    """
    x = ad.as_var(inputs)
    f = ad.as_var(filters)
    b = ad.as_var(bias)
    if x.array.ndim != spec.spatial_dims + 1:
        raise ShapeError(
            f"layer_forward: input stack must have {spec.spatial_dims} spatial "
            f"dims plus channels, got shape {x.array.shape}"
        )
    if x.array.shape[0] != spec.in_channels:
        raise ShapeError(
            f"layer_forward: expected {spec.in_channels} input channels, "
            f"got {x.array.shape[0]}"
        )
    expect_f = (spec.out_channels, spec.in_channels) + spec.kernel_extents
    if tuple(f.array.shape) != expect_f:
        raise ShapeError(
            f"layer_forward: filters shaped {f.array.shape}, expected {expect_f}"
        )
    if tuple(b.array.shape) != (spec.out_channels,):
        raise ShapeError(
            f"layer_forward: bias shaped {b.array.shape}, expected "
            f"({spec.out_channels},)"
        )
    if spec.padding == SAME:
        x = ad.pad_spatial(x, [(e - 1) // 2 for e in spec.kernel_extents])
    y = ad.conv_stack(x, f)
    return ad.channel_bias(y, b)


def shared_layer_forward(spec: ConvLayerSpec, bank, alpha, bias, inputs) -> ad.Var:
    """Forward pass of a shared layer; defined as layer_forward of the
    expanded bank, so the equivalence with the unshared path is structural."""
    if not spec.shared:
        raise ConfigError("shared_layer_forward needs a spec with sharing enabled")
    seeds = _seeds_operand(bank)
    al = _alpha_operand(alpha)
    p_bank = ad.as_var(seeds).array.shape[0]
    p_alpha = ad.as_var(al).array.shape[2]
    if p_bank != spec.sharing_p or p_alpha != spec.sharing_p:
        raise ShapeError(
            f"shared_layer_forward: spec P={spec.sharing_p} but bank has "
            f"{p_bank} seeds and alpha has {p_alpha}"
        )
    return layer_forward(spec, expand_filters(seeds, al), bias, inputs)


@dataclass(frozen=True)
class ParamCount:
    weights: int
    bias: int

    @property
    def total(self) -> int:
        return self.weights + self.bias


def param_count(spec: ConvLayerSpec) -> ParamCount:
    """Trainable scalar counts: M*N*S unshared, M*N*P + P*S shared; bias M."""
    m, n, s = spec.out_channels, spec.in_channels, spec.filter_size
    if spec.shared:
        weights = m * n * spec.sharing_p + spec.sharing_p * s
    else:
        weights = m * n * s
    return ParamCount(weights=weights, bias=m)


def sharing_breakeven(spec: ConvLayerSpec) -> int:
    """Largest P with M*N*P + P*S < M*N*S; 0 when no P saves anything."""
    m, n, s = spec.out_channels, spec.in_channels, spec.filter_size
    return (m * n * s - 1) // (m * n + s)


# ---------------------------------------------------------------------------
# layer checkpointing: one tensor dump per array plus a JSON sidecar
# ---------------------------------------------------------------------------

def save_layer_checkpoint(directory, spec: ConvLayerSpec, bank, alpha, bias) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dump_tensor(_as_tensor(_seeds_operand(bank)), directory / "seeds.bin")
    dump_tensor(_as_tensor(_alpha_operand(alpha)), directory / "alpha.bin")
    dump_tensor(_as_tensor(bias), directory / "bias.bin")
    sidecar = {
        "in_channels": spec.in_channels,
        "out_channels": spec.out_channels,
        "kernel_extents": list(spec.kernel_extents),
        "padding": spec.padding,
        "sharing_p": spec.sharing_p,
    }
    (directory / "layer.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_layer_checkpoint(directory):
    directory = Path(directory)
    sidecar = json.loads((directory / "layer.json").read_text())
    spec = ConvLayerSpec(
        in_channels=sidecar["in_channels"],
        out_channels=sidecar["out_channels"],
        kernel_extents=tuple(sidecar["kernel_extents"]),
        padding=sidecar["padding"],
        sharing_p=sidecar["sharing_p"],
    )
    bank = FilterBank(load_tensor(directory / "seeds.bin"))
    alpha = MixingCoefficients(load_tensor(directory / "alpha.bin"))
    bias = load_tensor(directory / "bias.bin")
    return spec, bank, alpha, bias


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, ad.Var):
        return x.value
    return Tensor(x)
