"""Mask-enhanced attention fusion of an RGB image and an infrared image.

Pipeline per modality: learnable scalar scaling, a convolutional spatial mask,
a residual 3x3 refinement against the *raw* input, and an avg/max spatial
attention gate. The two attended maps are concatenated (RGB first) and
reweighted by a squeeze-excitation channel gate. All stages preserve H and W.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ActivationKind,
    Tensor,
    activation,
    channel_stats,
    concat_channels,
    conv2d,
    elementwise,
    fully_connected,
    global_avg_pool,
    kaiming_uniform,
    named_parameters,
    tensor,
    zeros,
)

__all__ = [
    "ModalityScale",
    "MaskConvs",
    "BranchParams",
    "FusionParams",
    "FusionTrace",
    "scale_modalities",
    "generate_mask",
    "refine_features",
    "spatial_attention",
    "apply_attention",
    "excitation_vector",
    "channel_excitation_fuse",
    "meaf_forward",
]


@dataclass
class ModalityScale:
    p_rgb: Tensor
    p_ir: Tensor

    @classmethod
    def default(cls) -> "ModalityScale":
        return cls(tensor(0.5, requires_grad=True), tensor(0.5, requires_grad=True))


@dataclass
class MaskConvs:
    """3x3 (C->C) then 1x1 (C->C) convolutions producing the mask multiplier."""

    conv3_weight: Tensor
    conv3_bias: Tensor
    conv1_weight: Tensor
    conv1_bias: Tensor


@dataclass
class BranchParams:
    mask: MaskConvs
    refine_weight: Tensor  # [C_mid, C, 3, 3]
    refine_bias: Tensor
    sa_weight: Tensor  # [1, 2, 1, 1]
    sa_bias: Tensor

    @classmethod
    def init(cls, channels: int, mid_channels: int, rng: np.random.Generator) -> "BranchParams":
        c = channels
        return cls(
            mask=MaskConvs(
                kaiming_uniform((c, c, 3, 3), rng),
                zeros((c,), requires_grad=True),
                kaiming_uniform((c, c, 1, 1), rng),
                zeros((c,), requires_grad=True),
            ),
            refine_weight=kaiming_uniform((mid_channels, c, 3, 3), rng),
            refine_bias=zeros((mid_channels,), requires_grad=True),
            # zero start puts every attention gate at 0.5; a random draw with both
            # weights negative pins bright targets near 0 where the sigmoid is flat
            sa_weight=zeros((1, 2, 1, 1), requires_grad=True),
            sa_bias=zeros((1,), requires_grad=True),
        )


@dataclass
class FusionParams:
    modal: ModalityScale
    rgb: BranchParams
    ir: BranchParams
    fc1_weight: Tensor  # [C_f // r, C_f]
    fc1_bias: Tensor
    fc2_weight: Tensor  # [C_f, C_f // r]
    fc2_bias: Tensor

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        rgb_channels: int = 3,
        ir_channels: int = 1,
        mid_channels: int = 16,
        reduction: int = 4,
    ) -> "FusionParams":
        fused = 2 * mid_channels
        if fused % reduction:
            raise ValueError(f"fused width {fused} not divisible by reduction {reduction}")
        squeezed = fused // reduction
        return cls(
            modal=ModalityScale.default(),
            rgb=BranchParams.init(rgb_channels, mid_channels, rng),
            ir=BranchParams.init(ir_channels, mid_channels, rng),
            fc1_weight=kaiming_uniform((squeezed, fused), rng),
            fc1_bias=zeros((squeezed,), requires_grad=True),
            fc2_weight=kaiming_uniform((fused, squeezed), rng),
            fc2_bias=zeros((fused,), requires_grad=True),
        )

    @property
    def out_channels(self) -> int:
        return self.fc2_weight.shape[0]

    def named_parameters(self, prefix: str = "fusion") -> dict[str, Tensor]:
        return named_parameters(self, prefix)


@dataclass
class FusionTrace:
    """Every intermediate of one forward pass, keyed by modality."""

    scaled: dict[str, Tensor] = field(default_factory=dict)
    mask: dict[str, Tensor] = field(default_factory=dict)
    refined: dict[str, Tensor] = field(default_factory=dict)
    attention: dict[str, Tensor] = field(default_factory=dict)
    attended: dict[str, Tensor] = field(default_factory=dict)
    excitation: Tensor | None = None
    fused: Tensor | None = None


def scale_modalities(rgb: Tensor, ir: Tensor, modal: ModalityScale) -> tuple[Tensor, Tensor]:
    if rgb.ndim != 4 or ir.ndim != 4:
        raise ValueError("rgb and ir must be [N,C,H,W]")
    if (rgb.shape[0], *rgb.shape[2:]) != (ir.shape[0], *ir.shape[2:]):
        raise ValueError(f"rgb {rgb.shape} and ir {ir.shape} are not aligned")
    return rgb * modal.p_rgb, ir * modal.p_ir


def generate_mask(x: Tensor, convs: MaskConvs) -> Tensor:
    hidden = activation(conv2d(x, convs.conv3_weight, convs.conv3_bias, padding=1), ActivationKind.RELU)
    gate = conv2d(hidden, convs.conv1_weight, convs.conv1_bias)
    return elementwise(x, gate, "mul")


def refine_features(x_mask: Tensor, x_orig: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 conv over ``x_mask + x_orig``; ``x_orig`` is the unscaled input."""
    if x_mask.shape != x_orig.shape:
        raise ValueError(f"mask {x_mask.shape} and input {x_orig.shape} differ")
    return conv2d(elementwise(x_mask, x_orig, "add"), weight, bias, padding=1)


def spatial_attention(x2: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return activation(conv2d(channel_stats(x2), weight, bias), ActivationKind.SIGMOID)


def apply_attention(x2: Tensor, sa: Tensor) -> Tensor:
    if sa.ndim != 4 or sa.shape[1] != 1:
        raise ValueError(f"attention map must be [N,1,H,W], got {sa.shape}")
    return elementwise(x2, sa, "mul")


def excitation_vector(x: Tensor, fc1_weight, fc1_bias, fc2_weight, fc2_bias) -> Tensor:
    """Per-channel gate in (0, 1): sigmoid(FC2(relu(FC1(GAP(x)))))."""
    squeezed = activation(fully_connected(global_avg_pool(x), fc1_weight, fc1_bias), ActivationKind.RELU)
    return activation(fully_connected(squeezed, fc2_weight, fc2_bias), ActivationKind.SIGMOID)


def channel_excitation_fuse(
    rgb_out: Tensor, ir_out: Tensor, fc1_weight, fc1_bias, fc2_weight, fc2_bias
) -> tuple[Tensor, Tensor]:
    """Returns the reweighted concatenation and the gate vector that produced it."""
    cat = concat_channels(rgb_out, ir_out)
    gate = excitation_vector(cat, fc1_weight, fc1_bias, fc2_weight, fc2_bias)
    return elementwise(cat, gate, "mul"), gate


def _branch(x: Tensor, x1: Tensor, p: BranchParams) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    masked = generate_mask(x1, p.mask)
    refined = refine_features(masked, x, p.refine_weight, p.refine_bias)
    sa = spatial_attention(refined, p.sa_weight, p.sa_bias)
    return masked, refined, sa, apply_attention(refined, sa)


def meaf_forward(
    rgb: Tensor, ir: Tensor, params: FusionParams, record_trace: bool = False
) -> tuple[Tensor, FusionTrace | None]:
    rgb1, ir1 = scale_modalities(rgb, ir, params.modal)
    trace = FusionTrace() if record_trace else None
    outs = {}
    for key, raw, scaled, branch in (("rgb", rgb, rgb1, params.rgb), ("ir", ir, ir1, params.ir)):
        masked, refined, sa, out = _branch(raw, scaled, branch)
        outs[key] = out
        if trace is not None:
            trace.scaled[key] = scaled
            trace.mask[key] = masked
            trace.refined[key] = refined
            trace.attention[key] = sa
            trace.attended[key] = out
    fused, gate = channel_excitation_fuse(
        outs["rgb"], outs["ir"], params.fc1_weight, params.fc1_bias, params.fc2_weight, params.fc2_bias
    )
    if trace is not None:
        trace.excitation = gate
        trace.fused = fused
    return fused, trace
