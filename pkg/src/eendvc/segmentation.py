"""Local segmentation network: learnable layer fusion over an encoder layer
stack, a Conformer, and a linear powerset classification head.

The network maps a (layers, frames, hidden) stack to per-frame class
probabilities over speaker subsets; frame count is preserved end to end.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .powerset import PowersetCodec, assign_slots, build_codec, decode_frames
from .timeline import Annotation

CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteActivationError(RuntimeError):
    """Non-finite values appeared in the forward pass; names the stage."""

    def __init__(self, stage: str):
        super().__init__(f"non-finite activations after {stage}")
        self.stage = stage


@dataclass(frozen=True)
class ConformerConfig:
    """Conformer hyperparameters; defaults match the segmentation recipe
    (4 blocks, 256/1024 feed-forward dims, 4 heads, kernel 31, dropout 0.1)."""

    num_layers: int = 4
    dim: int = 256
    ff_hidden: int = 1024
    num_heads: int = 4
    conv_kernel: int = 31
    dropout: float = 0.1

    def __post_init__(self):
        if self.dim % self.num_heads != 0:
            raise ValueError(
                f"dim {self.dim} must be divisible by num_heads {self.num_heads}"
            )
        if self.conv_kernel % 2 != 1:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")


class LayerFusion(nn.Module):
    """Learnable softmax-weighted sum over encoder layers.

    Logits start at zero (uniform fusion). The effective weights are
    non-negative and sum to one by construction.
    """

    def __init__(self, num_layers: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(num_layers))

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=0)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        if stack.shape[-3] != self.logits.shape[0]:
            raise ValueError(
                f"stack has {stack.shape[-3]} layers, fusion expects "
                f"{self.logits.shape[0]}"
            )
        weights = self.weights
        if stack.dim() == 3:
            return torch.einsum("l,ltd->td", weights, stack)
        if stack.dim() == 4:
            return torch.einsum("l,bltd->btd", weights, stack)
        raise ValueError(f"expected 3-D or 4-D stack, got {stack.dim()}-D")


class _FeedForward(nn.Module):
    def __init__(self, config: ConformerConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(config.dim),
            nn.Linear(config.dim, config.ff_hidden),
            nn.SiLU(),
            nn.Dropout(config.dropout),
            nn.Linear(config.ff_hidden, config.dim),
            nn.Dropout(config.dropout),
        )

    def forward(self, x):
        return self.net(x)


class _ConvModule(nn.Module):
    def __init__(self, config: ConformerConfig):
        super().__init__()
        d = config.dim
        self.norm = nn.LayerNorm(d)
        self.pointwise_in = nn.Conv1d(d, 2 * d, kernel_size=1)
        self.depthwise = nn.Conv1d(
            d, d, kernel_size=config.conv_kernel, padding=config.conv_kernel // 2, groups=d
        )
        self.channel_norm = nn.GroupNorm(1, d)
        self.pointwise_out = nn.Conv1d(d, d, kernel_size=1)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x):
        y = self.norm(x).transpose(1, 2)
        y = F.glu(self.pointwise_in(y), dim=1)
        y = F.silu(self.channel_norm(self.depthwise(y)))
        y = self.dropout(self.pointwise_out(y))
        return y.transpose(1, 2)


class ConformerBlock(nn.Module):
    """Half-step feed-forward sandwich: FF/2, self-attention, conv, FF/2."""

    def __init__(self, config: ConformerConfig):
        super().__init__()
        self.ff1 = _FeedForward(config)
        self.norm_attn = nn.LayerNorm(config.dim)
        self.attn = nn.MultiheadAttention(
            config.dim, config.num_heads, dropout=config.dropout, batch_first=True
        )
        self.attn_dropout = nn.Dropout(config.dropout)
        self.conv = _ConvModule(config)
        self.ff2 = _FeedForward(config)
        self.norm_out = nn.LayerNorm(config.dim)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        attn_in = self.norm_attn(x)
        attn_out, _ = self.attn(attn_in, attn_in, attn_in, need_weights=False)
        x = x + self.attn_dropout(attn_out)
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.norm_out(x)


class SegmentationModel(nn.Module):
    """Fusion, optional input projection, Conformer blocks, powerset head."""

    def __init__(
        self,
        num_input_layers: int,
        input_dim: int,
        codec: PowersetCodec,
        config: ConformerConfig | None = None,
    ):
        super().__init__()
        self.config = config or ConformerConfig()
        self.codec = codec
        self.num_input_layers = num_input_layers
        self.input_dim = input_dim
        self.fusion = LayerFusion(num_input_layers)
        if input_dim != self.config.dim:
            self.project: nn.Module = nn.Linear(input_dim, self.config.dim)
        else:
            self.project = nn.Identity()
        self.blocks = nn.ModuleList(
            ConformerBlock(self.config) for _ in range(self.config.num_layers)
        )
        self.head = nn.Linear(self.config.dim, codec.num_classes)

    @staticmethod
    def _ensure_finite(x: torch.Tensor, stage: str) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise NonFiniteActivationError(stage)
        return x

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        """Logits of shape (batch, frames, classes); accepts a single
        (layers, frames, hidden) stack and returns (frames, classes)."""
        squeeze = stack.dim() == 3
        if squeeze:
            stack = stack.unsqueeze(0)
        if stack.dim() != 4:
            raise ValueError(f"expected (batch, layers, frames, hidden) stack, got {stack.dim()}-D")
        if stack.shape[3] != self.input_dim:
            raise ValueError(
                f"stack hidden size {stack.shape[3]} does not match model input "
                f"dim {self.input_dim}"
            )
        x = self._ensure_finite(self.fusion(stack), "layer fusion")
        x = self._ensure_finite(self.project(x), "input projection")
        for i, block in enumerate(self.blocks):
            x = self._ensure_finite(block(x), f"conformer block {i}")
        logits = self._ensure_finite(self.head(x), "classification head")
        return logits.squeeze(0) if squeeze else logits


@dataclass(frozen=True)
class SegmentationOutput:
    """One window's per-frame class distribution and its decoding.

    ``log_probs`` stays attached to the autograd graph so losses computed
    from it differentiate through the model."""

    log_probs: torch.Tensor
    codec: PowersetCodec
    frame_duration: float = 0.02

    @property
    def num_frames(self) -> int:
        return self.log_probs.shape[0]

    @property
    def class_distribution(self) -> np.ndarray:
        """Row-stochastic probabilities, detached, shape (frames, classes)."""
        return torch.exp(self.log_probs).detach().cpu().numpy()

    @property
    def decoded_activity(self) -> np.ndarray:
        """Per-frame argmax decoding, shape (frames, max_speakers).

        Ties resolve to the lowest class index."""
        best = self.log_probs.detach().argmax(dim=-1).cpu().numpy()
        return decode_frames(best, self.codec)


def segment_window(
    stack: torch.Tensor, model: SegmentationModel, frame_duration: float = 0.02
) -> SegmentationOutput:
    """Run one (layers, frames, hidden) stack through the model.

    Deterministic in evaluation mode; call ``model.eval()`` first for
    inference. Gradients flow if the surrounding context allows them."""
    logits = model(stack)
    if logits.dim() != 2:
        raise ValueError("segment_window expects a single unbatched stack")
    return SegmentationOutput(F.log_softmax(logits, dim=-1), model.codec, frame_duration)


def targets_for(
    log_probs: torch.Tensor, reference_activity: np.ndarray, codec: PowersetCodec
) -> torch.Tensor:
    """Per-frame class targets under the loss-minimizing slot injection."""
    probs = torch.exp(log_probs.detach()).cpu().numpy()
    _, targets = assign_slots(reference_activity, probs, codec)
    return torch.from_numpy(targets)


def powerset_loss(
    output: SegmentationOutput, reference: Annotation, codec: PowersetCodec
) -> torch.Tensor:
    """Mean per-frame cross-entropy against the best slot assignment.

    ``reference`` must already be cropped to the window (times relative to
    the window start). Differentiable w.r.t. the model parameters behind
    ``output.log_probs``."""
    if codec.classes != output.codec.classes:
        raise ValueError("codec does not match the one that produced the output")
    order = reference.labels()
    activity = reference.discretize(output.frame_duration, output.num_frames, order)
    targets = targets_for(output.log_probs, activity, codec)
    return F.nll_loss(output.log_probs, targets, reduction="mean")


def save_checkpoint(
    path: str | Path,
    model: SegmentationModel,
    encoder_name: str,
    surface: str,
    encoder_state: dict[str, torch.Tensor] | None = None,
    lora: dict[str, Any] | None = None,
    train_config: dict[str, Any] | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    """Self-describing checkpoint archive with a format-version field."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "conformer": asdict(model.config),
        "codec": {
            "max_speakers": model.codec.max_speakers,
            "max_concurrent": model.codec.max_concurrent,
        },
        "encoder_name": encoder_name,
        "surface": surface,
        "num_input_layers": model.num_input_layers,
        "input_dim": model.input_dim,
        "model_state": model.state_dict(),
        "encoder_state": encoder_state,
        "lora": lora,
        "train_config": train_config,
        "extra": extra or {},
    }
    torch.save(payload, str(path))


def load_checkpoint_payload(path: str | Path) -> dict[str, Any]:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format version {version!r}; "
            f"this build reads version {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload


def model_from_payload(payload: dict[str, Any]) -> SegmentationModel:
    codec = build_codec(
        payload["codec"]["max_speakers"], payload["codec"]["max_concurrent"]
    )
    model = SegmentationModel(
        payload["num_input_layers"],
        payload["input_dim"],
        codec,
        ConformerConfig(**payload["conformer"]),
    )
    model.load_state_dict(payload["model_state"])
    return model
