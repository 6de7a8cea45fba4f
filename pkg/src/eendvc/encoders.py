"""Speech encoder adapters.

Every adapter exposes per-layer hidden representations ("layer stacks") at a
common 20 ms frame rate, regardless of the underlying model family, so the
segmentation network stays encoder-agnostic. Two deterministic toy encoders
ship for tests and desk-scale runs; Whisper- and WavLM-family adapters load
external weights lazily and are never required by the rest of the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .features import N_MELS, mel_magnitudes

SURFACE_FROZEN = "frozen"
SURFACE_LORA = "lora"
SURFACE_FULL = "full"

DEFAULT_FRAME_DURATION = 0.02
DEFAULT_SAMPLE_RATE = 16000


class EncoderInputError(ValueError):
    """Waveform violates the adapter's input contract."""


class EncoderCapabilityError(RuntimeError):
    """Requested training surface not supported by this encoder."""


class EncoderLoadError(RuntimeError):
    """External encoder weights could not be loaded."""


@dataclass(frozen=True)
class EncoderSpec:
    """Static description of an encoder adapter."""

    name: str
    layer_count: int
    hidden_size: int
    frame_duration: float = DEFAULT_FRAME_DURATION
    sample_rate: int = DEFAULT_SAMPLE_RATE
    fixed_input_seconds: float | None = None

    def __post_init__(self):
        if self.layer_count < 1:
            raise ValueError(f"layer_count must be >= 1, got {self.layer_count}")
        if self.hidden_size < 1:
            raise ValueError(f"hidden_size must be >= 1, got {self.hidden_size}")
        if self.frame_duration <= 0:
            raise ValueError(f"frame_duration must be positive, got {self.frame_duration}")

    def num_frames(self, num_samples: int) -> int:
        """Output frame count for a window of ``num_samples`` samples.

        Depends only on the window length, never on waveform content."""
        samples_per_frame = self.frame_duration * self.sample_rate
        return max(1, math.ceil(num_samples / samples_per_frame))


@dataclass(frozen=True)
class LoraTarget:
    """One weight matrix eligible for low-rank adaptation."""

    name: str
    out_features: int
    in_features: int


@dataclass(frozen=True)
class SurfaceSupport:
    """Training surfaces an encoder can serve, with LoRA attachment points."""

    surfaces: frozenset[str]
    lora_targets: tuple[LoraTarget, ...] = field(default_factory=tuple)


class EncoderAdapter:
    """Base adapter: input validation, fixed-input padding, truncation.

    Subclasses implement ``_encode`` over a full-length waveform and return
    a (layers, frames, hidden) tensor; the base class truncates it to the
    frame count implied by the original window length.
    """

    spec: EncoderSpec

    def encode_window(self, waveform: np.ndarray, sample_rate: int) -> torch.Tensor:
        waveform = self._validate(waveform, sample_rate)
        target_frames = self.spec.num_frames(waveform.size)
        if self.spec.fixed_input_seconds is not None:
            fixed = int(round(self.spec.fixed_input_seconds * self.spec.sample_rate))
            if waveform.size > fixed:
                raise EncoderInputError(
                    f"window of {waveform.size} samples exceeds the fixed "
                    f"{self.spec.fixed_input_seconds}s receptive window"
                )
            padded = np.zeros(fixed, dtype=np.float32)
            padded[: waveform.size] = waveform
            waveform = padded
        stack = self._encode(waveform)
        if stack.shape[0] != self.spec.layer_count or stack.shape[2] != self.spec.hidden_size:
            raise RuntimeError(
                f"adapter produced stack of shape {tuple(stack.shape)}, "
                f"spec promises ({self.spec.layer_count}, *, {self.spec.hidden_size})"
            )
        if stack.shape[1] < target_frames:
            raise RuntimeError(
                f"adapter produced {stack.shape[1]} frames, expected >= {target_frames}"
            )
        return stack[:, :target_frames]

    def list_trainable_surfaces(self) -> SurfaceSupport:
        raise NotImplementedError

    def module(self) -> nn.Module | None:
        """Torch module holding the encoder parameters, if any."""
        return None

    def _encode(self, waveform: np.ndarray) -> torch.Tensor:
        raise NotImplementedError

    def _validate(self, waveform: np.ndarray, sample_rate: int) -> np.ndarray:
        if sample_rate != self.spec.sample_rate:
            raise EncoderInputError(
                f"{self.spec.name} expects {self.spec.sample_rate} Hz audio, "
                f"got {sample_rate} Hz"
            )
        waveform = np.asarray(waveform, dtype=np.float32)
        if waveform.ndim != 1 or waveform.size == 0:
            raise EncoderInputError(f"expected non-empty 1-D waveform, got shape {waveform.shape}")
        if not np.isfinite(waveform).all():
            raise EncoderInputError("waveform contains non-finite samples")
        return waveform


class ToyFilterbankEncoder(EncoderAdapter):
    """Deterministic mel-filterbank encoder with seeded pseudo layers.

    Linear end to end (windowed magnitude mel energies through fixed seeded
    bias-free projections), so silence maps to an all-zero stack, and
    byte-identical inputs give byte-identical outputs. Has no trainable
    parameters; only the frozen surface applies.
    """

    def __init__(
        self,
        layer_count: int = 4,
        hidden_size: int = 32,
        seed: int = 7351,
        fixed_input_seconds: float | None = None,
    ):
        self.spec = EncoderSpec(
            "toy", layer_count, hidden_size, fixed_input_seconds=fixed_input_seconds
        )
        rng = np.random.default_rng(seed)
        self._maps = (
            rng.standard_normal((layer_count, N_MELS, hidden_size)) / math.sqrt(N_MELS)
        ).astype(np.float32)

    def _encode(self, waveform: np.ndarray) -> torch.Tensor:
        feats = mel_magnitudes(waveform).astype(np.float32)
        stack = np.einsum("tm,lmd->ltd", feats, self._maps)
        return torch.from_numpy(stack)

    def list_trainable_surfaces(self) -> SurfaceSupport:
        return SurfaceSupport(frozenset({SURFACE_FROZEN}))


class _ToyTransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, ff_hidden: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm_ff = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, ff_hidden)
        self.fc2 = nn.Linear(ff_hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        attn_in = self.norm_attn(x)
        attn_out, _ = self.attn(attn_in, attn_in, attn_in, need_weights=False)
        x = x + attn_out
        return x + self.fc2(torch.nn.functional.gelu(self.fc1(self.norm_ff(x))))


class _ToyTransformerModule(nn.Module):
    def __init__(self, dim: int, num_blocks: int, num_heads: int, ff_hidden: int):
        super().__init__()
        self.embed = nn.Linear(N_MELS, dim)
        self.blocks = nn.ModuleList(
            _ToyTransformerBlock(dim, num_heads, ff_hidden) for _ in range(num_blocks)
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = self.embed(features)
        layers = [x]
        for block in self.blocks:
            x = block(x)
            layers.append(x)
        return torch.stack(layers)


class ToyTransformerEncoder(EncoderAdapter):
    """Small seeded transformer over mel features; supports all surfaces.

    Exists so that LoRA attachment, full fine-tuning, and frozen-encoder
    contracts can be exercised without external weights.
    """

    def __init__(
        self,
        num_blocks: int = 2,
        hidden_size: int = 32,
        num_heads: int = 2,
        ff_hidden: int = 64,
        seed: int = 911,
    ):
        self.spec = EncoderSpec("toy-transformer", num_blocks + 1, hidden_size)
        self._ff_hidden = ff_hidden
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self._module = _ToyTransformerModule(hidden_size, num_blocks, num_heads, ff_hidden)

    def module(self) -> nn.Module:
        return self._module

    def _encode(self, waveform: np.ndarray) -> torch.Tensor:
        feats = torch.from_numpy(mel_magnitudes(waveform).astype(np.float32))
        return self._module(feats)

    def list_trainable_surfaces(self) -> SurfaceSupport:
        targets = []
        for i in range(len(self._module.blocks)):
            targets.append(
                LoraTarget(f"blocks.{i}.fc1", self._ff_hidden, self.spec.hidden_size)
            )
            targets.append(
                LoraTarget(f"blocks.{i}.fc2", self.spec.hidden_size, self._ff_hidden)
            )
        return SurfaceSupport(
            frozenset({SURFACE_FROZEN, SURFACE_LORA, SURFACE_FULL}), tuple(targets)
        )


# name -> (transformer blocks, hidden size); feed-forward hidden is 4x hidden
# for both families. Layer stacks include the pre-block embedding output.
_WHISPER_VARIANTS = {
    "whisper-base": (6, 512),
    "whisper-small": (12, 768),
    "whisper-medium": (24, 1024),
}
_WAVLM_VARIANTS = {
    "wavlm-base-plus": (12, 768),
    "wavlm-large": (24, 1024),
    "wavlm-diarizen": (24, 1024),
}
_HF_DEFAULT_SOURCES = {
    "whisper-base": "openai/whisper-base",
    "whisper-small": "openai/whisper-small",
    "whisper-medium": "openai/whisper-medium",
    "wavlm-base-plus": "microsoft/wavlm-base-plus",
    "wavlm-large": "microsoft/wavlm-large",
    "wavlm-diarizen": "BUT-FIT/diarizen-wavlm-large-s80-md-v2",
}


class _PretrainedEncoder(EncoderAdapter):
    """Shared behavior for externally trained transformer encoders.

    Surface enumeration works from static architecture metadata; the actual
    weights load lazily from a local path or model-hub identifier on the
    first encode call.
    """

    def __init__(self, name: str, blocks: int, hidden: int, source: str | None,
                 fixed_input_seconds: float | None):
        self.spec = EncoderSpec(
            name, blocks + 1, hidden, fixed_input_seconds=fixed_input_seconds
        )
        self._blocks = blocks
        self._source = source or _HF_DEFAULT_SOURCES[name]
        self._model = None

    def list_trainable_surfaces(self) -> SurfaceSupport:
        return SurfaceSupport(
            frozenset({SURFACE_FROZEN, SURFACE_LORA, SURFACE_FULL}),
            tuple(self._lora_targets()),
        )

    def module(self) -> nn.Module | None:
        return self._model

    def _lora_targets(self) -> list[LoraTarget]:
        raise NotImplementedError

    def _load_error(self, exc: Exception) -> EncoderLoadError:
        return EncoderLoadError(
            f"could not load {self.spec.name} weights from {self._source!r}: {exc}. "
            "Point the encoder at a local checkout of the weights or install the "
            "'transformers' package with hub access."
        )


class WhisperEncoder(_PretrainedEncoder):
    """Whisper-family encoder; fixed 30 s receptive window, 20 ms frames.

    Shorter analysis windows are zero-padded to 30 s before encoding and the
    layer stack is truncated back to the window's frame count."""

    def __init__(self, name: str, source: str | None = None):
        blocks, hidden = _WHISPER_VARIANTS[name]
        super().__init__(name, blocks, hidden, source, fixed_input_seconds=30.0)

    def _lora_targets(self) -> list[LoraTarget]:
        d = self.spec.hidden_size
        targets = []
        for i in range(self._blocks):
            targets.append(LoraTarget(f"layers.{i}.fc1", 4 * d, d))
            targets.append(LoraTarget(f"layers.{i}.fc2", d, 4 * d))
        return targets

    def _load(self):
        if self._model is None:
            try:
                from transformers import WhisperFeatureExtractor, WhisperModel
            except ImportError as exc:  # pragma: no cover - environment dependent
                raise self._load_error(exc) from None
            try:
                self._extractor = WhisperFeatureExtractor.from_pretrained(self._source)
                self._model = WhisperModel.from_pretrained(self._source).encoder.eval()
            except Exception as exc:  # pragma: no cover - environment dependent
                raise self._load_error(exc) from None
        return self._model

    def _encode(self, waveform: np.ndarray) -> torch.Tensor:  # pragma: no cover
        model = self._load()
        feats = self._extractor(
            waveform, sampling_rate=self.spec.sample_rate, return_tensors="pt"
        )
        out = model(feats.input_features, output_hidden_states=True)
        return torch.stack(out.hidden_states)[:, 0]


class WavLMEncoder(_PretrainedEncoder):
    """WavLM-family encoder; raw-waveform input, 20 ms frames."""

    def __init__(self, name: str, source: str | None = None):
        blocks, hidden = _WAVLM_VARIANTS[name]
        super().__init__(name, blocks, hidden, source, fixed_input_seconds=None)

    def _lora_targets(self) -> list[LoraTarget]:
        d = self.spec.hidden_size
        targets = []
        for i in range(self._blocks):
            targets.append(
                LoraTarget(f"encoder.layers.{i}.feed_forward.intermediate_dense", 4 * d, d)
            )
            targets.append(
                LoraTarget(f"encoder.layers.{i}.feed_forward.output_dense", d, 4 * d)
            )
        return targets

    def _load(self):
        if self._model is None:
            try:
                from transformers import WavLMModel
            except ImportError as exc:  # pragma: no cover - environment dependent
                raise self._load_error(exc) from None
            try:
                self._model = WavLMModel.from_pretrained(self._source).eval()
            except Exception as exc:  # pragma: no cover - environment dependent
                raise self._load_error(exc) from None
        return self._model

    def _encode(self, waveform: np.ndarray) -> torch.Tensor:  # pragma: no cover
        model = self._load()
        # The conv front end has a 400-sample receptive field; pad so the
        # stack covers at least the window's nominal frame count.
        padded = np.zeros(waveform.size + 720, dtype=np.float32)
        padded[: waveform.size] = waveform
        out = model(
            torch.from_numpy(padded)[None], output_hidden_states=True
        )
        return torch.stack(out.hidden_states)[:, 0]


def available_encoders() -> tuple[str, ...]:
    return ("toy", "toy-transformer") + tuple(_WHISPER_VARIANTS) + tuple(_WAVLM_VARIANTS)


def get_encoder(name: str, **kwargs) -> EncoderAdapter:
    """Build an encoder adapter by name.

    Extra keyword arguments go to the adapter constructor (e.g. ``source``
    for a local weight path, ``seed`` for the toy encoders)."""
    if name == "toy":
        return ToyFilterbankEncoder(**kwargs)
    if name == "toy-transformer":
        return ToyTransformerEncoder(**kwargs)
    if name in _WHISPER_VARIANTS:
        return WhisperEncoder(name, **kwargs)
    if name in _WAVLM_VARIANTS:
        return WavLMEncoder(name, **kwargs)
    raise ValueError(
        f"unknown encoder {name!r}; available: {', '.join(available_encoders())}"
    )
