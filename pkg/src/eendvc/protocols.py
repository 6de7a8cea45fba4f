"""Training and adaptation orchestration.

Three protocol kinds (adult-only, combined, domain-adapt) share one training
loop; three fine-tuning surfaces (frozen encoder, LoRA on the encoder's
feed-forward layers, full encoder update) control which parameters move.
Checkpoint selection keeps the epoch with the lowest validation loss.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import lora
from .audio import read_wav
from .clustering import AHCConfig, WindowResult, cluster, reconcile
from .embeddings import EmbeddingExtractor, extract_local_embeddings, get_extractor
from .encoders import (
    SURFACE_FROZEN,
    SURFACE_FULL,
    SURFACE_LORA,
    EncoderAdapter,
    EncoderCapabilityError,
    get_encoder,
)
from .powerset import PowersetCodec, build_codec
from .segmentation import (
    ConformerConfig,
    SegmentationModel,
    load_checkpoint_payload,
    model_from_payload,
    save_checkpoint,
    segment_window,
    targets_for,
)
from .timeline import Annotation, Segment, load_rttm

logger = logging.getLogger(__name__)

AGE_GROUPS = ("adult", "older-adult", "child-adult")
PROTOCOL_KINDS = ("adult-only", "combined", "domain-adapt")

# Canonical training window/hop pairings in seconds.
_WINDOW_HOPS = {8.0: 6.0, 16.0: 12.0}


class ProtocolError(RuntimeError):
    """Protocol misconfiguration or aborted training run."""


@dataclass(frozen=True)
class ManifestEntry:
    """One recording: audio path, reference path, and dataset tags."""

    uri: str
    audio: Path
    rttm: Path
    dataset: str = "default"
    age_group: str = "adult"

    def __post_init__(self):
        if self.age_group not in AGE_GROUPS:
            raise ValueError(
                f"{self.uri}: age_group must be one of {AGE_GROUPS}, got {self.age_group!r}"
            )


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a JSONL manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    entries = []
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"{path}:{number}: invalid JSON: {exc}") from None
        try:
            entries.append(
                ManifestEntry(
                    uri=record["uri"],
                    audio=(base / record["audio"]).resolve(),
                    rttm=(base / record["rttm"]).resolve(),
                    dataset=record.get("dataset", "default"),
                    age_group=record.get("age_group", "adult"),
                )
            )
        except KeyError as exc:
            raise ProtocolError(f"{path}:{number}: missing field {exc}") from None
    return entries


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    path = Path(path)
    base = path.parent
    lines = []
    for e in entries:
        lines.append(
            json.dumps(
                {
                    "uri": e.uri,
                    "audio": str(Path(e.audio).relative_to(base) if Path(e.audio).is_relative_to(base) else e.audio),
                    "rttm": str(Path(e.rttm).relative_to(base) if Path(e.rttm).is_relative_to(base) else e.rttm),
                    "dataset": e.dataset,
                    "age_group": e.age_group,
                }
            )
        )
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    The canonical window/hop pairings are 8s/6s and 16s/12s for training;
    inference always hops by the full window. Head (Conformer, classifier,
    fusion, projection) parameters train at ``head_lr``; a fully unfrozen
    encoder trains at ``encoder_lr``; LoRA adapters train at the head rate.
    """

    head_lr: float = 1e-3
    encoder_lr: float = 2e-5
    batch_size: int = 16
    epochs: int = 30
    window: float = 8.0
    train_hop: float | None = None
    seed: int = 0
    optimizer: str = "adamw"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.window <= 0:
            raise ValueError(f"window must be positive, got {self.window}")
        if self.optimizer != "adamw":
            raise ValueError(f"only the adamw optimizer is supported, got {self.optimizer!r}")
        hop = self.train_hop
        if hop is None:
            hop = _WINDOW_HOPS.get(self.window, self.window)
            object.__setattr__(self, "train_hop", hop)
        if self.window in _WINDOW_HOPS and hop != _WINDOW_HOPS[self.window]:
            raise ValueError(
                f"{self.window:g}s windows pair with {_WINDOW_HOPS[self.window]:g}s "
                f"training hops, got {hop:g}s"
            )
        if not 0 < hop <= self.window:
            raise ValueError(f"train_hop must lie in (0, window], got {hop}")

    @property
    def inference_hop(self) -> float:
        return self.window


@dataclass(frozen=True)
class LoRAConfig:
    """Low-rank adaptation settings; adapters attach to the encoder's
    feed-forward sublayers with rank-normalized scaling."""

    rank: int = 16
    alpha: float | None = None

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")


@dataclass(frozen=True)
class ProtocolSpec:
    """Which data regime to train under.

    adult-only trains on adult-tagged entries only; combined trains on all
    entries; domain-adapt fine-tunes an adult-only checkpoint on the target
    group's data."""

    kind: str
    train_manifests: tuple[Path, ...]
    val_manifests: tuple[Path, ...] = ()
    init_checkpoint: Path | None = None

    def __post_init__(self):
        if self.kind not in PROTOCOL_KINDS:
            raise ValueError(f"kind must be one of {PROTOCOL_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "train_manifests", tuple(Path(p) for p in self.train_manifests))
        object.__setattr__(self, "val_manifests", tuple(Path(p) for p in self.val_manifests))
        if not self.train_manifests:
            raise ValueError("at least one training manifest is required")
        if self.kind == "domain-adapt" and self.init_checkpoint is None:
            raise ValueError("domain-adapt requires an init_checkpoint")


@dataclass
class EpochRecord:
    """One append-only training-log row."""

    epoch: int
    train_loss: float | None
    val_loss: float
    fusion_weights: list[float]
    trainable_parameters: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    checkpoint_path: Path
    log: list[EpochRecord]
    best_epoch: int


@dataclass
class TrainingWindow:
    """One training example: a fixed-length waveform plus discretized
    reference activity with speakers in sorted-label order."""

    uri: str
    start: float
    waveform: np.ndarray
    activity: np.ndarray


def window_starts(
    duration: float, window: float, hop: float, frame_duration: float = 0.02
) -> list[float]:
    """Window start times: multiples of ``hop`` while at least one frame of
    content remains; the final window may extend past the recording."""
    if window <= 0 or hop <= 0:
        raise ValueError("window and hop must be positive")
    starts = []
    k = 0
    while True:
        start = k * hop
        if duration - start < frame_duration - 1e-9:
            break
        starts.append(start)
        k += 1
    return starts


def _load_recording(entry: ManifestEntry) -> tuple[np.ndarray, Annotation]:
    waveform = read_wav(entry.audio)
    annotations = load_rttm(entry.rttm)
    return waveform, annotations.get(entry.uri, Annotation(entry.uri))


def build_window_set(
    entries: Sequence[ManifestEntry],
    window: float,
    hop: float,
    codec: PowersetCodec,
    sample_rate: int = 16000,
    frame_duration: float = 0.02,
) -> list[TrainingWindow]:
    """Enumerate fixed-length windows over all recordings, deterministically.

    Windows containing more speakers than the codec has slots are dropped
    with a warning; the final partial window of each recording is
    zero-padded to full length."""
    num_samples = int(round(window * sample_rate))
    num_frames = int(round(window / frame_duration))
    windows: list[TrainingWindow] = []
    for entry in entries:
        try:
            waveform, annotation = _load_recording(entry)
        except (OSError, ValueError) as exc:
            logger.warning("skipping unreadable recording %s: %s", entry.uri, exc)
            continue
        duration = waveform.size / sample_rate
        for start in window_starts(duration, window, hop, frame_duration):
            i0 = int(round(start * sample_rate))
            chunk = np.zeros(num_samples, dtype=np.float32)
            available = waveform[i0 : i0 + num_samples]
            chunk[: available.size] = available
            cropped = annotation.crop(Segment(start, start + window))
            labels = cropped.labels()
            if len(labels) > codec.max_speakers:
                logger.warning(
                    "dropping window %s@%.1fs: %d speakers exceed the %d-slot label space",
                    entry.uri,
                    start,
                    len(labels),
                    codec.max_speakers,
                )
                continue
            activity = cropped.discretize(frame_duration, num_frames, labels)
            windows.append(TrainingWindow(entry.uri, start, chunk, activity))
    return windows


def _encode_windows(
    encoder: EncoderAdapter, windows: Sequence[TrainingWindow], sample_rate: int
) -> list[torch.Tensor]:
    with torch.no_grad():
        return [
            encoder.encode_window(w.waveform, sample_rate).detach() for w in windows
        ]


def _batches(order: Sequence[int], batch_size: int) -> Iterable[list[int]]:
    for i in range(0, len(order), batch_size):
        yield list(order[i : i + batch_size])


def _batch_loss(
    model: SegmentationModel,
    stacks: torch.Tensor,
    activities: Sequence[np.ndarray],
    codec: PowersetCodec,
) -> torch.Tensor:
    logits = model(stacks)
    log_probs = F.log_softmax(logits, dim=-1)
    targets = torch.stack(
        [targets_for(log_probs[i], activities[i], codec) for i in range(len(activities))]
    )
    return F.nll_loss(
        log_probs.reshape(-1, log_probs.shape[-1]), targets.reshape(-1), reduction="mean"
    )


def _evaluate(
    model: SegmentationModel,
    encoder: EncoderAdapter,
    windows: Sequence[TrainingWindow],
    codec: PowersetCodec,
    batch_size: int,
    cached_stacks: Sequence[torch.Tensor] | None,
    sample_rate: int,
) -> float:
    """Mean per-frame validation loss, deterministic (dropout off)."""
    was_training = model.training
    model.eval()
    encoder_module = encoder.module()
    encoder_was_training = encoder_module.training if encoder_module is not None else False
    if encoder_module is not None:
        encoder_module.eval()
    total = 0.0
    frames = 0
    with torch.no_grad():
        for batch in _batches(range(len(windows)), batch_size):
            if cached_stacks is not None:
                stacks = torch.stack([cached_stacks[i] for i in batch])
            else:
                stacks = torch.stack(
                    [encoder.encode_window(windows[i].waveform, sample_rate) for i in batch]
                )
            loss = _batch_loss(model, stacks, [windows[i].activity for i in batch], codec)
            batch_frames = stacks.shape[0] * stacks.shape[2]
            total += float(loss) * batch_frames
            frames += batch_frames
    if was_training:
        model.train()
    if encoder_module is not None and encoder_was_training:
        encoder_module.train()
    if frames == 0:
        raise ProtocolError("no validation windows available")
    return total / frames


def _select_entries(protocol: ProtocolSpec, manifests: Sequence[Path]) -> list[ManifestEntry]:
    entries: list[ManifestEntry] = []
    for manifest in manifests:
        entries.extend(load_manifest(manifest))
    if not entries:
        raise ProtocolError("manifest resolution produced no recordings")
    if protocol.kind == "adult-only":
        kept = [e for e in entries if e.age_group == "adult"]
        if len(kept) != len(entries):
            logger.info(
                "adult-only protocol: excluded %d non-adult recordings", len(entries) - len(kept)
            )
        if not kept:
            raise ProtocolError("adult-only protocol found no adult-tagged recordings")
        return kept
    return entries


def _configure_surface(
    encoder: EncoderAdapter,
    surface: str,
    lora_config: LoRAConfig | None,
    train_config: TrainConfig,
    seed: int,
) -> tuple[list[dict[str, Any]], dict[str, Any] | None]:
    """Freeze/unfreeze encoder parameters and build optimizer param groups
    for the encoder side. Returns (extra param groups, lora payload)."""
    support = encoder.list_trainable_surfaces()
    if surface not in support.surfaces:
        raise EncoderCapabilityError(
            f"encoder {encoder.spec.name!r} does not support the {surface!r} surface; "
            f"supported: {sorted(support.surfaces)}"
        )
    module = encoder.module()
    if module is None:
        return [], None
    for param in module.parameters():
        param.requires_grad_(surface == SURFACE_FULL)
    if surface == SURFACE_FULL:
        return [{"params": list(module.parameters()), "lr": train_config.encoder_lr}], None
    if surface == SURFACE_LORA:
        config = lora_config or LoRAConfig()
        names = [t.name for t in support.lora_targets]
        existing = [name for name, _ in lora.adapters(module)]
        if existing:
            # adapting a checkpoint that already carries adapters: keep
            # training them rather than stacking a second set
            names = existing
        else:
            lora.attach(module, names, config.rank, config.alpha, seed=seed)
        params = [p for p in lora.adapter_parameters(module)]
        for param in params:
            param.requires_grad_(True)
        payload = {"rank": config.rank, "alpha": config.alpha, "targets": names}
        return [{"params": params, "lr": train_config.head_lr}], payload
    return [], None


def run_protocol(
    protocol: ProtocolSpec,
    train_config: TrainConfig,
    out_dir: str | Path,
    encoder_name: str = "toy",
    surface: str = SURFACE_FROZEN,
    lora_config: LoRAConfig | None = None,
    codec: PowersetCodec | None = None,
    conformer_config: ConformerConfig | None = None,
    extractor_name: str = "toy",
    sample_rate: int = 16000,
) -> TrainResult:
    """Train under one protocol and persist the best checkpoint plus log.

    The epoch-0 log row records validation loss before any update, so a
    domain-adapt run's starting point equals its init checkpoint's loss on
    the same data. Aborts with a diagnostic on non-finite loss."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    codec = codec or build_codec(4, 2)
    torch.manual_seed(train_config.seed)

    encoder = get_encoder(encoder_name)
    model = SegmentationModel(
        encoder.spec.layer_count, encoder.spec.hidden_size, codec, conformer_config
    )

    if protocol.kind == "domain-adapt":
        loaded = load_pipeline(protocol.init_checkpoint, encoder=encoder)
        if loaded.encoder_name != encoder_name:
            raise ProtocolError(
                f"init checkpoint was trained with encoder {loaded.encoder_name!r}, "
                f"requested {encoder_name!r}"
            )
        model = loaded.model
        encoder = loaded.encoder

    group_seed = train_config.seed
    encoder_groups, lora_payload = _configure_surface(
        encoder, surface, lora_config, train_config, group_seed
    )

    train_entries = _select_entries(protocol, protocol.train_manifests)
    val_manifests = protocol.val_manifests or protocol.train_manifests
    if not protocol.val_manifests:
        logger.info("no validation manifests given; validating on the training data")
    val_entries = _select_entries(protocol, val_manifests)

    hop = train_config.train_hop
    assert hop is not None
    train_windows = build_window_set(
        train_entries, train_config.window, hop, codec, sample_rate
    )
    val_windows = build_window_set(
        val_entries, train_config.window, train_config.window, codec, sample_rate
    )
    if not train_windows:
        raise ProtocolError("no usable training windows after filtering")
    if not val_windows:
        raise ProtocolError("no usable validation windows after filtering")

    frozen_encoder = surface == SURFACE_FROZEN
    train_stacks = _encode_windows(encoder, train_windows, sample_rate) if frozen_encoder else None
    val_stacks = _encode_windows(encoder, val_windows, sample_rate) if frozen_encoder else None

    head_params = list(model.parameters())
    optimizer = torch.optim.AdamW(
        [{"params": head_params, "lr": train_config.head_lr}, *encoder_groups]
    )
    trainable = sum(
        p.numel() for group in optimizer.param_groups for p in group["params"]
    )

    def fusion_weights() -> list[float]:
        return [float(w) for w in model.fusion.weights.detach()]

    encoder_module = encoder.module()

    def snapshot() -> dict[str, Any]:
        state = {"model": copy.deepcopy(model.state_dict())}
        if encoder_module is not None:
            state["encoder"] = copy.deepcopy(encoder_module.state_dict())
        return state

    log: list[EpochRecord] = []
    val0 = _evaluate(model, encoder, val_windows, codec, train_config.batch_size, val_stacks, sample_rate)
    log.append(EpochRecord(0, None, val0, fusion_weights(), trainable))
    best_val, best_epoch, best_state = val0, 0, snapshot()

    rng = np.random.default_rng(train_config.seed)
    for epoch in range(1, train_config.epochs + 1):
        model.train()
        if encoder_module is not None and not frozen_encoder:
            encoder_module.train()
        order = rng.permutation(len(train_windows))
        epoch_loss = 0.0
        epoch_items = 0
        for batch in _batches(order.tolist(), train_config.batch_size):
            if train_stacks is not None:
                stacks = torch.stack([train_stacks[i] for i in batch])
            else:
                stacks = torch.stack(
                    [
                        encoder.encode_window(train_windows[i].waveform, sample_rate)
                        for i in batch
                    ]
                )
            loss = _batch_loss(
                model, stacks, [train_windows[i].activity for i in batch], codec
            )
            if not torch.isfinite(loss):
                raise ProtocolError(
                    f"non-finite training loss at epoch {epoch} "
                    f"(batch of {len(batch)} windows); aborting"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(batch)
            epoch_items += len(batch)
        val = _evaluate(
            model, encoder, val_windows, codec, train_config.batch_size, val_stacks, sample_rate
        )
        log.append(EpochRecord(epoch, epoch_loss / epoch_items, val, fusion_weights(), trainable))
        logger.info("epoch %d: train %.4f val %.4f", epoch, epoch_loss / epoch_items, val)
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch, snapshot()

    model.load_state_dict(best_state["model"])
    if encoder_module is not None and "encoder" in best_state:
        encoder_module.load_state_dict(best_state["encoder"])

    checkpoint_path = out_dir / "checkpoint.pt"
    encoder_state = None
    if encoder_module is not None and surface != SURFACE_FROZEN:
        encoder_state = encoder_module.state_dict()
    save_checkpoint(
        checkpoint_path,
        model,
        encoder_name=encoder_name,
        surface=surface,
        encoder_state=encoder_state,
        lora=lora_payload,
        train_config={**asdict(train_config), "protocol": protocol.kind,
                      "extractor": extractor_name},
    )
    log_path = out_dir / "train_log.jsonl"
    log_path.write_text("".join(json.dumps(r.to_dict()) + "\n" for r in log))
    return TrainResult(checkpoint_path, log, best_epoch)


@dataclass
class LoadedPipeline:
    """A checkpoint rebuilt into a runnable encoder + model pair."""

    model: SegmentationModel
    encoder: EncoderAdapter
    codec: PowersetCodec
    encoder_name: str
    surface: str
    train_config: dict[str, Any]


def load_pipeline(
    path: str | Path, encoder: EncoderAdapter | None = None
) -> LoadedPipeline:
    payload = load_checkpoint_payload(path)
    encoder = encoder or get_encoder(payload["encoder_name"])
    module = encoder.module()
    if payload.get("lora") and module is not None:
        spec = payload["lora"]
        lora.attach(module, spec["targets"], spec["rank"], spec.get("alpha"))
    if payload.get("encoder_state") is not None:
        if module is None:
            raise ProtocolError(
                "checkpoint carries encoder weights but the encoder has no parameters"
            )
        module.load_state_dict(payload["encoder_state"])
    model = model_from_payload(payload)
    model.eval()
    if module is not None:
        module.eval()
    return LoadedPipeline(
        model,
        encoder,
        model.codec,
        payload["encoder_name"],
        payload["surface"],
        payload.get("train_config") or {},
    )


def evaluate_checkpoint(
    path: str | Path,
    entries: Sequence[ManifestEntry],
    window: float | None = None,
    batch_size: int = 16,
    sample_rate: int = 16000,
) -> float:
    """Validation loss of a stored checkpoint on the given recordings."""
    pipeline = load_pipeline(path)
    window = window or float(pipeline.train_config.get("window", 8.0))
    windows = build_window_set(entries, window, window, pipeline.codec, sample_rate)
    if not windows:
        raise ProtocolError("no usable evaluation windows")
    return _evaluate(
        pipeline.model, pipeline.encoder, windows, pipeline.codec, batch_size, None, sample_rate
    )


def infer_recording(
    pipeline: LoadedPipeline | str | Path,
    waveform: np.ndarray,
    uri: str = "recording",
    ahc_config: AHCConfig | None = None,
    extractor: EmbeddingExtractor | None = None,
    window: float | None = None,
    hop: float | None = None,
    sample_rate: int = 16000,
    frame_duration: float = 0.02,
) -> Annotation:
    """Diarize one recording: windowed segmentation, embedding extraction,
    clustering, and reconciliation into a global annotation.

    Inference hops by the full window unless overridden. A recording whose
    windows yield no embeddings (e.g. silence) returns an empty annotation."""
    if not isinstance(pipeline, LoadedPipeline):
        pipeline = load_pipeline(pipeline)
    window = window or float(pipeline.train_config.get("window", 8.0))
    hop = hop or window
    extractor = extractor or get_extractor(
        pipeline.train_config.get("extractor", "toy")
    )
    pipeline.model.eval()

    num_samples = int(round(window * sample_rate))
    duration = np.asarray(waveform).size / sample_rate
    results: list[WindowResult] = []
    with torch.no_grad():
        for index, start in enumerate(window_starts(duration, window, hop, frame_duration)):
            i0 = int(round(start * sample_rate))
            chunk = np.zeros(num_samples, dtype=np.float32)
            available = np.asarray(waveform, dtype=np.float32)[i0 : i0 + num_samples]
            chunk[: available.size] = available
            stack = pipeline.encoder.encode_window(chunk, sample_rate)
            output = segment_window(stack, pipeline.model, frame_duration)
            embeddings = extract_local_embeddings(chunk, output, extractor, index)
            results.append(
                WindowResult(index, output.decoded_activity, frame_duration, embeddings)
            )
    all_embeddings = [e for r in results for e in r.embeddings]
    if not all_embeddings:
        return Annotation(uri)
    assignment = cluster(all_embeddings, ahc_config or AHCConfig())
    return reconcile(results, assignment, window, hop, uri=uri)
