"""Two-phase training: language-graph pretraining by sentence reconstruction,
then joint training of the visual graph, mapper, decoder, and grounding head
with the language side frozen. Also: the Adam step, checkpoint I/O, and the
finite-difference gradient audit.
"""

from __future__ import annotations

import copy
import hashlib
import io
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from . import metrics
from .dataset import Dataset, VideoSample
from .errors import ConfigError, CorruptionError, DivergenceError, NonFiniteGradientError, VersionError
from .model import (DESK_DIMS, PAPER_DIMS, PHASE_FULL, PHASE_LANGUAGE, ClipTensors,
                    GroundedCaptioner, ModelDims, next_token_accuracy, video_tensors)

LANGUAGE_NAMESPACE = "graph_encoder.language."


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "desk"
    learning_rate: float = 1e-3
    batch_size: int = 8  # videos per optimizer step
    max_epochs: int = 300
    lambda_m: float = 1.0
    lambda_l: float = 1.0
    lambda_r: float = 1.0
    seed: int = 0
    grad_clip: float = 5.0
    eval_every: int = 5  # epochs between validation-CIDEr evaluations
    patience: int = 10  # evaluations without improvement before stopping
    target_accuracy: Optional[float] = 0.995  # pretraining accuracy stop
    validation_split: str = "train"
    dims: ModelDims = DESK_DIMS

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        if name == "desk":
            config = cls()
        elif name == "paper":
            config = cls(preset="paper", learning_rate=1.25e-4, batch_size=64,
                         max_epochs=40, dims=PAPER_DIMS, validation_split="val",
                         target_accuracy=None)
        else:
            raise ConfigError(f"unknown preset {name!r}")
        config = replace(config, **overrides)
        config.validate()
        return config

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("batch_size", "max_epochs", "eval_every", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lambda_m", "lambda_l", "lambda_r", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerState:
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


def optimize_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[Tensor]],
                  state: OptimizerState, lr: float,
                  betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One Adam update with bias correction, in place on the parameters."""
    for name, grad in grads.items():
        if grad is not None and not torch.isfinite(grad).all():
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    state.step += 1
    beta1, beta2 = betas
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                grad = torch.zeros_like(param)
            m = state.first.setdefault(name, torch.zeros_like(param))
            v = state.second.setdefault(name, torch.zeros_like(param))
            m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
            param.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))


def _clip_gradients(grads: Sequence[Optional[Tensor]], max_norm: float):
    present = [g for g in grads if g is not None]
    if not present or max_norm <= 0:
        return list(grads)
    total = torch.sqrt(sum((g ** 2).sum() for g in present))
    if total > max_norm:
        scale = max_norm / total
        return [g * scale if g is not None else None for g in grads]
    return list(grads)


# ---------------------------------------------------------------------------
# Loss aggregation


def batch_losses(model: GroundedCaptioner, batch: Sequence[Sequence[ClipTensors]],
                 phase: str, config: TrainConfig) -> dict:
    """Mean caption/mapping losses per clip and grounding losses per
    annotation over a batch of videos, plus the combined objective."""
    per_video = [model.video_losses(cts, phase, config.lambda_l, config.lambda_r)
                 for cts in batch]
    n_clips = sum(v.n_clips for v in per_video)
    n_ann = max(sum(v.n_annotations for v in per_video), 1)
    zero = model.decoder.word_head.weight.new_zeros(())
    l_s = sum((v.caption_nll for v in per_video), zero) / max(n_clips, 1)
    l_m = sum((v.mapping for v in per_video), zero) / max(n_clips, 1)
    l_r = sum((v.attention for v in per_video), zero) / n_ann
    l_g = sum((v.grounding for v in per_video), zero) / n_ann
    total = l_s + l_g + (config.lambda_m * l_m if phase == PHASE_FULL else zero)
    return {"L_S": l_s, "L_M": l_m, "L_R": l_r, "L_G": l_g, "total": total,
            "n_tokens": sum(v.n_tokens for v in per_video),
            "n_correct": sum(v.n_correct_tokens for v in per_video)}


def _trainable_params(model: GroundedCaptioner) -> dict:
    return {name: p for name, p in model.named_parameters() if p.requires_grad}


def _run_epoch(model, videos, phase, config, params, opt_state, rng) -> dict:
    order = rng.permutation(len(videos))
    sums = {key: 0.0 for key in ("L_S", "L_M", "L_R", "L_G", "total")}
    correct = tokens = 0
    n_batches = 0
    names = list(params)
    for start in range(0, len(videos), config.batch_size):
        batch = [videos[i] for i in order[start:start + config.batch_size]]
        losses = batch_losses(model, batch, phase, config)
        if not torch.isfinite(losses["total"]):
            raise DivergenceError(f"non-finite loss at optimizer step {opt_state.step}")
        grads = torch.autograd.grad(losses["total"], [params[n] for n in names],
                                    allow_unused=True)
        grads = _clip_gradients(grads, config.grad_clip)
        optimize_step(params, dict(zip(names, grads)), opt_state, config.learning_rate)
        for key in sums:
            sums[key] += float(losses[key].detach())
        correct += losses["n_correct"]
        tokens += losses["n_tokens"]
        n_batches += 1
    record = {key: sums[key] / n_batches for key in sums}
    record["accuracy"] = correct / tokens if tokens else 0.0
    return record


def language_block_hash(model: GroundedCaptioner) -> str:
    """SHA-256 over the language-side parameter bytes, in name order."""
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        if name.startswith(LANGUAGE_NAMESPACE):
            digest.update(name.encode())
            digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def pretrain_language_gcn(model: GroundedCaptioner, dataset: Dataset,
                          config: TrainConfig,
                          log: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Phase 1: train language GCN + decoder + grounding by reconstructing
    each sentence from its language scene graph."""
    videos = [video_tensors(v) for v in dataset.split("train")]
    params = {name: p for name, p in _trainable_params(model).items()
              if not name.startswith(("graph_encoder.visual.", "graph_encoder.mapper."))}
    opt_state = OptimizerState()
    rng = np.random.default_rng(config.seed)
    records = []
    best_total = float("inf")
    stall = 0
    for epoch in range(config.max_epochs):
        record = _run_epoch(model, videos, PHASE_LANGUAGE, config, params, opt_state, rng)
        record.update(phase="pretrain", epoch=epoch)
        records.append(record)
        if log:
            log(record)
        if record["total"] < best_total - 1e-9:
            best_total = record["total"]
            stall = 0
        else:
            stall += 1
        if config.target_accuracy is not None and record["accuracy"] >= config.target_accuracy:
            break
        if stall >= config.patience:
            break
    return records


def validation_cider(model: GroundedCaptioner, videos: Sequence[VideoSample],
                     vocab) -> float:
    candidates = []
    references = []
    for video in videos:
        cts = video_tensors(video)
        for generated in model.generate_video(cts):
            candidates.append([vocab.words[t] for t in generated.tokens])
            references.append([[vocab.words[t] for t in generated.clip.sentence]])
    if len(candidates) < 2:
        return 0.0
    return metrics.cider(candidates, references)


def train_full(model: GroundedCaptioner, dataset: Dataset, config: TrainConfig,
               log: Optional[Callable[[dict], None]] = None) -> tuple[list[dict], dict]:
    """Phase 2: freeze the language GCN, train everything else jointly.

    Returns the epoch records and the best-validation-CIDEr state dict.
    """
    for name, param in model.named_parameters():
        if name.startswith(LANGUAGE_NAMESPACE):
            param.requires_grad_(False)
    videos = [video_tensors(v) for v in dataset.split("train")]
    val_videos = dataset.split(config.validation_split) or dataset.split("train")
    params = _trainable_params(model)
    opt_state = OptimizerState()
    rng = np.random.default_rng(config.seed + 1)
    records = []
    best_cider = float("-inf")
    best_state = copy.deepcopy(model.state_dict())
    stall = 0
    for epoch in range(config.max_epochs):
        record = _run_epoch(model, videos, PHASE_FULL, config, params, opt_state, rng)
        record.update(phase="full", epoch=epoch, language_hash=language_block_hash(model))
        if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.max_epochs:
            score = validation_cider(model, val_videos, dataset.vocab)
            record["val_cider"] = score
            if score > best_cider + 1e-12:
                best_cider = score
                best_state = copy.deepcopy(model.state_dict())
                stall = 0
            else:
                stall += 1
        records.append(record)
        if log:
            log(record)
        if stall >= config.patience:
            break
    return records, best_state


def build_model(dataset: Dataset, config: TrainConfig) -> GroundedCaptioner:
    return GroundedCaptioner(dataset.vocab, config.dims,
                             region_dim=dataset.config.region_dim,
                             frame_dim=dataset.config.frame_dim, seed=config.seed)


@dataclass
class TrainResult:
    model: GroundedCaptioner  # loaded with the best-validation-CIDEr state
    pretrain_records: list
    full_records: list
    best_state: dict
    final_state: dict  # last-epoch weights


def run_training(dataset: Dataset, config: TrainConfig,
                 log: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """The full two-phase schedule on one dataset; single-threaded for
    reproducibility."""
    torch.set_num_threads(1)
    model = build_model(dataset, config)
    pre = pretrain_language_gcn(model, dataset, config, log)
    full, best_state = train_full(model, dataset, config, log)
    final_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    return TrainResult(model=model, pretrain_records=pre, full_records=full,
                       best_state=best_state, final_state=final_state)


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_VERSION = 1
_MAGIC = b"GRAPHCAP"


def save_checkpoint(path, model: GroundedCaptioner, config: TrainConfig,
                    epoch: int, optimizer_state: Optional[OptimizerState] = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "dims": asdict(model.dims),
        "vocab": model.vocab.to_json(),
        "region_dim": model.graph_encoder.visual.mfb.region_dim,
        "frame_dim": model.decoder.temporal.key.in_features,
        "train_config": _config_json(config),
        "epoch": epoch,
        "state": model.state_dict(),
        "optimizer": None if optimizer_state is None else {
            "step": optimizer_state.step,
            "first": optimizer_state.first,
            "second": optimizer_state.second,
        },
        "torch_rng": torch.get_rng_state(),
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    blob = buffer.getvalue()
    digest = hashlib.sha256(blob).digest()
    Path(path).write_bytes(_MAGIC + digest + blob)


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 32 or not raw.startswith(_MAGIC):
        raise CorruptionError(f"{path}: not a checkpoint file")
    digest, blob = raw[len(_MAGIC):len(_MAGIC) + 32], raw[len(_MAGIC) + 32:]
    if hashlib.sha256(blob).digest() != digest:
        raise CorruptionError(f"{path}: checksum mismatch")
    payload = torch.load(io.BytesIO(blob), weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}")
    return payload


def model_from_checkpoint(payload: dict) -> GroundedCaptioner:
    from .dataset import Vocabulary

    vocab_json = payload["vocab"]
    vocab = Vocabulary(words=tuple(vocab_json["words"]),
                       objects=tuple(vocab_json["objects"]),
                       attributes=tuple(vocab_json["attributes"]),
                       relations=tuple(vocab_json["relations"]),
                       synonyms=tuple(sorted(vocab_json.get("synonyms", {}).items())))
    model = GroundedCaptioner(vocab, ModelDims(**payload["dims"]),
                              region_dim=payload["region_dim"],
                              frame_dim=payload["frame_dim"])
    model.load_state_dict(payload["state"])
    return model


def _config_json(config: TrainConfig) -> dict:
    data = asdict(config)
    data["dims"] = asdict(config.dims)
    return data


def config_from_json(data: dict) -> TrainConfig:
    data = dict(data)
    dims = data.pop("dims", None)
    config = TrainConfig(**data, dims=ModelDims(**dims) if dims else DESK_DIMS)
    config.validate()
    return config


# ---------------------------------------------------------------------------
# Gradient audit


@dataclass
class BlockAudit:
    name: str
    checked: int
    max_rel_err: float
    ok: bool


@dataclass
class AuditReport:
    blocks: list
    runtime_s: float

    @property
    def ok(self) -> bool:
        return all(b.ok for b in self.blocks)

    def failing(self) -> list[str]:
        return [b.name for b in self.blocks if not b.ok]

    def lines(self) -> list[str]:
        out = []
        for b in self.blocks:
            status = "ok" if b.ok else "FAIL"
            out.append(f"{status:4} {b.name:55} coords={b.checked:2d} "
                       f"max_rel_err={b.max_rel_err:.3e}")
        out.append(f"{'PASS' if self.ok else 'FAIL'} in {self.runtime_s:.1f}s")
        return out


_AUDIT_LOSSES = ("L_S", "L_M", "L_R", "L_G", "total")


def gradient_audit(model: GroundedCaptioner, videos: Sequence[Sequence[ClipTensors]],
                   config: TrainConfig, fd_step: float = 1e-5, rel_tol: float = 1e-4,
                   coords_per_block: int = 6, seed: int = 0,
                   corrupt_block: Optional[str] = None) -> AuditReport:
    """Compare analytic gradients of every loss against central finite
    differences on sampled coordinates of every parameter block.

    corrupt_block injects a constant error into one block's analytic
    gradients (test hook for the failure path).
    """
    start = time.monotonic()
    params = dict(model.named_parameters())
    names = list(params)

    losses = batch_losses(model, videos, PHASE_FULL, config)
    analytic = {}
    for key in _AUDIT_LOSSES:
        grads = torch.autograd.grad(losses[key], [params[n] for n in names],
                                    retain_graph=True, allow_unused=True)
        analytic[key] = dict(zip(names, grads))

    rng = np.random.default_rng(seed)
    blocks = []
    for name in names:
        param = params[name]
        flat = param.data.view(-1)
        count = min(coords_per_block, flat.numel())
        coords = rng.choice(flat.numel(), size=count, replace=False)
        max_err = 0.0
        ok = True
        for idx in coords:
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + fd_step
                plus = batch_losses(model, videos, PHASE_FULL, config)
                flat[idx] = original - fd_step
                minus = batch_losses(model, videos, PHASE_FULL, config)
                flat[idx] = original
            for key in _AUDIT_LOSSES:
                fd = (float(plus[key]) - float(minus[key])) / (2.0 * fd_step)
                grad = analytic[key][name]
                an = 0.0 if grad is None else float(grad.view(-1)[idx])
                if corrupt_block is not None and name == corrupt_block:
                    an += 1.0
                scale = max(abs(an), abs(fd))
                err = abs(an - fd)
                if err > max(rel_tol * scale, 1e-8):
                    ok = False
                if scale > 1e-8:
                    max_err = max(max_err, err / max(scale, 1e-300))
        blocks.append(BlockAudit(name=name, checked=count, max_rel_err=max_err, ok=ok))
    return AuditReport(blocks=blocks, runtime_s=time.monotonic() - start)
