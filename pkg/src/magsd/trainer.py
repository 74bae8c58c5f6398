"""Two-pass training loop, fold orchestration, inference and checkpoints.

One step: primary forward on the clean batch -> attention-guided auxiliary
batches built from that same forward's attention -> auxiliary forwards
through the same (shared) network -> regularized loss -> SGD update.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch

from .attention import MANet, build_model
from .attn_augment import AugmentConfig, make_auxiliary_batch
from .backbone import BackboneConfig
from .dataset import FoldSplit, Sample
from .metrics import MetricsReport, build_report
from .preprocess import PreprocessConfig, StochasticAugConfig, apply_stochastic_augs, preprocess_image
from .rng import stream
from .sd_loss import CONSISTENCY_MODES, LossBreakdown, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "magsd-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, batch_ids: Sequence[str], breakdown: LossBreakdown):
        self.step = step
        self.batch_ids = list(batch_ids)
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at step {step} ({breakdown}); batch ids: {', '.join(self.batch_ids)}")


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    num_classes: int
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_maps: int = 32
    scales: tuple[int, ...] = (2, 3)
    pooling: str = "attention"
    zscore: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = asdict(self.backbone)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d["backbone"])
        d["scales"] = tuple(d["scales"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def build(self, seed: int) -> MANet:
        return build_model(self.num_classes, seed, backbone=self.backbone, num_maps=self.num_maps,
                           scales=self.scales, pooling=self.pooling, zscore=self.zscore)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-6
    theta: float = 0.7
    consistency: str = "soft"
    seed: int = 0
    deterministic: bool = True
    float64: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr, momentum and weight_decay must be nonnegative")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.consistency not in CONSISTENCY_MODES:
            raise ValueError(f"unknown consistency {self.consistency!r}")


@dataclass
class TrainState:
    model: MANet
    optimizer: torch.optim.Optimizer
    aug_rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)


def set_deterministic(flag: bool) -> None:
    if flag:
        torch.set_num_threads(1)
        cv2.setNumThreads(1)
    torch.use_deterministic_algorithms(flag)


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.SGD:
    # torch SGD: v <- mu*v + g + wd*w ; w <- w - lr*v
    return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def new_state(model_config: ModelConfig, config: TrainConfig) -> TrainState:
    model = model_config.build(config.seed)
    if config.float64:
        model = model.double()
    return TrainState(model, make_optimizer(model, config), stream(config.seed, "augment"))


def _dtype(model: torch.nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _to_tensor(images: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images)).unsqueeze(1).to(dtype)


def train_step(state: TrainState, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
               aug_config: AugmentConfig, batch_ids: Sequence[str] = ()) -> LossBreakdown:
    """One optimization step on a batch of (B, H, W) images in [0, 1]."""
    model = state.model
    model.train()
    dtype = _dtype(model)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    out = model(_to_tensor(images, dtype))

    aux_logits: list[torch.Tensor] = []
    if config.consistency != "none":
        aux_images = make_auxiliary_batch(images, out.attention.detach().cpu().numpy(), aug_config, state.aug_rng)
        names = ("mixup", "patch", "dim")
        active = [img for name, img in zip(names, aux_images) if name in aug_config.enabled]
        aux_out = iter(model(_to_tensor(np.concatenate(active), dtype)).logits.split(len(images))) if active else None
        for name in names:
            # a pass-through copy would reproduce the primary forward exactly
            aux_logits.append(next(aux_out) if name in aug_config.enabled else out.logits)

    loss, breakdown = total_loss(out.logits, aux_logits, y, config.theta, config.consistency)
    if not np.isfinite(breakdown.l_reg):
        raise NonFiniteLossError(state.step, batch_ids, breakdown)
    state.optimizer.zero_grad(set_to_none=False)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return breakdown


@dataclass
class PreparedData:
    images: np.ndarray  # (n, H, W) after CLAHE + resize
    labels: np.ndarray
    ids: list[str]

    def subset(self, ids: Sequence[str]) -> "PreparedData":
        index = {i: n for n, i in enumerate(self.ids)}
        rows = [index[i] for i in ids]
        return PreparedData(self.images[rows], self.labels[rows], [self.ids[r] for r in rows])

    def __len__(self) -> int:
        return len(self.ids)


def prepare(samples: Sequence[Sample], config: PreprocessConfig) -> PreparedData:
    images = np.stack([preprocess_image(s.image, config) for s in samples]).astype(np.float32)
    return PreparedData(images, np.array([s.label for s in samples], dtype=np.int64), [s.id for s in samples])


def train_epoch(state: TrainState, data: PreparedData, config: TrainConfig, aug_config: AugmentConfig,
                stoch_config: StochasticAugConfig, log_writer=None, t0: float | None = None) -> list[LossBreakdown]:
    epoch = state.epoch
    order = stream(config.seed, "shuffle", epoch).permutation(len(data))
    size = data.images.shape[1:]
    out = []
    for start in range(0, len(order), config.batch_size):
        rows = order[start:start + config.batch_size]
        ids = [data.ids[r] for r in rows]
        batch = np.stack([apply_stochastic_augs(data.images[r], stoch_config,
                                                stream(config.seed, "stochastic", epoch, data.ids[r]), size)
                          for r in rows])
        br = train_step(state, batch, data.labels[rows], config, aug_config, ids)
        row = {"step": state.step, "epoch": epoch, "l_ce": br.l_ce, "d_bar": br.d_bar, "l_reg": br.l_reg,
               "lr": config.lr, "seconds": round(time.perf_counter() - t0, 3) if t0 is not None else 0.0}
        state.history.append(row)
        if log_writer is not None:
            log_writer.writerow(row)
        out.append(br)
    state.epoch += 1
    return out


LOG_FIELDS = ["step", "epoch", "l_ce", "d_bar", "l_reg", "lr", "seconds"]


def fit(state: TrainState, data: PreparedData, config: TrainConfig, aug_config: AugmentConfig,
        stoch_config: StochasticAugConfig, log_path: str | Path | None = None) -> TrainState:
    t0 = time.perf_counter()
    fh = open(log_path, "w", newline="") if log_path else None
    try:
        writer = None
        if fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
            writer.writeheader()
        while state.epoch < config.epochs:
            losses = train_epoch(state, data, config, aug_config, stoch_config, writer, t0)
            if losses:
                log.info("epoch %d/%d  l_ce %.4f  d_bar %.4f", state.epoch, config.epochs,
                         np.mean([b.l_ce for b in losses]), np.mean([b.d_bar for b in losses]))
    finally:
        if fh:
            fh.close()
    return state


@torch.no_grad()
def predict(model: MANet, images: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Softmax probabilities (n, K) and attention stacks (n, N, S, S) for clean inputs."""
    model.eval()
    dtype = _dtype(model)
    probs, attn = [], []
    for start in range(0, len(images), batch_size):
        out = model(_to_tensor(images[start:start + batch_size], dtype))
        probs.append(out.logits.softmax(dim=-1).double().numpy())
        attn.append(out.attention.double().numpy())
    return np.concatenate(probs), np.concatenate(attn)


def evaluate(model: MANet, data: PreparedData, classes: Sequence[str]) -> tuple[MetricsReport, np.ndarray]:
    probs, _ = predict(model, data.images)
    return build_report(data.labels, probs, classes), probs


def train_fold(data: PreparedData, fold: int, split: FoldSplit, model_config: ModelConfig,
               config: TrainConfig, aug_config: AugmentConfig, stoch_config: StochasticAugConfig,
               classes: Sequence[str], log_path: str | Path | None = None) -> tuple[TrainState, MetricsReport]:
    """Train on every fold except ``fold`` and evaluate on the held-out one."""
    if not 0 <= fold < split.k:
        raise ValueError(f"fold {fold} out of range for k={split.k}")
    train_data = data.subset(split.train_ids(fold))
    test_data = data.subset(split.test_ids(fold))
    state = new_state(model_config, config)
    fit(state, train_data, config, aug_config, stoch_config, log_path)
    report, _ = evaluate(state.model, test_data, classes)
    return state, report


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_save(state: TrainState, path: str | Path, model_config: ModelConfig, classes: Sequence[str],
                    seed: int, extra: dict | None = None) -> None:
    """Single torch zip container: format tag, version, config echo + digest,
    weights, optimizer slots, rng state, counters and loss history."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model_config.to_dict(),
        "config_hash": model_config.digest(),
        "classes": list(classes),
        "seed": seed,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "aug_rng": state.aug_rng.bit_generator.state,
        "epoch": state.epoch,
        "step": state.step,
        "history": state.history,
        "extra": extra or {},
    }
    torch.save(payload, path)


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"corrupt checkpoint {path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}")
    return payload


def checkpoint_load(path: str | Path, config: TrainConfig, expected: ModelConfig | None = None) -> tuple[TrainState, dict]:
    payload = read_checkpoint(path)
    model_config = ModelConfig.from_dict(payload["model_config"])
    if model_config.digest() != payload["config_hash"]:
        raise CheckpointError("corrupt checkpoint: config hash does not match its config")
    if expected is not None and expected.digest() != payload["config_hash"]:
        raise CheckpointError(f"config hash mismatch: checkpoint {payload['config_hash']} != expected {expected.digest()}")
    state = new_state(model_config, config)
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.aug_rng.bit_generator.state = payload["aug_rng"]
    state.epoch, state.step = payload["epoch"], payload["step"]
    state.history = list(payload["history"])
    return state, payload


def load_model(path: str | Path) -> tuple[MANet, dict]:
    payload = read_checkpoint(path)
    model_config = ModelConfig.from_dict(payload["model_config"])
    model = model_config.build(payload.get("seed", 0))
    if next(iter(payload["model"].values())).dtype == torch.float64:
        model = model.double()
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload
