"""Deep-supervised training loop: BCE on every sub-network output, Adam with
weight decay, exponential per-epoch learning-rate decay, checkpointing, and
side-effect-free evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import composer
from .data import DataConfig, SamplePair, augment, batches, load_dataset, resize, split
from .errors import ConfigError, ContractError, NonFiniteLossError
from .metrics import build_report, confusion
from .tensor_core import Parameter, Tensor, backward, bce_loss, ew_add

TRAIN_LOG_COLUMNS = ["epoch", "lr", "train_loss", "val_loss", "val_dice", "val_miou", "val_accuracy"]


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.0005
    lr_gamma: float = 0.98
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    epochs: int = 100
    decoupled_weight_decay: bool = False

    def __post_init__(self):
        if min(self.learning_rate, self.beta1, self.beta2, self.epsilon) <= 0:
            raise ConfigError("optimizer rates and betas must be positive")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 < self.lr_gamma <= 1.0:
            raise ConfigError(f"lr_gamma must be in (0, 1], got {self.lr_gamma}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "lr_gamma": self.lr_gamma,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "decoupled_weight_decay": self.decoupled_weight_decay,
        }

    @staticmethod
    def from_dict(d: dict) -> "OptimConfig":
        return OptimConfig(**d)


def lr_at(epoch: int, config: OptimConfig) -> float:
    """Exponential schedule: base rate times gamma^epoch, stepped per epoch."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return config.learning_rate * config.lr_gamma**epoch


def total_loss(score_maps: Sequence[Tensor], y: Tensor) -> Tensor:
    """Deep supervision: unweighted sum of BCE over every score map."""
    if not score_maps:
        raise ContractError("total_loss: no score maps")
    loss = bce_loss(score_maps[0], y)
    for sm in score_maps[1:]:
        loss = ew_add(loss, bce_loss(sm, y))
    return loss


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def init_adam_state(params: Sequence[Parameter]) -> AdamState:
    state = AdamState()
    for p in params:
        state.m[p.name] = np.zeros_like(p.data)
        state.v[p.name] = np.zeros_like(p.data)
    return state


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float, config: OptimConfig) -> None:
    """One Adam update with bias correction.

    Weight decay defaults to the classic L2-in-gradient (coupled) form;
    the decoupled form subtracts lr*wd*theta directly instead.
    """
    state.step += 1
    t = state.step
    b1, b2, eps, wd = config.beta1, config.beta2, config.epsilon, config.weight_decay
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p in params:
        g = p.tensor.grad
        if g is None:
            raise ContractError(f"adam_step: parameter {p.name} has no gradient")
        if wd and not config.decoupled_weight_decay:
            g = g + wd * p.data
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if wd and config.decoupled_weight_decay:
            update = update + wd * p.data
        p.tensor.data = p.data - lr * update


class Adam:
    def __init__(self, params: Sequence[Parameter], config: OptimConfig, state: Optional[AdamState] = None):
        self.params = list(params)
        self.config = config
        self.state = state if state is not None else init_adam_state(self.params)

    def step(self, lr: float) -> None:
        adam_step(self.params, self.state, lr, self.config)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, pairs: Sequence[SamplePair], threshold: float = 0.5, keep_predictions: bool = False):
    """Per-image confusion on the binarized final score map, eval mode.

    Mutates nothing: parameters and batch-norm running statistics are left
    untouched. Returns a MetricsReport, plus predictions when requested.
    """
    if len(pairs) == 0:
        raise ContractError("evaluate: empty sample list")
    ids, counts, preds = [], [], []
    for pair in pairs:
        x = Tensor(pair.image[None])
        final = model.forward(x, mode="eval")[-1]
        pred = (final.data[0] >= threshold).astype(np.float32)
        counts.append(confusion(pred, pair.mask))
        ids.append(pair.id)
        if keep_predictions:
            preds.append(pred)
    report = build_report(ids, counts, threshold)
    return (report, preds) if keep_predictions else report


def _validation_loss(model, pairs: Sequence[SamplePair], batch_size: int) -> float:
    total, count = 0.0, 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        xb = Tensor(np.stack([s.image for s in chunk]))
        yb = Tensor(np.stack([s.mask for s in chunk]))
        final = model.forward(xb, mode="eval")[-1]
        total += float(bce_loss(final, yb).data) * len(chunk)
        count += len(chunk)
    return total / count


# ---------------------------------------------------------------------------
# the training run


@dataclass
class RunManifest:
    model_config: dict
    data_config: dict
    optim_config: dict
    seed: int
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_dice: Optional[float] = None
    best_checkpoint: Optional[str] = None
    final_checkpoint: Optional[str] = None
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {
            "schema": "run-manifest v1",
            "model_config": self.model_config,
            "data_config": self.data_config,
            "optim_config": self.optim_config,
            "seed": self.seed,
            "history": self.history,
            "checkpoints": self.checkpoints,
            "best_epoch": self.best_epoch,
            "best_val_dice": self.best_val_dice,
            "best_checkpoint": self.best_checkpoint,
            "final_checkpoint": self.final_checkpoint,
            "stopped_early": self.stopped_early,
        }


def _append_log_row(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write(",".join(TRAIN_LOG_COLUMNS) + "\n")
        fh.write(
            ",".join("" if row[c] is None else f"{row[c]:.10g}" if isinstance(row[c], float) else str(row[c]) for c in TRAIN_LOG_COLUMNS)
            + "\n"
        )


def load_split_pairs(data_config: DataConfig):
    root = Path(data_config.root)
    pairs = load_dataset(root / "images", root / "masks")
    pairs = [resize(p, data_config.image_size) for p in pairs]
    return split(pairs, data_config.split)


def train_run(
    model_config: composer.ModelConfig,
    data_config: DataConfig,
    optim_config: OptimConfig,
    out_dir,
    seed: int = 0,
    resume: Optional[str] = None,
    eval_threshold: Optional[float] = None,
    epoch_callback: Optional[Callable] = None,
) -> RunManifest:
    """Run the full training loop and return its manifest.

    Per epoch: shuffled train batches with on-the-fly augmentation, deep-
    supervised loss, backward, Adam step; then validation loss/metrics on
    the final score map, a checkpoint, and a training-log CSV row. All
    randomness derives from `seed`; a resumed run reproduces the epochs an
    uninterrupted run would have produced.

    `epoch_callback(epoch, row, model)` may return False to stop early.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    threshold = model_config.binarize_threshold if eval_threshold is None else eval_threshold

    train_pairs, val_pairs, _ = load_split_pairs(data_config)
    if not train_pairs:
        raise ContractError("train_run: training split is empty")

    if resume is not None:
        model, info = composer.load_checkpoint(resume)
        if info["config"].to_dict() != model_config.to_dict():
            raise ConfigError("resume checkpoint was trained with a different model config")
        start_epoch = info["epoch"] + 1
        optimizer = Adam(model.parameters(), optim_config)
        if info["optimizer_state"] is not None:
            optimizer.state = AdamState(
                m=info["optimizer_state"]["m"],
                v=info["optimizer_state"]["v"],
                step=info["optimizer_state"]["step"],
            )
        seed = info["seed"]
    else:
        model = composer.build_model(model_config, seed)
        start_epoch = 0
        optimizer = Adam(model.parameters(), optim_config)

    manifest = RunManifest(
        model_config=model_config.to_dict(),
        data_config=data_config.to_dict(),
        optim_config=optim_config.to_dict(),
        seed=seed,
    )
    log_path = out_dir / "training_log.csv"
    params = model.parameters()
    aug = data_config.augment
    aug_seed = aug.seed if aug.seed is not None else seed

    for epoch in range(start_epoch, optim_config.epochs):
        lr = lr_at(epoch, optim_config)
        aug_rng = np.random.default_rng((aug_seed, epoch, 1))
        transform = lambda s: augment(s, aug, aug_rng)  # noqa: E731

        step_losses = []
        for batch_index, (xb, yb) in enumerate(
            batches(train_pairs, optim_config.batch_size, seed, epoch, transform=transform)
        ):
            score_maps = model.forward(Tensor(xb), mode="train")
            loss = total_loss(score_maps, Tensor(yb))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, batch_index, value)
            backward(loss, params)
            optimizer.step(lr)
            step_losses.append(value)

        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": sum(step_losses) / len(step_losses),
            "val_loss": None,
            "val_dice": None,
            "val_miou": None,
            "val_accuracy": None,
        }
        if val_pairs:
            v_pairs = val_pairs
            if aug.augment_validation:
                v_rng = np.random.default_rng((aug_seed, epoch, 2))
                v_pairs = [augment(s, aug, v_rng) for s in val_pairs]
            row["val_loss"] = _validation_loss(model, v_pairs, optim_config.batch_size)
            val_report = evaluate(model, v_pairs, threshold)
            row["val_dice"] = val_report.mean_dice
            row["val_miou"] = val_report.mean_miou
            row["val_accuracy"] = val_report.mean_accuracy

        ckpt = composer.save_checkpoint(
            model,
            out_dir / f"epoch_{epoch:04d}",
            seed=seed,
            epoch=epoch,
            optimizer_state={"m": optimizer.state.m, "v": optimizer.state.v, "step": optimizer.state.step},
        )
        manifest.checkpoints.append(str(ckpt))
        manifest.final_checkpoint = str(ckpt)
        history_row = dict(row)
        history_row["step_losses"] = step_losses
        manifest.history.append(history_row)
        _append_log_row(log_path, row)

        if row["val_dice"] is not None and (
            manifest.best_val_dice is None or row["val_dice"] > manifest.best_val_dice
        ):
            manifest.best_val_dice = row["val_dice"]
            manifest.best_epoch = epoch
            manifest.best_checkpoint = str(ckpt)

        if epoch_callback is not None and epoch_callback(epoch, row, model) is False:
            manifest.stopped_early = True
            break

    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest
