"""Objective computation, Adam, the epoch loop, and the ablation harness."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FIRST_ITEM, SessionDataset, prefix_augment
from .errors import ConfigurationError, DataError, NumericError
from .masking import CLM, MaskingStrategy, TrainingExample, training_examples
from .model import Model, ModelConfig, forward, init_model, save_checkpoint

log = logging.getLogger(__name__)

_SHUFFLE_STREAM = 0x5F8
_DROPOUT_STREAM = 0xD20


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 5e-5
    epochs: int = 5
    lr_drop_epoch: int = 3
    lr_drop_factor: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None
    seed: int = 42
    strategy: MaskingStrategy = field(default_factory=MaskingStrategy)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.lr_drop_factor <= 1.0:
            raise ConfigurationError(f"lr_drop_factor must be in (0,1], got {self.lr_drop_factor}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if isinstance(self.strategy, dict):
            self.strategy = MaskingStrategy(**self.strategy)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0


@dataclass
class TrainReport:
    epoch_losses: list
    wall_time_s: float
    config: dict
    seed: int

    def to_json_obj(self) -> dict:
        return asdict(self)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step schedule: full rate before lr_drop_epoch (0-indexed), the
    drop factor from that epoch onward."""
    return config.lr_drop_factor if epoch >= config.lr_drop_epoch else 1.0


def objective_loss(logits: Tensor, batch: Sequence[TrainingExample]) -> Tensor:
    """Mean cross-entropy over supervised positions (targets > PAD).

    Covers all three objectives: SMM/MLM supervise masked positions,
    CLM supervises every position with a right neighbor.
    """
    targets = np.array([ex.targets for ex in batch], dtype=np.int64)
    b, t = targets.shape
    rows_b, rows_t = np.nonzero(targets)
    if rows_b.size == 0:
        raise DataError("batch contains no supervised positions")
    flat_targets = targets[rows_b, rows_t]
    if flat_targets.min() < FIRST_ITEM:
        raise DataError("special tokens can never be prediction targets")
    flat = ad.reshape(logits, (b * t, logits.shape[-1]))
    picked = ad.gather_rows(flat, rows_b * t + rows_t)
    return ad.cross_entropy_from_logits(picked, flat_targets).mean()


def init_optimizer(model: Model) -> OptimizerState:
    zeros = {p.name: np.zeros_like(p.tensor.data) for p in model.parameters()}
    return OptimizerState({k: v.copy() for k, v in zeros.items()}, zeros, step=0)


def adam_step(model: Model, state: OptimizerState, lr_effective: float,
              config: TrainConfig) -> None:
    """Bias-corrected Adam update in place; missing grads count as zero."""
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    state.step += 1
    t = state.step
    grads = {}
    for p in model.parameters():
        g = p.tensor.grad
        g = np.zeros_like(p.tensor.data) if g is None else g
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {p.name}")
        grads[p.name] = g
    if config.grad_clip is not None:
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
            grads = {k: g * scale for k, g in grads.items()}
    for p in model.parameters():
        g = grads[p.name]
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.tensor.data -= (lr_effective * m_hat / (np.sqrt(v_hat) + eps)).astype(p.tensor.dtype)


def _check_compat(model: Model, strategy: MaskingStrategy) -> None:
    if (strategy.kind == CLM) != model.config.causal:
        raise ConfigurationError(
            f"strategy {strategy.kind!r} requires causal={strategy.kind == CLM}, "
            f"model has causal={model.config.causal}"
        )
    if strategy.max_len > model.config.max_len:
        raise ConfigurationError(
            f"strategy max_len {strategy.max_len} exceeds model max_len {model.config.max_len}"
        )


def fit(
    model: Model,
    dataset: SessionDataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[Model, TrainReport]:
    """Train for config.epochs; regenerates examples each epoch (MLM
    remasks), shuffles with (seed, epoch), and checkpoints per epoch."""
    _check_compat(model, config.strategy)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    started = time.perf_counter()
    epoch_losses = []
    state = init_optimizer(model)
    for epoch in range(config.epochs):
        examples = training_examples(dataset.train, config.strategy, config.seed, epoch)
        order = np.random.default_rng([_SHUFFLE_STREAM, config.seed, epoch]).permutation(len(examples))
        lr = config.learning_rate * lr_schedule(epoch, config)

        loss_sum = 0.0
        weight_sum = 0
        n_batches = (len(examples) + config.batch_size - 1) // config.batch_size
        for step in range(n_batches):
            batch = [examples[i] for i in order[step * config.batch_size:(step + 1) * config.batch_size]]
            rng = np.random.default_rng([_DROPOUT_STREAM, config.seed, epoch, step])
            logits = forward(model, batch, training=True, rng=rng)
            loss = objective_loss(logits, batch)
            ad.zero_grads(model.parameters())
            ad.backward(loss)
            adam_step(model, state, lr, config)
            n_sup = sum(1 for ex in batch for tgt in ex.targets if tgt)
            loss_sum += float(loss.data) * n_sup
            weight_sum += n_sup
        epoch_loss = loss_sum / weight_sum
        epoch_losses.append(epoch_loss)
        log.info("epoch %d: loss %.5f (lr %.2e, %d examples)", epoch, epoch_loss, lr, len(examples))
        if out is not None:
            save_checkpoint(model, out / f"epoch_{epoch:03d}.bin")

    report = TrainReport(
        epoch_losses=epoch_losses,
        wall_time_s=time.perf_counter() - started,
        config={"train": asdict(config), "model": asdict(model.config)},
        seed=config.seed,
    )
    if out is not None:
        save_checkpoint(model, out / "model.bin")
    return model, report


ABLATION_TOGGLES = ("weight_tying", "pre_ln_rmsnorm", "cope")


def ablate(
    dataset: SessionDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    toggles: Sequence[str] = ABLATION_TOGGLES,
    k: int = 20,
) -> list[dict]:
    """Train Base (all optimizations off) then cumulatively re-enable
    each toggle in order, evaluating every configuration on the test
    split. Returns one row per configuration."""
    from .evaluation import evaluate  # local import to avoid a cycle

    unknown = set(toggles) - set(ABLATION_TOGGLES)
    if unknown:
        raise ConfigurationError(f"unknown ablation toggles: {sorted(unknown)}")

    test_pairs = prefix_augment(dataset.test, window=train_config.strategy.max_len)
    rows = []
    enabled: dict[str, bool] = {name: False for name in ABLATION_TOGGLES}
    labels = ["base"] + [f"+{t}" for t in toggles]
    steps = [dict(enabled)]
    for t in toggles:
        enabled[t] = True
        steps.append(dict(enabled))

    for label, flags in zip(labels, steps):
        cfg = replace(model_config, **flags)
        model = init_model(cfg)
        _, report = fit(model, dataset, train_config)
        ev = evaluate(model, test_pairs, train_config.strategy, dataset.vocab, k=k)
        rows.append(
            {
                "configuration": label,
                "weight_tying": flags["weight_tying"],
                "pre_ln_rmsnorm": flags["pre_ln_rmsnorm"],
                "cope": flags["cope"],
                "hit_rate": ev.hit_rate,
                "mrr": ev.mrr,
                "final_loss": report.epoch_losses[-1],
            }
        )
    return rows
