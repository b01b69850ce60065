"""Supervised training: binary cross-entropy, Adam, early stopping, grid search.

The training set is a sequence of (FeatureMatrix, label) pairs. Each epoch
shuffles the clips with a PCG64 stream seeded from (seed, epoch), walks
minibatches (last short batch kept), averages per-clip gradients, and takes
one Adam step per batch. After every epoch the validation AUC is computed
in infer mode; training stops when it has not strictly improved for
``patience`` consecutive epochs, returning the best snapshot.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass
from itertools import product
from typing import Callable, Sequence

import numpy as np

from . import evaluate as evaluate_mod
from . import net
from .errors import ConfigError, MetricError, NumericError
from .features import FeatureMatrix

LOSS_CLAMP = 1e-7

LabeledSet = Sequence[tuple[FeatureMatrix, int]]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("patience and batch_size must be >= 1, max_epochs >= 0")
        if self.learning_rate <= 0 or self.adam_epsilon <= 0:
            raise ConfigError("learning_rate and adam_epsilon must be positive")


def bce_loss(p: float, y: int) -> tuple[float, float]:
    """Binary cross-entropy and its derivative w.r.t. p.

    p is clamped to [1e-7, 1 - 1e-7] before evaluation; the derivative is
    taken at the clamped value.
    """
    pc = min(max(float(p), LOSS_CLAMP), 1.0 - LOSS_CLAMP)
    if y:
        return -math.log(pc), -1.0 / pc
    return -math.log1p(-pc), 1.0 / (1.0 - pc)


# --- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """One bias-corrected Adam step, in place, on a dict of parameter tensors."""
    state.t += 1
    correction1 = 1.0 - config.beta1**state.t
    correction2 = 1.0 - config.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g**2
        p -= config.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + config.adam_epsilon)


def adam_step(
    model: net.CrnnModel,
    grads: net.GradientSet,
    state: AdamState,
    config: TrainConfig,
) -> tuple[net.CrnnModel, AdamState]:
    """Apply one Adam update to every learnable tensor of the model."""
    adam_update(dict(model.named_parameters()), grads, state, config)
    return model, state


# --- training loop ------------------------------------------------------------


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_auc: float
    seconds: float


@dataclass
class TrainRun:
    history: list[EpochStats]
    best_epoch: int
    best_val_auc: float
    best_model: net.CrnnModel
    stopped_reason: str  # "patience" | "max_epochs"


def iter_epoch_batches(n_items: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled minibatch index arrays covering every item exactly once."""
    order = rng.permutation(n_items)
    return [order[i : i + batch_size] for i in range(0, n_items, batch_size)]


def _validation_auc(model: net.CrnnModel, val_set: LabeledSet) -> float:
    predictions = []
    labels = {}
    for fm, label in val_set:
        p, _ = net.forward(model, fm.values, mode="infer")
        predictions.append(evaluate_mod.Prediction(clip_id=fm.clip_id, probability=p))
        labels[fm.clip_id] = label
    return evaluate_mod.auc(predictions, labels).auc


def train(
    config: TrainConfig,
    model_config: net.ModelConfig,
    train_set: LabeledSet,
    val_set: LabeledSet,
    val_metric: Callable[[net.CrnnModel, LabeledSet], float] | None = None,
    log_fn: Callable[[EpochStats], None] | None = None,
) -> TrainRun:
    """Train a fresh model and return the best-validation snapshot."""
    if not train_set or not val_set:
        raise ConfigError("train and validation sets must be non-empty")
    if val_metric is None:
        if len({label for _, label in val_set}) < 2:
            raise MetricError("validation set needs both classes for AUC")
        val_metric = _validation_auc

    model = net.init_model(model_config)
    state = AdamState.for_params(dict(model.named_parameters()))
    history: list[EpochStats] = []
    best_epoch = 0
    best_auc = -math.inf
    best_model = model.copy()
    stopped_reason = "max_epochs"

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        rng = np.random.default_rng((config.seed, epoch))
        loss_total = 0.0
        for batch in iter_epoch_batches(len(train_set), config.batch_size, rng):
            grads = net.zero_gradients(model)
            for idx in batch:
                fm, label = train_set[idx]
                p, trace = net.forward(model, fm.values, mode="train", rng=rng)
                loss, d_p = bce_loss(p, label)
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch} on clip {fm.clip_id!r}")
                loss_total += loss
                net.accumulate_gradients(grads, net.backward(model, trace, d_p))
            net.scale_gradients(grads, 1.0 / len(batch))
            adam_step(model, grads, state, config)
        train_loss = loss_total / len(train_set)
        val_auc = float(val_metric(model, val_set))
        stats = EpochStats(
            epoch=epoch, train_loss=train_loss, val_auc=val_auc,
            seconds=time.perf_counter() - started,
        )
        history.append(stats)
        if log_fn is not None:
            log_fn(stats)
        if val_auc > best_auc:
            best_auc = val_auc
            best_epoch = epoch
            best_model = model.copy()
        elif epoch - best_epoch >= config.patience:
            stopped_reason = "patience"
            break

    return TrainRun(
        history=history,
        best_epoch=best_epoch,
        best_val_auc=best_auc if history else 0.5,
        best_model=best_model,
        stopped_reason=stopped_reason,
    )


# --- hyperparameter grid -----------------------------------------------------


@dataclass(frozen=True)
class GridSpace:
    feature_map_choices: tuple[int, ...] = (96, 256)
    recurrent_layer_choices: tuple[int, ...] = (1, 2, 3)
    pooling_arrangements: tuple[tuple[int, ...], ...] = (
        (4,), (2, 2), (4, 2), (8, 5), (2, 2, 2), (5, 4, 2), (2, 2, 2, 1), (5, 2, 2, 2),
    )
    recurrent_type: str = "gru"
    n_mels: int = 40
    kernel: tuple[int, int] = (3, 3)
    dropout_rate: float = 0.25

    def __post_init__(self) -> None:
        if not (self.feature_map_choices and self.recurrent_layer_choices and self.pooling_arrangements):
            raise ConfigError("grid space must be non-empty along every axis")


def enumerate_grid(space: GridSpace) -> list[net.ModelConfig]:
    """Cartesian product of the grid axes in deterministic order.

    Feature-map and recurrent-layer choices iterate ascending; pooling
    arrangements keep their given order. Arrangement length fixes the
    number of conv layers. Invalid arrangements raise ConfigError.
    """
    configs = []
    for maps, layers, pooling in product(
        sorted(set(space.feature_map_choices)),
        sorted(set(space.recurrent_layer_choices)),
        space.pooling_arrangements,
    ):
        configs.append(
            net.ModelConfig(
                n_feature_maps=maps,
                conv_pooling=tuple(pooling),
                kernel=space.kernel,
                n_recurrent_layers=layers,
                recurrent_type=space.recurrent_type,
                dropout_rate=space.dropout_rate,
                n_mels=space.n_mels,
            )
        )
    return configs


@dataclass(frozen=True)
class GridResult:
    config: net.ModelConfig
    val_auc: float
    best_epoch: int
    n_params: int


def derive_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence((base, index)).generate_state(1)[0])


def _run_grid_entry(args: tuple) -> GridResult:
    index, config, train_config, train_set, val_set = args
    seeded = dataclasses.replace(config, seed=derive_seed(train_config.seed, index))
    run = train(train_config, seeded, train_set, val_set)
    return GridResult(
        config=seeded,
        val_auc=run.best_val_auc,
        best_epoch=run.best_epoch,
        n_params=run.best_model.n_params,
    )


def run_grid(
    space: GridSpace,
    train_config: TrainConfig,
    train_set: LabeledSet,
    val_set: LabeledSet,
    jobs: int = 1,
) -> list[GridResult]:
    """Train one model per grid point; report sorted by val AUC, ties to fewer params."""
    configs = enumerate_grid(space)
    tasks = [(i, c, train_config, train_set, val_set) for i, c in enumerate(configs)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_grid_entry, tasks))
    else:
        results = [_run_grid_entry(t) for t in tasks]
    return sorted(results, key=lambda r: (-r.val_auc, r.n_params))
