""" Training and evaluation loops. """

import collections
import csv
import dataclasses
import logging
import math
import typing as t

import numpy as np

from diffmesh.config import ConfigSection, register_check
from diffmesh.data import Dataset, Sample
from diffmesh.diffusion import (
    OBJECTIVES,
    NoiseSchedule,
    build_cosine_schedule,
    q_sample,
    sample_loop,
)
from diffmesh.errors import ConfigError, NumericError
from diffmesh.geometry import METRIC_NAMES, metrics
from diffmesh.losses import (
    CSV_COLUMNS,
    LossTerms,
    LossWeights,
    csv_row,
    epsilon_loss,
    total_loss,
)
from diffmesh.model import Denoiser, ModelConfig
from diffmesh.numcore import Rng, adamw_step, add, as_tensor, clip_grad_norm, scale
from diffmesh.typing import Array


logger = logging.getLogger(__name__)

FINETUNE_SCOPES = ("branch", "all")
METRIC_COLUMNS = ("variant",) + METRIC_NAMES
MILLI = 1000.0
TRAIN_STREAM = 1
SHUFFLE_STREAM = 2
EVAL_STREAM = 3
DEPTH_PREFIX = "depth."
PA_TARGET_FRACTION = 0.05

# (name, use_diffusion, use_cross_modality_decoder)
VARIANTS = (
    ("-diffusion -decoder", False, False),
    ("-diffusion +decoder", False, True),
    ("+diffusion -decoder", True, False),
    ("+diffusion +decoder", True, True),
)


@ConfigSection.register_section("train")
@dataclasses.dataclass
class TrainConfig(ConfigSection):
    """Optimization, loss and evaluation settings."""

    seed: int = 0
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    timesteps: int = 1000
    inference_steps: int = 10
    eta: float = 0.0
    lambda_joint: float = 1.0
    lambda_smooth: float = 0.05
    depth_condition: bool = False
    objective: str = "x0"
    grad_clip: float = 1.0
    x0_clip: float = 1.5
    finetune_epochs: int = 5
    finetune_scope: str = "branch"
    max_samples: int = 0
    log_every: int = 50
    root_relative: bool = True
    ema_window: int = 50

    @register_check
    def positive_counts(self):
        for name in ("epochs", "batch_size", "timesteps", "inference_steps", "ema_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.finetune_epochs < 0 or self.max_samples < 0 or self.log_every < 0:
            raise ConfigError("finetune_epochs, max_samples and log_every must be non-negative")

    @register_check
    def valid_optimizer(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("weight_decay and grad_clip must be non-negative")

    @register_check
    def valid_sampling(self):
        if self.inference_steps > self.timesteps:
            raise ConfigError(
                f"inference_steps {self.inference_steps} exceeds timesteps {self.timesteps}"
            )
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")

    @register_check
    def known_choices(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(
                f"objective must be one of {', '.join(OBJECTIVES)}, got {self.objective!r}"
            )
        if self.finetune_scope not in FINETUNE_SCOPES:
            raise ConfigError(
                f"finetune_scope must be one of {', '.join(FINETUNE_SCOPES)}, "
                f"got {self.finetune_scope!r}"
            )

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_joint, self.lambda_smooth)


class LossAverage:
    """
    Exponential moving average with `alpha = 2 / (window + 1)`, seeded by
    the first value.

    Examples:

        >>> average = LossAverage(3)
        >>> average.update(4.0), average.update(2.0)
        (4.0, 3.0)
    """

    def __init__(self, window: int):
        self.alpha = 2.0 / (window + 1)
        self.value: t.Optional[float] = None

    def update(self, value: float) -> float:
        if self.value is None:
            self.value = value
        else:
            self.value = self.alpha * value + (1.0 - self.alpha) * self.value
        return self.value


@dataclasses.dataclass
class TrainingLog:
    """Per-step loss rows, the moving average and warning counts of a run."""

    rows: t.List[t.Tuple[int, t.Tuple[float, ...]]] = dataclasses.field(default_factory=list)
    average: t.Optional[LossAverage] = None
    averages: t.List[float] = dataclasses.field(default_factory=list)
    counter: t.Counter = dataclasses.field(default_factory=collections.Counter)

    def record(self, step: int, values: t.Tuple[float, ...]):
        self.rows.append((step, values))
        self.averages.append(self.average.update(values[-1]))

    def write_csv(self, fh: t.TextIO):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for step, values in self.rows:
            writer.writerow(csv_row(step, values))


def recorded_settings(model: Denoiser, config: TrainConfig) -> TrainConfig:
    """
    `config` with the timestep count and objective `model` was trained with.
    A model that has not been trained yet takes both from `config`.
    """
    if model.timesteps is None:
        return config
    recorded = dict(timesteps=model.timesteps, objective=model.objective)
    changed = {key: value for key, value in recorded.items() if getattr(config, key) != value}
    if changed:
        logger.warning(
            "Using %s recorded in the model",
            ", ".join(f"{key} = {value}" for key, value in changed.items()),
        )
        config = config.replace(**changed)
    return config


def record_settings(model: Denoiser, config: TrainConfig) -> TrainConfig:
    """Apply the recorded settings of `model`, recording `config`'s if it has none."""
    config = recorded_settings(model, config)
    model.timesteps, model.objective = config.timesteps, config.objective
    return config


def schedule_for(model: Denoiser, config: TrainConfig) -> t.Optional[NoiseSchedule]:
    """The noise schedule, or None for models that decode without diffusion."""
    if not model.config.use_diffusion:
        return None
    return build_cosine_schedule(config.timesteps)


def _sample_depth(model: Denoiser, sample: Sample) -> t.Optional[Array]:
    return sample.depth if model.depth_branch is not None else None


def sample_terms(
    sample: Sample,
    model: Denoiser,
    dataset: Dataset,
    sched: t.Optional[NoiseSchedule],
    config: TrainConfig,
    rng: Rng,
    counter: t.Optional[t.Counter] = None,
) -> LossTerms:
    """
    Loss terms of one sample. With diffusion, the clean vertices are
    corrupted to a uniformly drawn timestep in 1..T and the model predicts
    them back; without it, the learned query set is decoded at t = 0.
    """
    cond = model.condition(sample.image, _sample_depth(model, sample))
    if sched is None:
        prediction = model.decode(model.query_input(), 0, cond)
    else:
        x0 = dataset.normalize(sample)
        step = int(rng.integers(1, sched.T))
        eps = rng.normal(x0.shape)
        x_t = q_sample(x0, step, eps, sched)
        prediction = model.decode(as_tensor(x_t.coords), step, cond)
        if config.objective == "epsilon":
            loss = epsilon_loss(prediction, eps)
            return LossTerms(loss, None, None, loss)
    verts = add(scale(prediction, dataset.scale), sample.root)
    return total_loss(verts, dataset.target(sample), config.loss_weights, counter)


def train_step(
    batch: t.Sequence[Sample],
    model: Denoiser,
    dataset: Dataset,
    sched: t.Optional[NoiseSchedule],
    config: TrainConfig,
    rng: Rng,
    counter: t.Optional[t.Counter] = None,
) -> t.Tuple[float, ...]:
    """
    One optimizer step over `batch`: the mean of the per-sample losses is
    backpropagated sample by sample, gradients are clipped to `grad_clip`
    and AdamW updates the trainable parameters. Returns the mean vertex,
    joint, smoothness and total losses, NaN for terms that were not
    evaluated.
    """
    store = model.store
    store.zero_grad()
    sums = np.zeros(4)
    for k, sample in enumerate(batch):
        terms = sample_terms(sample, model, dataset, sched, config, rng.substream(k), counter)
        values = terms.values()
        if not terms.finite():
            logger.error(
                "Loss terms of sample %d at step %d: %s",
                sample.index,
                store.step,
                ", ".join(f"{n}={v!r}" for n, v in zip(CSV_COLUMNS[1:], values)),
            )
            raise NumericError(
                f"Non-finite loss for sample {sample.index} at step {store.step}"
            )
        scale(terms.total, 1.0 / len(batch)).backward()
        sums += values
    norm = clip_grad_norm(store, config.grad_clip)
    if not math.isfinite(norm):
        indices = ", ".join(str(sample.index) for sample in batch)
        raise NumericError(f"Non-finite gradient at step {store.step} for samples {indices}")
    adamw_step(store, config.learning_rate, config.betas, config.weight_decay)
    return tuple(float(value) for value in sums / len(batch))


def train(
    model: Denoiser,
    dataset: Dataset,
    config: TrainConfig,
    epochs: t.Optional[int] = None,
    log: t.Optional[TrainingLog] = None,
) -> TrainingLog:
    """
    Train `model` on the training split for `epochs` (default
    `config.epochs`), shuffling every epoch. Step randomness is keyed by
    the store's step counter, so a resumed run continues the same streams.
    """
    config = record_settings(model, config)
    epochs = config.epochs if epochs is None else epochs
    log = log or TrainingLog()
    if log.average is None:
        log.average = LossAverage(config.ema_window)
    samples = dataset.train()
    if config.max_samples:
        samples = samples[: config.max_samples]
    if not samples:
        raise ConfigError("The training split is empty")
    sched = schedule_for(model, config)
    step_rng = Rng(config.seed, stream=TRAIN_STREAM)
    shuffle_rng = Rng(config.seed, stream=SHUFFLE_STREAM)
    first_epoch = model.store.step // math.ceil(len(samples) / config.batch_size)
    logger.info(
        "Training %s on %d samples for %d epochs", model, len(samples), epochs
    )
    for epoch in range(first_epoch, first_epoch + epochs):
        order = shuffle_rng.substream(epoch).permutation(len(samples))
        for start in range(0, len(samples), config.batch_size):
            batch = [samples[i] for i in order[start : start + config.batch_size]]
            step = model.store.step
            values = train_step(
                batch, model, dataset, sched, config, step_rng.substream(step), log.counter
            )
            log.record(step + 1, values)
            if config.log_every and (step + 1) % config.log_every == 0:
                logger.info(
                    "Step %d: loss %.6g (average %.6g)", step + 1, values[-1], log.average.value
                )
        logger.debug("Finished epoch %d", epoch + 1)
    for name, count in sorted(log.counter.items()):
        logger.warning("%s: %d during training", name.replace("_", " ").capitalize(), count)
    return log


def finetune_depth(
    model: Denoiser,
    dataset: Dataset,
    config: TrainConfig,
    log: t.Optional[TrainingLog] = None,
) -> TrainingLog:
    """
    Attach the zero-initialized depth branch to a trained model and train
    it for `finetune_epochs`; with `finetune_scope = branch` every other
    parameter stays frozen.
    """
    model.attach_depth_branch()
    if config.finetune_scope == "branch":
        model.store.freeze(DEPTH_PREFIX)
    try:
        return train(model, dataset, config, epochs=config.finetune_epochs, log=log)
    finally:
        model.store.freeze()


def predict_vertices(
    model: t.Any,
    sample: Sample,
    dataset: Dataset,
    steps: int,
    sched: t.Optional[NoiseSchedule],
    config: TrainConfig,
) -> Array:
    """
    Predicted camera-frame vertices of `sample`, placed at the ground-truth
    root. Chains use a substream keyed by the sample index. `config` must
    already carry the model's recorded settings.
    """
    cond = model.condition(sample.image, _sample_depth(model, sample))
    if sched is None:
        coords = model.predict(model.query_input().data, 0, cond)
    else:
        rng = Rng(config.seed, stream=EVAL_STREAM).substream(sample.index)
        coords = sample_loop(
            model.predict,
            cond,
            steps,
            model.config.vertex_count,
            sched,
            rng,
            eta=config.eta,
            x0_clip=config.x0_clip,
            objective=config.objective,
        ).coords
    return dataset.denormalize(coords, sample.root)


def evaluate(
    model: t.Any,
    dataset: Dataset,
    config: TrainConfig,
    steps: t.Optional[t.Sequence[int]] = None,
    samples: t.Optional[t.Sequence[Sample]] = None,
) -> t.List[t.Tuple[int, t.Dict[str, float]]]:
    """
    Mean metrics in milli-units over `samples` (default: the test split),
    one row per DDIM step count in `steps`. Models without diffusion decode
    once and repeat that row for every step count.
    """
    config = recorded_settings(model, config)
    steps = list(steps or [config.inference_steps])
    samples = dataset.test() if samples is None else samples
    sched = schedule_for(model, config)
    rows = []
    cached = None
    for count in steps:
        if sched is None and cached is not None:
            rows.append((count, dict(cached)))
            continue
        totals = dict.fromkeys(METRIC_NAMES, 0.0)
        for i, sample in enumerate(samples):
            pred = predict_vertices(model, sample, dataset, count, sched, config)
            errors = metrics(
                pred, sample.verts, dataset.template.regressor, config.root_relative
            )
            for name in METRIC_NAMES:
                totals[name] += errors[name]
            logger.debug("Evaluated sample %d of %d", i + 1, len(samples))
        means = {name: MILLI * totals[name] / max(len(samples), 1) for name in METRIC_NAMES}
        logger.info(
            "Steps %d: %s", count, ", ".join(f"{n} {v:.4g}" for n, v in means.items())
        )
        rows.append((count, means))
        cached = means
    return rows


def pa_mpvpe_target(samples: t.Sequence[Sample]) -> float:
    """
    E_PV to reach, in milli-units: `PA_TARGET_FRACTION` of the mean
    bounding-box diagonal of the ground-truth meshes.

    Examples:

        >>> import types
        >>> cube = types.SimpleNamespace(verts=np.array([[0.0, 0, 0], [0.1, 0.2, 0.2]]))
        >>> round(pa_mpvpe_target([cube]), 6)
        15.0
    """
    if not samples:
        raise ConfigError("No samples to derive a target from")
    diagonals = [np.linalg.norm(np.ptp(sample.verts, axis=0)) for sample in samples]
    return MILLI * PA_TARGET_FRACTION * float(np.mean(diagonals))


def ablation_run(
    dataset: Dataset,
    model_config: ModelConfig,
    config: TrainConfig,
    variants: t.Sequence[t.Tuple[str, bool, bool]] = VARIANTS,
    samples: t.Optional[t.Sequence[Sample]] = None,
) -> t.List[t.Tuple[str, t.Dict[str, float]]]:
    """
    Train and evaluate every (diffusion, cross-modality decoder) variant
    from the same seed and dataset, scoring each on `samples` (default: the
    test split).
    """
    table = []
    for name, use_diffusion, use_decoder in variants:
        logger.info("Ablation variant %s", name)
        variant_config = model_config.replace(
            use_diffusion=use_diffusion, use_cross_modality_decoder=use_decoder
        )
        model = Denoiser(variant_config, seed=config.seed)
        train(model, dataset, config)
        rows = evaluate(model, dataset, config, samples=samples)
        table.append((name, rows[0][1]))
    return table


def write_metrics_csv(fh: t.TextIO, rows: t.Sequence[t.Tuple[t.Any, t.Dict[str, float]]]):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for label, means in rows:
        writer.writerow([str(label)] + [f"{means[name]:.9g}" for name in METRIC_NAMES])


def format_table(rows: t.Sequence[t.Tuple[t.Any, t.Dict[str, float]]]) -> str:
    """
    Fixed-width summary of metric rows.

    Examples:

        >>> print(format_table([("full", dict(E_J=1.0, E_PJ=0.5, E_V=2.0, E_PV=0.25))]))
        variant         E_J      E_PJ       E_V      E_PV
        full          1.000     0.500     2.000     0.250
    """
    width = max([len("variant")] + [len(str(label)) for label, _ in rows]) + 2
    lines = [f"{'variant':<{width}}" + "".join(f"{name:>10}" for name in METRIC_NAMES)]
    for label, means in rows:
        lines.append(
            f"{str(label):<{width}}"
            + "".join(f"{means[name]:>10.3f}" for name in METRIC_NAMES)
        )
    return "\n".join(lines)
