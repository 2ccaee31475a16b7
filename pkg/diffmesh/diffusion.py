""" Noise schedules, forward corruption and reverse samplers over vertex sets. """

import dataclasses
import logging
import math
import typing as t

import numpy as np

from diffmesh.errors import (
    ConfigError,
    OrderingError,
    ShapeError,
    StateError,
    TimestepError,
)
from diffmesh.numcore import Rng
from diffmesh.typing import Array, Timestep


logger = logging.getLogger(__name__)

COSINE_OFFSET = 0.008
MAX_BETA = 0.999
X0_CLIP = 1.5
OBJECTIVES = ("x0", "epsilon")

# A denoiser maps (x_t coords, t, condition) to the predicted clean coords,
# or to the predicted noise under the epsilon objective.
Denoiser = t.Callable[[Array, Timestep, t.Any], Array]


@dataclasses.dataclass
class VertexSet:
    """
    Vertex coordinates `coords` (N×3) at diffusion timestep `t`, where
    `t = 0` is clean data.
    """

    coords: Array
    t: Timestep = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ShapeError(f"Expected N×3 vertex coordinates, got {self.coords.shape}")

    def __len__(self) -> int:
        return self.coords.shape[0]


def _coords(x: t.Union[VertexSet, Array]) -> Array:
    if isinstance(x, VertexSet):
        return x.coords
    return np.asarray(x, dtype=np.float64)


class NoiseSchedule:
    """
    Precomputed β, α and ᾱ tables indexed by timestep 0..T, with index 0 the
    clean state (β = 0, ᾱ = 1). Every timestep lookup is counted in `reads`.

    Examples:

        >>> sched = build_cosine_schedule(1000)
        >>> sched.alpha_bar_at(1) > 0.99, sched.alpha_bar_at(1000) < 1e-3
        (True, True)
        >>> sched.reads
        2
    """

    def __init__(self, beta: Array):
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.shape[0] < 2:
            raise ConfigError("A noise schedule needs at least 2 timesteps")
        if np.any(beta < 0.0) or np.any(beta >= 1.0):
            raise ConfigError("Every beta must lie in [0, 1)")
        self.T = beta.shape[0]
        self.beta = np.concatenate([[0.0], beta])
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        self.reads = 0

    def __repr__(self) -> str:
        return f"NoiseSchedule(T={self.T})"

    def check_timestep(self, t: Timestep, lowest: int = 1):
        if not lowest <= t <= self.T:
            raise TimestepError(f"Timestep {t} outside {lowest}..{self.T}")

    def beta_at(self, t: Timestep) -> float:
        self.check_timestep(t, lowest=0)
        self.reads += 1
        return float(self.beta[t])

    def alpha_at(self, t: Timestep) -> float:
        self.check_timestep(t, lowest=0)
        self.reads += 1
        return float(self.alpha[t])

    def alpha_bar_at(self, t: Timestep) -> float:
        self.check_timestep(t, lowest=0)
        self.reads += 1
        return float(self.alpha_bar[t])


def cosine_alpha_bar(T: int, s: float = COSINE_OFFSET) -> Array:
    """
    Closed-form ᾱ for timesteps 0..T, before any clipping of β.

    Examples:

        >>> cosine_alpha_bar(4)[0]
        1.0
    """
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    return f / f[0]


def build_cosine_schedule(T: int, s: float = COSINE_OFFSET) -> NoiseSchedule:
    """
    Build the cosine schedule for `T` timesteps: β_t = 1 − ᾱ_t/ᾱ_{t−1} from
    the closed-form ᾱ, clipped to at most 0.999.

    Examples:

        >>> build_cosine_schedule(1)
        Traceback (most recent call last):
          ...
        diffmesh.errors.ConfigError: Timestep count must be at least 2, got 1
    """
    if T < 2:
        raise ConfigError(f"Timestep count must be at least 2, got {T}")
    alpha_bar = cosine_alpha_bar(T, s)
    beta = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 0.0, MAX_BETA)
    return NoiseSchedule(beta)


def q_sample(
    x0: t.Union[VertexSet, Array], t: Timestep, eps: Array, sched: NoiseSchedule
) -> VertexSet:
    """Corrupt clean `x0` directly to timestep `t` with the noise draw `eps`."""
    sched.check_timestep(t)
    coords = _coords(x0)
    alpha_bar = sched.alpha_bar_at(t)
    return VertexSet(
        math.sqrt(alpha_bar) * coords + math.sqrt(1.0 - alpha_bar) * eps, t
    )


def forward_chain_step(
    x_prev: VertexSet, t: Timestep, eps: Array, sched: NoiseSchedule
) -> VertexSet:
    """Advance the forward chain from `t − 1` to `t` with the noise draw `eps`."""
    sched.check_timestep(t)
    if x_prev.t != t - 1:
        raise StateError(f"Cannot step to timestep {t} from timestep {x_prev.t}")
    beta = sched.beta_at(t)
    return VertexSet(math.sqrt(1.0 - beta) * x_prev.coords + math.sqrt(beta) * eps, t)


def posterior_mean_variance(
    x_t: Array, x0_hat: Array, t: Timestep, sched: NoiseSchedule
) -> t.Tuple[Array, float]:
    """Mean and variance of q(x_{t−1} | x_t, x̂0)."""
    beta = sched.beta_at(t)
    alpha = sched.alpha_at(t)
    alpha_bar = sched.alpha_bar_at(t)
    alpha_bar_prev = sched.alpha_bar_at(t - 1)
    mean = (math.sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar)) * x0_hat + (
        math.sqrt(alpha) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    ) * x_t
    variance = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return mean, variance


def ddpm_posterior_step(
    x_t: VertexSet,
    x0_hat: Array,
    t: Timestep,
    sched: NoiseSchedule,
    rng: t.Optional[Rng],
) -> VertexSet:
    """
    Draw x_{t−1} from the posterior given the clean prediction `x0_hat`. The
    variance is fixed to β̃_t; the final step from t = 1 adds no noise.
    """
    if t == 0:
        raise TimestepError("Cannot step below the clean timestep 0")
    sched.check_timestep(t)
    if x_t.t != t:
        raise StateError(f"Vertex set is at timestep {x_t.t}, not {t}")
    mean, variance = posterior_mean_variance(x_t.coords, _coords(x0_hat), t, sched)
    if t > 1:
        if rng is None:
            raise StateError("A random stream is needed for stochastic steps")
        mean = mean + math.sqrt(variance) * rng.normal(mean.shape)
    return VertexSet(mean, t - 1)


def ddim_sigma(t: Timestep, t_prev: Timestep, sched: NoiseSchedule, eta: float) -> float:
    alpha_bar = sched.alpha_bar_at(t)
    alpha_bar_prev = sched.alpha_bar_at(t_prev)
    return (
        eta
        * math.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar))
        * math.sqrt(1.0 - alpha_bar / alpha_bar_prev)
    )


def ddim_step(
    x_t: VertexSet,
    x0_hat: Array,
    t: Timestep,
    t_prev: Timestep,
    sched: NoiseSchedule,
    eta: float = 0.0,
    rng: t.Optional[Rng] = None,
) -> VertexSet:
    """
    Jump from `t` to `t_prev` given the clean prediction `x0_hat`. With
    `eta = 0` the step is deterministic; `eta = 1` on consecutive timesteps
    matches `ddpm_posterior_step` in distribution.
    """
    if t_prev >= t:
        raise OrderingError(f"Previous timestep {t_prev} must be below {t}")
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    sched.check_timestep(t)
    sched.check_timestep(t_prev, lowest=0)
    x0_hat = _coords(x0_hat)
    alpha_bar = sched.alpha_bar_at(t)
    alpha_bar_prev = sched.alpha_bar_at(t_prev)
    eps_hat = eps_from_x0(x_t.coords, x0_hat, alpha_bar)
    sigma = ddim_sigma(t, t_prev, sched, eta)
    coords = math.sqrt(alpha_bar_prev) * x0_hat + math.sqrt(
        max(0.0, 1.0 - alpha_bar_prev - sigma ** 2)
    ) * eps_hat
    if sigma > 0.0:
        if rng is None:
            raise StateError("A random stream is needed when eta > 0")
        coords = coords + sigma * rng.normal(coords.shape)
    return VertexSet(coords, t_prev)


def eps_from_x0(x_t: t.Any, x0: t.Any, alpha_bar: float) -> t.Any:
    """Noise implied by `x_t` and a clean estimate. Works on arrays and tensors."""
    return (x_t - math.sqrt(alpha_bar) * x0) * (1.0 / math.sqrt(1.0 - alpha_bar))


def x0_from_eps(x_t: t.Any, eps: t.Any, alpha_bar: float) -> t.Any:
    """Clean estimate implied by `x_t` and a noise estimate."""
    return (x_t - math.sqrt(1.0 - alpha_bar) * eps) * (1.0 / math.sqrt(alpha_bar))


def timestep_subsequence(T: int, steps: int) -> t.List[t.Tuple[Timestep, Timestep]]:
    """
    Evenly spaced descending `(t, t_prev)` pairs starting at `T` and ending
    with `t_prev = 0`, rounding down.

    Examples:

        >>> timestep_subsequence(1000, 4)
        [(1000, 750), (750, 500), (500, 250), (250, 0)]

        >>> timestep_subsequence(10, 3)
        [(10, 6), (6, 3), (3, 0)]

        >>> timestep_subsequence(10, 11)
        Traceback (most recent call last):
          ...
        diffmesh.errors.ConfigError: Cannot sample 11 steps from 10 timesteps
    """
    if steps < 1 or steps > T:
        raise ConfigError(f"Cannot sample {steps} steps from {T} timesteps")
    timesteps = [T * (steps - i) // steps for i in range(steps)] + [0]
    return list(zip(timesteps[:-1], timesteps[1:]))


def predicted_x0(
    prediction: Array, x_t: VertexSet, sched: NoiseSchedule, objective: str = "x0"
) -> Array:
    """
    The clean estimate a model output stands for: the output itself under
    the x0 objective, converted from a noise estimate under `epsilon`.

    Examples:

        >>> sched = build_cosine_schedule(10)
        >>> x_t = VertexSet(np.ones((1, 3)), 5)
        >>> eps = eps_from_x0(x_t.coords, np.zeros((1, 3)), sched.alpha_bar[5])
        >>> np.abs(predicted_x0(eps, x_t, sched, "epsilon")).max() < 1e-12
        True
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    if objective == "x0":
        return prediction
    if objective == "epsilon":
        return x0_from_eps(x_t.coords, prediction, sched.alpha_bar_at(x_t.t))
    raise ConfigError(f"objective must be one of {', '.join(OBJECTIVES)}, got {objective!r}")


def sample_loop(
    model: Denoiser,
    cond: t.Any,
    steps: int,
    N: int,
    sched: NoiseSchedule,
    rng: Rng,
    eta: float = 0.0,
    x0_clip: t.Optional[float] = X0_CLIP,
    objective: str = "x0",
) -> VertexSet:
    """
    Generate a clean vertex set by DDIM sampling from x_T ~ N(0, I). The model
    is called as `model(coords, t, cond)` and returns x̂0, or ε̂ when
    `objective` is `epsilon`; clean estimates are clamped to ±`x0_clip`.
    """
    pairs = timestep_subsequence(sched.T, steps)
    x = VertexSet(rng.normal((N, 3)), sched.T)
    for t, t_prev in pairs:
        x0_hat = predicted_x0(model(x.coords, t, cond), x, sched, objective)
        if x0_clip is not None:
            x0_hat = np.clip(x0_hat, -x0_clip, x0_clip)
        x = ddim_step(x, x0_hat, t, t_prev, sched, eta=eta, rng=rng)
        logger.debug("Sampling step t=%d -> %d", t, t_prev)
    return x


def sample_hypotheses(
    model: Denoiser,
    cond: t.Any,
    steps: int,
    N: int,
    sched: NoiseSchedule,
    rng: Rng,
    count: int,
    eta: float = 0.0,
    x0_clip: t.Optional[float] = X0_CLIP,
    objective: str = "x0",
) -> t.Tuple[Array, Array]:
    """
    Run `count` independent sampling chains, one substream of `rng` each, and
    return the mean prediction (N×3) and the per-vertex RMS deviation of the
    chains from it (N).
    """
    if count < 1:
        raise ConfigError(f"Hypothesis count must be positive, got {count}")
    chains = np.stack(
        [
            sample_loop(
                model,
                cond,
                steps,
                N,
                sched,
                rng.substream(k),
                eta=eta,
                x0_clip=x0_clip,
                objective=objective,
            ).coords
            for k in range(count)
        ]
    )
    mean = chains.mean(axis=0)
    spread = np.sqrt(((chains - mean) ** 2).sum(axis=-1).mean(axis=0))
    return mean, spread
