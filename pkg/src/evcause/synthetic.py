"""Confounded synthetic event data with known potential outcomes and ATT.

The generating process is intentionally simple so every moment is checkable
by hand:

* A latent confounder per location follows an AR(1) process whose innovation
  is mixed with ring-graph neighbours.
* Event counts are Poisson with log-rate affine in the trailing window mean
  of the confounder, scaled by the assignment sharpness. Sharpness zero
  decouples counts from the confounder entirely, which removes confounding.
* Realised treatments are re-derived from the emitted counts by the same
  window rule the estimators use, so the rule is the single source of
  treatment labels; the latent confounder only shapes the counts.
* The target event occurs with probability logistic in the confounder and
  the realised treatment vector one lead earlier. Potential outcomes force
  one treatment coordinate at a time and share the occurrence draw, so the
  factual outcome always equals the potential outcome of the realised arm.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import EventCube, window_treatment_flags
from .errors import MetricError, ParameterError

# Count model constants. Base rates keep window means well away from zero so
# the 1.5x rule has a stable baseline and matching on raw counts stays
# informative; couplings differ per type so no two treatment events carry
# identical information.
COUNT_BASE_LOG = np.log(6.0)
TARGET_EXTRA_BASE_LOG = np.log(1.5)
CONFOUNDER_OUTCOME_WEIGHT = 2.0


def _sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class SyntheticConfig:
    M: int = 6
    E: int = 4
    T: int = 3000
    window: int = 7
    lead: int = 1
    confounder_dim: int = 1
    ar_coef: float = 0.97
    neighbor_mix: float = 0.25
    sharpness: float = 2.0
    effect_sizes: tuple = (0.0, 1.0, 0.0, 0.0)
    base_rate: float = 0.3
    target_type: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("M", "E", "T", "window", "lead", "confounder_dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"synthetic config field {name} must be positive")
        if not abs(self.ar_coef) < 1:
            raise ParameterError(f"AR coefficient must satisfy |a| < 1, got {self.ar_coef}")
        if not 0.0 <= self.neighbor_mix < 1.0:
            raise ParameterError(f"neighbor_mix must lie in [0, 1), got {self.neighbor_mix}")
        if self.sharpness < 0:
            raise ParameterError(f"sharpness must be nonnegative, got {self.sharpness}")
        if not 0.0 < self.base_rate < 1.0:
            raise ParameterError(f"base_rate must lie in (0, 1), got {self.base_rate}")
        self.effect_sizes = tuple(float(v) for v in self.effect_sizes)
        if len(self.effect_sizes) != self.E:
            raise ParameterError(
                f"need {self.E} effect sizes, got {len(self.effect_sizes)}"
            )
        if not 0 <= self.target_type < self.E:
            raise ParameterError(f"target_type {self.target_type} outside [0, {self.E})")
        if self.T < 2 * self.window + self.lead:
            raise ParameterError("T too small for one full sample window")
        if self.sharpness == 0 and all(v == 0 for v in self.effect_sizes):
            warnings.warn(
                "degenerate synthetic config: zero sharpness and zero effects",
                stacklevel=2,
            )

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ParameterError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in self.__dataclass_fields__}
        out["effect_sizes"] = list(self.effect_sizes)
        return out


@dataclass
class GroundTruth:
    """Oracle quantities for every sample, aligned with ``build_samples`` order."""

    locations: np.ndarray        # (N,)
    times: np.ndarray            # (N,)
    treatments: np.ndarray       # (N, E) realised, re-derived from counts
    y1_prob: np.ndarray          # (N, E) P[outcome | treatment j forced on]
    y0_prob: np.ndarray          # (N, E)
    ite: np.ndarray              # (N, E) = y1_prob - y0_prob
    y1_draw: np.ndarray          # (N, E) sampled potential outcomes
    y0_draw: np.ndarray          # (N, E)
    factual_prob: np.ndarray     # (N,)
    factual_draw: np.ndarray     # (N,)
    att: np.ndarray              # (E,) mean ITE over treated; NaN if none treated
    treated_fraction: np.ndarray  # (E,)
    confounding_bias: np.ndarray  # (E,) exact naive-minus-true gap from probabilities
    confounding_bias_bound: np.ndarray  # (E,) half the absolute exact gap
    latent_confounder: np.ndarray  # (M, T) the scalar confounder series
    config: SyntheticConfig = field(repr=False, default=None)

    @property
    def num_samples(self) -> int:
        return self.locations.shape[0]

    def sample_keys(self) -> list[str]:
        return [f"{i}:{t}" for i, t in zip(self.locations, self.times)]

    def to_json_dict(self) -> dict:
        treatments = {}
        keys = self.sample_keys()
        for j in range(self.ite.shape[1]):
            treatments[str(j)] = {
                "att": None if np.isnan(self.att[j]) else float(self.att[j]),
                "treated_fraction": float(self.treated_fraction[j]),
                "confounding_bias_bound": float(self.confounding_bias_bound[j]),
                "samples": {
                    key: {
                        "y1_prob": float(self.y1_prob[n, j]),
                        "y0_prob": float(self.y0_prob[n, j]),
                        "ite": float(self.ite[n, j]),
                    }
                    for n, key in enumerate(keys)
                },
            }
        return {"treatments": treatments}


def _ring_neighbors(m: int) -> np.ndarray:
    """Row-stochastic matrix averaging the two ring neighbours of each node."""
    ring = np.zeros((m, m))
    for i in range(m):
        ring[i, (i - 1) % m] += 0.5
        ring[i, (i + 1) % m] += 0.5
    return ring


def _trailing_mean(series: np.ndarray, window: int) -> np.ndarray:
    """Mean over [t-window+1, t] along the last axis, partial at the start."""
    steps = series.shape[-1]
    padded = np.concatenate([np.zeros(series.shape[:-1] + (1,)), np.cumsum(series, axis=-1)], axis=-1)
    out = np.empty_like(series, dtype=np.float64)
    for t in range(steps):
        lo = max(0, t - window + 1)
        out[..., t] = (padded[..., t + 1] - padded[..., lo]) / (t + 1 - lo)
    return out


def generate(config: SyntheticConfig) -> tuple[EventCube, GroundTruth]:
    """Deterministically generate a cube and its ground-truth potential outcomes."""
    m, e, steps = config.M, config.E, config.T
    window, lead = config.window, config.lead
    rng = np.random.default_rng(config.seed)

    # Latent confounder: AR(1) with ring mixing, unit-ish marginal variance.
    mix = (1.0 - config.neighbor_mix) * np.eye(m) + config.neighbor_mix * _ring_neighbors(m)
    sigma = np.sqrt(max(1.0 - config.ar_coef**2, 1e-6))
    u = np.zeros((m, steps, config.confounder_dim))
    u[:, 0] = rng.standard_normal((m, config.confounder_dim))
    for t in range(1, steps):
        u[:, t] = config.ar_coef * (mix @ u[:, t - 1]) + sigma * rng.standard_normal(
            (m, config.confounder_dim)
        )
    latent = u.mean(axis=-1)                       # (M, T)
    ubar = _trailing_mean(latent, window)          # (M, T)

    omega = rng.uniform(size=(m, steps))           # shared occurrence draws
    coupling = np.linspace(0.6, 1.0, e)            # per-type confounder loading
    effects = np.asarray(config.effect_sizes)
    gamma0 = float(np.log(config.base_rate / (1.0 - config.base_rate)))
    target = config.target_type

    counts = np.zeros((m, e, steps), dtype=np.int64)
    factual_prob_grid = np.zeros((m, steps))
    first_treated_time = 2 * window - 1 + lead
    for t in range(steps):
        log_rate = COUNT_BASE_LOG + config.sharpness * coupling[None, :] * ubar[:, t, None]
        rate = np.exp(np.clip(log_rate, -30.0, 8.0))
        for j in range(e):
            if j == target:
                continue
            counts[:, j, t] = rng.poisson(rate[:, j])
        if t >= first_treated_time:
            realized = window_treatment_flags(counts, window, t - lead)  # (M, E)
        else:
            realized = np.zeros((m, e), dtype=np.int8)
        logit = gamma0 + CONFOUNDER_OUTCOME_WEIGHT * ubar[:, t] + realized @ effects
        prob = _sigmoid(logit)
        factual_prob_grid[:, t] = prob
        occurred = omega[:, t] < prob
        extra_rate = np.exp(
            np.clip(TARGET_EXTRA_BASE_LOG + config.sharpness * coupling[target] * ubar[:, t], -30.0, 8.0)
        )
        counts[:, target, t] = occurred * (1 + rng.poisson(extra_rate))

    cube = EventCube(
        counts,
        [f"L{i:02d}" for i in range(m)],
        geo_adjacency=_ring_neighbors(m),
    )

    # Ground truth over the sample rectangle, time-major to match build_samples.
    sample_times = np.arange(2 * window - 1, steps - lead)
    nt = sample_times.shape[0]
    n = nt * m
    locations = np.tile(np.arange(m), nt)
    times = np.repeat(sample_times, m)

    c_all = np.zeros((nt, m, e), dtype=np.int8)
    for r, t in enumerate(sample_times):
        c_all[r] = window_treatment_flags(counts, window, int(t))
    outcome_ubar = ubar[:, sample_times + lead].T      # (nt, M)
    omega_out = omega[:, sample_times + lead].T        # (nt, M)

    base = gamma0 + CONFOUNDER_OUTCOME_WEIGHT * outcome_ubar  # (nt, M)
    common = base + c_all @ effects                            # (nt, M)
    y1_prob = np.empty((nt, m, e))
    y0_prob = np.empty((nt, m, e))
    for j in range(e):
        excl = common - effects[j] * c_all[:, :, j]
        y1_prob[:, :, j] = _sigmoid(excl + effects[j])
        y0_prob[:, :, j] = _sigmoid(excl)
    y1_draw = (omega_out[:, :, None] < y1_prob).astype(np.int8)
    y0_draw = (omega_out[:, :, None] < y0_prob).astype(np.int8)
    factual_prob = _sigmoid(common)
    factual_draw = (omega_out < factual_prob).astype(np.int8)

    flat_c = c_all.reshape(n, e)
    flat_y1 = y1_prob.reshape(n, e)
    flat_y0 = y0_prob.reshape(n, e)
    ite = flat_y1 - flat_y0
    flat_fact = factual_prob.reshape(n)

    att = np.full(e, np.nan)
    treated_fraction = np.zeros(e)
    bias = np.zeros(e)
    for j in range(e):
        treated = flat_c[:, j] == 1
        treated_fraction[j] = treated.mean()
        if treated.any():
            att[j] = ite[treated, j].mean()
            if (~treated).any():
                naive_exact = flat_fact[treated].mean() - flat_fact[~treated].mean()
                bias[j] = naive_exact - att[j]

    truth = GroundTruth(
        locations=locations,
        times=times,
        treatments=flat_c,
        y1_prob=flat_y1,
        y0_prob=flat_y0,
        ite=ite,
        y1_draw=y1_draw.reshape(n, e),
        y0_draw=y0_draw.reshape(n, e),
        factual_prob=flat_fact,
        factual_draw=factual_draw.reshape(n),
        att=att,
        treated_fraction=treated_fraction,
        confounding_bias=bias,
        confounding_bias_bound=np.abs(bias) / 2.0,
        latent_confounder=latent,
        config=config,
    )
    return cube, truth


def true_att(truth: GroundTruth, treatment: int) -> float:
    """Mean true effect over samples whose realised treatment is on."""
    if not 0 <= treatment < truth.ite.shape[1]:
        raise ParameterError(f"treatment index {treatment} out of range")
    treated = truth.treatments[:, treatment] == 1
    if not treated.any():
        raise MetricError(f"ATT undefined: no treated samples for treatment {treatment}")
    return float(truth.ite[treated, treatment].mean())


def naive_difference_in_means(outcomes: np.ndarray, treated_flags: np.ndarray) -> float:
    """Unadjusted difference of factual outcome means, the confounded baseline."""
    treated = treated_flags == 1
    if not treated.any() or treated.all():
        raise MetricError("difference in means undefined: one group is empty")
    y = np.asarray(outcomes, dtype=np.float64)
    return float(y[treated].mean() - y[~treated].mean())
