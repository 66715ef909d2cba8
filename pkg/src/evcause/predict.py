"""Causally guided event prediction.

Stage two of the pipeline: a pluggable event predictor is trained on
covariate windows while the frozen stage-one model supplies, per sample, an
estimated-effect vector and potential-outcome bounds. Two optional modules
consume that prior knowledge: a feature-reweighting gate derived from the
effect vector, and a hinge penalty keeping predictions inside the
potential-outcome range. With both modules off, training reduces exactly to
the bare predictor: the frozen model is never consulted.
"""

from __future__ import annotations

import abc
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .causal import CausalModel, SpatioTemporalEncoder
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSplit, time_grids
from .errors import ConfigError, ConsistencyError, ParameterError, TrainingError
from .evaluation import bacc
from .optim import ParamStore, adam_step, glorot_init


@dataclass
class PredictorConfig:
    predictor: str = "baseline"   # "baseline" or "external-stub"
    d_s: int = 16
    d_a: int = 10
    kernel_size: int = 2
    dilations: tuple = (1, 2, 4)
    gcn_layers: int = 2
    lr: float = 1e-3
    batch_size: int = 64
    dropout: float = 0.5
    patience: int = 10
    max_epochs: int = 100
    mu: float = 1e-2              # constraint-loss weight
    use_reweight: bool = False
    use_constraint: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.predictor not in ("baseline", "external-stub"):
            raise ConfigError(f"unknown predictor {self.predictor!r}")
        if self.mu < 0:
            raise ConfigError(f"mu must be nonnegative, got {self.mu}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        self.dilations = tuple(int(d) for d in self.dilations)

    @classmethod
    def from_dict(cls, raw: dict) -> "PredictorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown predictor config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in self.__dataclass_fields__}
        out["dilations"] = list(self.dilations)
        return out


class PredictorInterface(abc.ABC):
    """Contract for event predictors: probabilities in, summed BCE loss out.

    ``forward`` maps a batch of covariate windows (B, M, E, window), plus an
    optional location-adjacency matrix, to per-location event probabilities
    (B, M) in (0, 1). External predictors plug in by subclassing.
    """

    store: ParamStore

    @abc.abstractmethod
    def forward(self, x, adjacency=None, training=False, drop_rng=None) -> Tensor:
        ...

    def loss(self, predictions: Tensor, labels, mask=None) -> Tensor:
        per = ad.bce_elements(predictions, labels)
        if mask is not None:
            per = per * np.asarray(mask, dtype=np.float64)
        return ad.tensor_sum(per)


class BaselinePredictor(PredictorInterface):
    """Gated-TCN / graph-convolution predictor reusing the stage-one blocks."""

    def __init__(self, config: PredictorConfig, num_locations: int,
                 num_event_types: int, window: int):
        self.config = config
        self.num_locations = num_locations
        self.num_event_types = num_event_types
        self.window = window
        self.store = ParamStore()
        rng = np.random.default_rng(config.seed)
        self.encoder = SpatioTemporalEncoder(
            self.store, rng, num_locations, num_event_types, config.d_s, config.d_a,
            config.kernel_size, config.dilations, config.gcn_layers, prefix="enc_",
        )
        self.encoder.check_window(window)
        self.out_w = self.store.add("out_w", glorot_init((config.d_s, 1), rng).data)
        self.out_b = self.store.add("out_b", np.zeros(1))

    def forward(self, x, adjacency=None, training=False, drop_rng=None) -> Tensor:
        # The built-in predictor learns its own adaptive adjacency; the
        # argument exists for external predictors that consume a fixed graph.
        x = x if isinstance(x, Tensor) else Tensor(x)
        g = self.encoder.encode(x, training, drop_rng, self.config.dropout)
        logits = ad.matmul(g, self.out_w) + self.out_b
        return ad.reshape(ad.sigmoid(logits), (x.shape[0], x.shape[1]))


class ExternalStubPredictor(PredictorInterface):
    """Minimal linear predictor standing in for an external model.

    Exists to exercise the plug-in surface: anything implementing
    ``PredictorInterface`` can be trained by ``train_predictor``.
    """

    def __init__(self, config: PredictorConfig, num_locations: int,
                 num_event_types: int, window: int):
        self.config = config
        self.num_locations = num_locations
        self.num_event_types = num_event_types
        self.window = window
        self.store = ParamStore()
        rng = np.random.default_rng(config.seed)
        flat = num_event_types * window
        self.w = self.store.add("stub_w", glorot_init((flat, 1), rng).data * 0.1)
        self.b = self.store.add("stub_b", np.zeros(1))

    def forward(self, x, adjacency=None, training=False, drop_rng=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        batch, m = x.shape[0], x.shape[1]
        flat = ad.reshape(x, (batch, m, x.shape[2] * x.shape[3]))
        logits = ad.matmul(flat, self.w) + self.b
        return ad.reshape(ad.sigmoid(logits), (batch, m))


PREDICTOR_TYPES = {"baseline": BaselinePredictor, "external-stub": ExternalStubPredictor}


def build_predictor(config: PredictorConfig, num_locations: int, num_event_types: int,
                    window: int) -> PredictorInterface:
    return PREDICTOR_TYPES[config.predictor](config, num_locations, num_event_types, window)


# -- causal prior modules -----------------------------------------------------------


def _raw(values) -> np.ndarray:
    return values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)


def estimate_ite(y1, y0):
    """Per-treatment effect estimates from potential-outcome pairs."""
    a1, a0 = _raw(y1), _raw(y0)
    if a1.shape != a0.shape:
        raise ConsistencyError(
            f"potential-outcome shapes disagree: {a1.shape} vs {a0.shape}"
        )
    if isinstance(y1, Tensor) or isinstance(y0, Tensor):
        return ad.sub(y1, y0)
    return a1 - a0


def outcome_bounds(y1, y0):
    """Sample-wise (lower, upper) over all 2E potential outcomes."""
    a1, a0 = _raw(y1), _raw(y0)
    if a1.shape != a0.shape:
        raise ConsistencyError(
            f"potential-outcome shapes disagree: {a1.shape} vs {a0.shape}"
        )
    lower = np.minimum(a1.min(axis=-1), a0.min(axis=-1))
    upper = np.maximum(a1.max(axis=-1), a0.max(axis=-1))
    return lower, upper


def constraint_loss(y_hat, lower, upper, mask=None) -> Tensor:
    """Hinge penalty outside [lower, upper], summed over samples."""
    y_hat = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
    lo = np.asarray(lower, dtype=np.float64)
    up = np.asarray(upper, dtype=np.float64)
    if np.any(lo > up):
        raise ParameterError("constraint bounds violated: lower > upper")
    per = ad.relu(Tensor(lo) - y_hat) + ad.relu(y_hat - Tensor(up))
    if mask is not None:
        per = per * np.asarray(mask, dtype=np.float64)
    return ad.tensor_sum(per)


class ReweightModule:
    """Feature gates from estimated effects, with a residual reweighting path.

    One gate vector per sample, applied uniformly across the window: the
    effect estimate is per sample, not per historical step.
    """

    def __init__(self, store: ParamStore, rng, num_event_types: int):
        self.num_event_types = num_event_types
        self.gate_w = store.add("rw_gate_w", glorot_init((num_event_types, num_event_types), rng).data)
        self.gate_b = store.add("rw_gate_b", np.zeros(num_event_types))
        self.ffn_w0 = store.add("rw_ffn_w0", glorot_init((num_event_types, num_event_types), rng).data)
        self.ffn_b0 = store.add("rw_ffn_b0", np.zeros(num_event_types))
        # Near-identity start: a damped second layer keeps the gated path small
        # at initialisation, so reweighting departs gently from the residual.
        self.ffn_w1 = store.add("rw_ffn_w1", glorot_init((num_event_types, num_event_types), rng).data * 0.1)
        self.ffn_b1 = store.add("rw_ffn_b1", np.zeros(num_event_types))

    def causal_gates(self, ite) -> Tensor:
        """Soft gates in (0, 1) from an effect vector shaped (..., E)."""
        ite = ite if isinstance(ite, Tensor) else Tensor(ite)
        squeeze = ite.ndim == 1
        if squeeze:
            ite = ad.reshape(ite, (1, self.num_event_types))
        gates = ad.sigmoid(ad.matmul(ite, self.gate_w) + self.gate_b)
        if squeeze:
            gates = ad.reshape(gates, (self.num_event_types,))
        return gates

    def reweight_features(self, x, gates) -> Tensor:
        """Gate an FFN image of the covariates and add the residual input.

        ``x`` is (..., E, window); ``gates`` is (..., E) for the same leading
        dimensions (or a single vector for a single window).
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        gates = gates if isinstance(gates, Tensor) else Tensor(gates)
        squeeze = x.ndim == 2
        if squeeze:
            x = ad.reshape(x, (1, 1) + tuple(x.shape))
            gates = ad.reshape(gates, (1, 1, self.num_event_types))
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
        xt = x.transpose(axes)                      # (..., window, E)
        hidden = ad.relu(ad.matmul(xt, self.ffn_w0) + self.ffn_b0)
        mapped = ad.matmul(hidden, self.ffn_w1) + self.ffn_b1
        gate_shape = tuple(gates.shape[:-1]) + (1, self.num_event_types)
        gated = mapped * ad.reshape(gates, gate_shape) + xt
        out = gated.transpose(axes)
        if squeeze:
            out = ad.reshape(out, tuple(out.shape[2:]))
        return out


# -- stage-2 training ------------------------------------------------------------------


@dataclass
class PredictorTrainingResult:
    predictor: PredictorInterface
    reweighter: ReweightModule | None
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")


def predict_probs(predictor: PredictorInterface, covariates: np.ndarray,
                  reweighter: ReweightModule | None = None, tau: np.ndarray | None = None,
                  adjacency=None, batch_size: int = 64) -> np.ndarray:
    """Deterministic event probabilities over (Ts, M, E, window) covariates."""
    ts = covariates.shape[0]
    out = np.zeros(covariates.shape[:2])
    if reweighter is not None and tau is None:
        raise ConsistencyError("reweighting requires effect estimates for every sample")
    with ad.no_grad():
        for start in range(0, ts, batch_size):
            stop = min(start + batch_size, ts)
            x = Tensor(covariates[start:stop])
            if reweighter is not None:
                gates = reweighter.causal_gates(tau[start:stop])
                x = reweighter.reweight_features(x, gates)
            out[start:stop] = predictor.forward(x, adjacency=adjacency).data
    return out


def predict_event(predictor: PredictorInterface, x_step, reweighter=None, tau_step=None,
                  adjacency=None) -> np.ndarray:
    """Probabilities for one time step: (M, E, window) -> (M,)."""
    x = np.asarray(x_step, dtype=np.float64)[None, ...]
    tau = None if tau_step is None else np.asarray(tau_step, dtype=np.float64)[None, ...]
    return predict_probs(predictor, x, reweighter=reweighter, tau=tau,
                         adjacency=adjacency)[0]


def train_predictor(dataset: DatasetSplit, config: PredictorConfig, num_locations: int,
                    causal_model: CausalModel | None = None,
                    log_path=None) -> PredictorTrainingResult:
    """Stage-2 training of the predictor and, when enabled, the prior modules.

    The frozen stage-one model is evaluated once up front; its effect
    estimates and bounds enter training as constants, so no gradient can
    reach it. With reweighting and the constraint loss both disabled (or the
    constraint weight at zero) the causal model is not consulted at all and
    the run is bit-identical to training the bare predictor.
    """
    if not dataset.train or not dataset.validation:
        raise ParameterError("training requires nonempty train and validation partitions")
    grids = time_grids(dataset, num_locations)
    e = grids.treatments.shape[-1]
    window = grids.covariates.shape[-1]
    predictor = build_predictor(config, num_locations, e, window)

    use_constraint = config.use_constraint and config.mu > 0
    needs_causal = config.use_reweight or use_constraint
    if needs_causal and causal_model is None:
        raise ConsistencyError(
            "reweighting or the constraint loss requires a frozen causal model"
        )

    tau_grid = lower_grid = upper_grid = None
    if needs_causal:
        y1, y0 = causal_model.outcome_grids(grids.covariates,
                                            batch_size=config.batch_size)
        tau_grid = estimate_ite(y1, y0)
        lower_grid, upper_grid = outcome_bounds(y1, y0)

    reweighter = None
    if config.use_reweight:
        rw_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
        reweighter = ReweightModule(predictor.store, rw_rng, e)

    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))

    train_rows = np.nonzero(grids.train_mask.any(axis=1))[0]
    val_rows = np.nonzero(grids.val_mask.any(axis=1))[0]

    def batch_objective(rows, mask, training):
        x = Tensor(grids.covariates[rows])
        if reweighter is not None:
            gates = reweighter.causal_gates(tau_grid[rows])
            x = reweighter.reweight_features(x, gates)
        preds = predictor.forward(x, training=training, drop_rng=drop_rng)
        total = predictor.loss(preds, grids.outcomes[rows], mask)
        if use_constraint:
            total = total + config.mu * constraint_loss(
                preds, lower_grid[rows], upper_grid[rows], mask
            )
        return total

    def validation_loss() -> float:
        total = 0.0
        with ad.no_grad():
            for start in range(0, val_rows.size, config.batch_size):
                rows = val_rows[start : start + config.batch_size]
                total += batch_objective(rows, grids.val_mask[rows], training=False).item()
        return total

    def validation_bacc() -> float:
        tau = None if tau_grid is None else tau_grid[val_rows]
        probs = predict_probs(predictor, grids.covariates[val_rows],
                              reweighter=reweighter, tau=tau,
                              batch_size=config.batch_size)
        mask = grids.val_mask[val_rows]
        return bacc(probs[mask], grids.outcomes[val_rows][mask])

    result = PredictorTrainingResult(predictor=predictor, reweighter=reweighter)
    best_arrays = predictor.store.export_arrays()
    bad_epochs = 0
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(train_rows)
        train_loss = 0.0
        for start in range(0, order.size, config.batch_size):
            rows = order[start : start + config.batch_size]
            predictor.store.zero_grad()
            loss = batch_objective(rows, grids.train_mask[rows], training=True)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite prediction loss at epoch {epoch}, "
                    f"batch {start // config.batch_size}"
                )
            train_loss += value
            loss.backward()
            scale = 1.0 / rows.size
            grads = {
                name: (tensor.grad * scale if tensor.grad is not None
                       else np.zeros_like(tensor.data))
                for name, tensor in predictor.store.items()
            }
            adam_step(predictor.store, grads, lr=config.lr)
        val_loss = validation_loss()
        result.epochs.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_bacc": validation_bacc(),
        })
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_arrays = predictor.store.export_arrays()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    predictor.store.load_arrays(best_arrays)
    if log_path is not None:
        with open(log_path, "w") as fh:
            for record in result.epochs:
                fh.write(json.dumps(record) + "\n")
    return result


def evaluate_bacc(predictor, reweighter, causal_model, dataset: DatasetSplit,
                  num_locations: int, part: str = "test") -> float:
    """Balanced accuracy of a trained bundle on one partition."""
    grids = time_grids(dataset, num_locations)
    tau = None
    if reweighter is not None:
        if causal_model is None:
            raise ConsistencyError("reweighting requires the causal model at evaluation")
        y1, y0 = causal_model.outcome_grids(grids.covariates)
        tau = estimate_ite(y1, y0)
    probs = predict_probs(predictor, grids.covariates, reweighter=reweighter, tau=tau)
    mask = grids.mask_for("validation" if part == "validation" else part)
    return bacc(probs[mask], grids.outcomes[mask])


# -- serialization --------------------------------------------------------------------


def save_predictor_bundle(path, result: PredictorTrainingResult, num_locations: int,
                          num_event_types: int, window: int):
    predictor = result.predictor
    config = predictor.config.to_dict()
    config.update({"M": num_locations, "E": num_event_types, "window": window})
    save_checkpoint(path, "predictor", config, predictor.store.export_arrays())


def load_predictor_bundle(path) -> tuple[PredictorInterface, ReweightModule | None]:
    manifest, arrays = load_checkpoint(path)
    if manifest.get("kind") != "predictor":
        raise ConfigError(f"{path}: checkpoint kind {manifest.get('kind')!r} is not 'predictor'")
    config = dict(manifest["config"])
    m = config.pop("M")
    e = config.pop("E")
    window = config.pop("window")
    config.pop("run_config_hash", None)
    cfg = PredictorConfig.from_dict(config)
    predictor = build_predictor(cfg, m, e, window)
    reweighter = None
    if cfg.use_reweight:
        rw_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
        reweighter = ReweightModule(predictor.store, rw_rng, e)
    predictor.store.load_arrays(arrays)
    return predictor, reweighter
