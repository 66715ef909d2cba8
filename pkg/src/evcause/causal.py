"""Hidden-confounder model and its training loop.

The encoder turns each location's covariate window into a confounder
representation: a gated dilated-convolution stack captures temporal
structure, a two-layer graph convolution over a learned location graph
captures spatial structure, and a treatment-specific embedding is appended
per treatment event. Two small networks per treatment map that
representation to the potential outcomes under treatment and control.

Training minimises the factual binary cross-entropy over all treatments
plus an L2 penalty and a squared-linear-MMD balancing term between treated
and control representations, with Adam and early stopping on the validation
objective. After this stage the model is frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSplit, positivity_report, time_grids
from .errors import ConfigError, ParameterError, TrainingError
from .optim import ParamStore, adam_step, glorot_init


@dataclass
class CausalModelConfig:
    d_s: int = 16                 # hidden width; the reference sweep uses {16, 32, 64}
    d_a: int = 10                 # node-embedding width
    kernel_size: int = 2
    dilations: tuple = (1, 2, 4)
    gcn_layers: int = 2
    head_hidden_layers: int = 2
    alpha: float = 1e-2           # imbalance penalty on the MMD term
    eta: float = 1e-5             # L2 weight decay
    lr: float = 1e-3
    batch_size: int = 64          # in time steps; each step carries all locations
    dropout: float = 0.5
    patience: int = 10
    max_epochs: int = 100
    balance_per_treatment: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("d_s", "d_a", "kernel_size", "gcn_layers", "head_hidden_layers",
                     "batch_size", "patience", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"causal config field {name} must be positive")
        if self.alpha < 0 or self.eta < 0:
            raise ConfigError("alpha and eta must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        self.dilations = tuple(int(d) for d in self.dilations)
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be positive, got {self.dilations}")

    @classmethod
    def from_dict(cls, raw: dict) -> "CausalModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown causal config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in self.__dataclass_fields__}
        out["dilations"] = list(self.dilations)
        return out


@dataclass
class PotentialOutcomePair:
    """Predicted outcome probabilities under forced treatment and control."""

    treatment: int
    y1: float
    y0: float

    @property
    def ite(self) -> float:
        return self.y1 - self.y0


def adaptive_adjacency(node_emb_src, node_emb_dst) -> Tensor:
    """Self-adaptive location graph from two node-embedding matrices.

    Row-wise softmax of ReLU(E1 E2^T): the ReLU prunes weak connections and
    the softmax normalises each row to a distribution over locations.
    """
    e1 = node_emb_src if isinstance(node_emb_src, Tensor) else Tensor(node_emb_src)
    e2 = node_emb_dst if isinstance(node_emb_dst, Tensor) else Tensor(node_emb_dst)
    if e1.shape != e2.shape or e1.ndim != 2:
        raise ParameterError(
            f"node embeddings must share one (M, d_a) shape, got {e1.shape} and {e2.shape}"
        )
    return ad.softmax_rows(ad.relu(ad.matmul(e1, e2.transpose((1, 0)))))


class SpatioTemporalEncoder:
    """Gated temporal convolution stack plus adaptive-graph convolutions.

    Registers its parameters into the caller's store under ``prefix`` so the
    block can back both the causal model and the baseline predictor.
    """

    def __init__(self, store: ParamStore, rng, num_locations: int, num_event_types: int,
                 d_s: int, d_a: int, kernel_size: int, dilations: tuple,
                 gcn_layers: int, prefix: str = ""):
        self.num_locations = num_locations
        self.num_event_types = num_event_types
        self.d_s = d_s
        self.kernel_size = kernel_size
        self.dilations = tuple(dilations)
        self.gcn_layers = gcn_layers
        self.prefix = prefix
        # Receptive span of the stacked dilated convolutions; windows shorter
        # than this would leave filters reading only padding.
        self.min_window = max(1, (kernel_size - 1) * sum(self.dilations))

        p = lambda name: f"{prefix}{name}"
        self.in_w = store.add(p("in_w"), glorot_init((num_event_types, d_s), rng).data)
        self.in_b = store.add(p("in_b"), np.zeros(d_s))
        self.layers = []
        for l in range(len(self.dilations)):
            self.layers.append({
                "gamma1": store.add(p(f"tcn{l}_gamma1"), glorot_init((d_s, kernel_size), rng).data),
                "gamma2": store.add(p(f"tcn{l}_gamma2"), glorot_init((d_s, kernel_size), rng).data),
                "res_w": store.add(p(f"tcn{l}_res_w"), glorot_init((d_s, d_s), rng).data),
                "res_b": store.add(p(f"tcn{l}_res_b"), np.zeros(d_s)),
                "skip_w": store.add(p(f"tcn{l}_skip_w"), glorot_init((d_s, d_s), rng).data),
                "skip_b": store.add(p(f"tcn{l}_skip_b"), np.zeros(d_s)),
            })
        self.node_emb1 = store.add(p("node_emb1"), glorot_init((num_locations, d_a), rng).data)
        self.node_emb2 = store.add(p("node_emb2"), glorot_init((num_locations, d_a), rng).data)
        self.gcn_w = [store.add(p(f"gcn{l}_w"), glorot_init((d_s, d_s), rng).data)
                      for l in range(gcn_layers)]

    def check_window(self, window: int):
        if window < self.min_window:
            raise ConfigError(
                f"covariate window {window} is shorter than the temporal receptive "
                f"span {self.min_window} (kernel {self.kernel_size}, dilations {self.dilations})"
            )

    def temporal(self, x, training=False, drop_rng=None, dropout=0.0) -> Tensor:
        """(B, M, E, window) -> (B, M, d_s): gated TCN stack, last time position."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_window(x.shape[-1])
        proj = ad.matmul(x.transpose((0, 1, 3, 2)), self.in_w) + self.in_b
        r = proj.transpose((0, 1, 3, 2))  # (B, M, d_s, window)
        skip_sum = None
        for layer, dilation in zip(self.layers, self.dilations):
            c1 = ad.dilated_causal_conv1d(r, layer["gamma1"], dilation)
            c2 = ad.dilated_causal_conv1d(r, layer["gamma2"], dilation)
            h = ad.tanh(c1) * ad.sigmoid(c2)
            ht = h.transpose((0, 1, 3, 2))
            skip = ad.matmul(ht, layer["skip_w"]) + layer["skip_b"]
            skip_sum = skip if skip_sum is None else skip_sum + skip
            res = ad.matmul(ht, layer["res_w"]) + layer["res_b"]
            r = res.transpose((0, 1, 3, 2)) + r
        seq = ad.relu(skip_sum)           # (B, M, window, d_s)
        out = seq[:, :, -1, :]
        if training and dropout > 0.0:
            out = ad.dropout(out, dropout, drop_rng)
        return out

    def adjacency(self) -> Tensor:
        return adaptive_adjacency(self.node_emb1, self.node_emb2)

    def spatial(self, h: Tensor, adjacency: Tensor | None = None) -> Tensor:
        """(B, M, d_s) -> (B, M, d_s) through stacked graph convolutions."""
        adj = self.adjacency() if adjacency is None else adjacency
        g = h
        for w in self.gcn_w:
            g = ad.relu(ad.matmul(ad.matmul(adj, g), w))
        return g

    def encode(self, x, training=False, drop_rng=None, dropout=0.0) -> Tensor:
        return self.spatial(self.temporal(x, training, drop_rng, dropout))


class CausalModel:
    """Confounder encoder plus per-treatment potential-outcome heads."""

    def __init__(self, config: CausalModelConfig, num_locations: int,
                 num_event_types: int, window: int):
        if num_locations < 1 or num_event_types < 1:
            raise ConfigError("model needs at least one location and one event type")
        self.config = config
        self.num_locations = num_locations
        self.num_event_types = num_event_types
        self.window = window
        self.d_v = config.d_s  # treatment-embedding width matches the hidden width
        self.store = ParamStore()
        rng = np.random.default_rng(config.seed)
        self.encoder = SpatioTemporalEncoder(
            self.store, rng, num_locations, num_event_types, config.d_s, config.d_a,
            config.kernel_size, config.dilations, config.gcn_layers,
        )
        self.encoder.check_window(window)
        self.treat_emb = self.store.add(
            "treat_emb", glorot_init((num_event_types, self.d_v), rng).data
        )
        self.heads: dict[tuple[int, int], list] = {}
        sizes = [2 * config.d_s] + [config.d_s] * config.head_hidden_layers + [1]
        for j in range(num_event_types):
            for arm in (1, 0):
                chain = []
                for layer, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                    w = self.store.add(f"head{j}_a{arm}_w{layer}",
                                       glorot_init((n_in, n_out), rng).data)
                    b = self.store.add(f"head{j}_a{arm}_b{layer}", np.zeros(n_out))
                    chain.append((w, b))
                self.heads[(j, arm)] = chain

    # -- forward pieces --------------------------------------------------------

    def encode_temporal(self, x) -> Tensor:
        """(M, E, window) -> (M, d_s), the temporal features at the last step."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        out = self.encoder.temporal(ad.reshape(x, (1,) + tuple(x.shape)))
        return ad.reshape(out, (self.num_locations, self.config.d_s))

    def adaptive_adjacency(self) -> Tensor:
        return self.encoder.adjacency()

    def encode_spatial(self, h, adjacency=None) -> Tensor:
        h = h if isinstance(h, Tensor) else Tensor(h)
        if h.ndim == 2:
            out = self.encoder.spatial(ad.reshape(h, (1,) + tuple(h.shape)), adjacency)
            return ad.reshape(out, tuple(h.shape))
        return self.encoder.spatial(h, adjacency)

    def confounder_repr(self, g, j: int) -> Tensor:
        """Concatenate spatiotemporal features with the treatment-j embedding."""
        if not 0 <= j < self.num_event_types:
            raise ParameterError(
                f"treatment index {j} outside [0, {self.num_event_types})"
            )
        g = g if isinstance(g, Tensor) else Tensor(g)
        if g.ndim == 1:
            return ad.concat([g, self.treat_emb[j]], axis=0)
        rows = g.shape[0]
        v = self.treat_emb[np.full(rows, j)]
        return ad.concat([g, v], axis=1)

    def _head(self, j: int, arm: int, z: Tensor, training=False, drop_rng=None) -> Tensor:
        chain = self.heads[(j, arm)]
        a = z
        for w, b in chain[:-1]:
            a = ad.relu(ad.matmul(a, w) + b)
            if training and self.config.dropout > 0.0:
                a = ad.dropout(a, self.config.dropout, drop_rng)
        w, b = chain[-1]
        return ad.sigmoid(ad.matmul(a, w) + b)

    def predict_potential_outcomes(self, z, j: int) -> PotentialOutcomePair:
        """Evaluate both heads of treatment ``j`` on one confounder vector."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        with ad.no_grad():
            row = ad.reshape(z, (1, z.shape[-1]))
            y1 = self._head(j, 1, row).item()
            y0 = self._head(j, 0, row).item()
        return PotentialOutcomePair(treatment=j, y1=y1, y0=y0)

    def _forward(self, x, training=False, drop_rng=None):
        """Per-treatment (B, M) outcome tensors and (B*M, 2 d_s) representations."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        batch, m = x.shape[0], x.shape[1]
        g = self.encoder.encode(x, training, drop_rng, self.config.dropout)
        flat = ad.reshape(g, (batch * m, self.config.d_s))
        y1_list, y0_list, z_list = [], [], []
        for j in range(self.num_event_types):
            z = self.confounder_repr(flat, j)
            y1 = ad.reshape(self._head(j, 1, z, training, drop_rng), (batch, m))
            y0 = ad.reshape(self._head(j, 0, z, training, drop_rng), (batch, m))
            y1_list.append(y1)
            y0_list.append(y0)
            z_list.append(z)
        return y1_list, y0_list, z_list

    def potential_outcomes(self, x, training=False, drop_rng=None):
        """(B, M, E, window) -> treated and control probabilities, (B, M, E) each."""
        y1_list, y0_list, _ = self._forward(x, training, drop_rng)
        batch, m = y1_list[0].shape
        y1 = ad.concat([ad.reshape(t, (batch, m, 1)) for t in y1_list], axis=2)
        y0 = ad.concat([ad.reshape(t, (batch, m, 1)) for t in y0_list], axis=2)
        return y1, y0

    # -- losses ------------------------------------------------------------------

    def factual_loss(self, y1_list, y0_list, treatments, outcomes, mask=None) -> Tensor:
        """Summed BCE of the factually selected head over every treatment."""
        weights = None if mask is None else np.asarray(mask, dtype=np.float64)
        total = Tensor(0.0)
        for j in range(self.num_event_types):
            cj = np.asarray(treatments[..., j], dtype=np.float64)
            factual = y1_list[j] * cj + y0_list[j] * (1.0 - cj)
            per = ad.bce_elements(factual, outcomes)
            if weights is not None:
                per = per * weights
            total = total + ad.tensor_sum(per)
        if self.config.eta > 0:
            total = total + self.config.eta * self.store.l2_penalty()
        return total

    def ipm_loss(self, z_list, treatments, mask=None) -> Tensor:
        """Imbalance penalty between treated and control representations.

        Representations are pooled over every (location, time, treatment)
        entry in the batch and grouped by the observed assignment; a
        per-treatment variant balances each treatment separately.
        """
        if self.config.alpha == 0.0:
            return Tensor(0.0)
        flat_mask = (np.ones(z_list[0].shape[0], dtype=bool) if mask is None
                     else np.asarray(mask, dtype=bool).reshape(-1))
        if self.config.balance_per_treatment:
            total = Tensor(0.0)
            for j, z in enumerate(z_list):
                cj = np.asarray(treatments[..., j], dtype=bool).reshape(-1)
                treated_idx = np.nonzero(flat_mask & cj)[0]
                control_idx = np.nonzero(flat_mask & ~cj)[0]
                if treated_idx.size == 0 or control_idx.size == 0:
                    continue
                total = total + ad.mmd_linear_sq(z[treated_idx], z[control_idx])
            return self.config.alpha * total
        treated_parts, control_parts = [], []
        for j, z in enumerate(z_list):
            cj = np.asarray(treatments[..., j], dtype=bool).reshape(-1)
            treated_idx = np.nonzero(flat_mask & cj)[0]
            control_idx = np.nonzero(flat_mask & ~cj)[0]
            if treated_idx.size:
                treated_parts.append(z[treated_idx])
            if control_idx.size:
                control_parts.append(z[control_idx])
        if not treated_parts or not control_parts:
            return Tensor(0.0)
        treated = treated_parts[0] if len(treated_parts) == 1 else ad.concat(treated_parts, axis=0)
        control = control_parts[0] if len(control_parts) == 1 else ad.concat(control_parts, axis=0)
        return self.config.alpha * ad.mmd_linear_sq(treated, control)

    def batch_loss(self, x, treatments, outcomes, mask=None, training=False, drop_rng=None):
        y1_list, y0_list, z_list = self._forward(x, training, drop_rng)
        fact = self.factual_loss(y1_list, y0_list, treatments, outcomes, mask)
        disc = self.ipm_loss(z_list, treatments, mask)
        return fact + disc

    # -- frozen-model evaluation ---------------------------------------------------

    def outcome_grids(self, covariates: np.ndarray, batch_size: int = 64):
        """Deterministic potential outcomes over (Ts, M, E, window) covariates."""
        ts = covariates.shape[0]
        y1 = np.zeros((ts, self.num_locations, self.num_event_types))
        y0 = np.zeros_like(y1)
        with ad.no_grad():
            for start in range(0, ts, batch_size):
                stop = min(start + batch_size, ts)
                t1, t0 = self.potential_outcomes(covariates[start:stop])
                y1[start:stop] = t1.data
                y0[start:stop] = t0.data
        return y1, y0


# -- training ---------------------------------------------------------------------


@dataclass
class CausalTrainingResult:
    model: CausalModel
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    positivity: dict = field(default_factory=dict)


def _param_norm_summary(store: ParamStore) -> str:
    worst = max(store.items(), key=lambda kv: float(np.abs(kv[1].data).max()))
    total = float(np.sqrt(sum(float((t.data**2).sum()) for t in store.tensors())))
    return f"total L2 {total:.3e}, largest entry {float(np.abs(worst[1].data).max()):.3e} in {worst[0]!r}"


def _write_log(path, records):
    if path is None:
        return
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def train_causal(dataset: DatasetSplit, config: CausalModelConfig, num_locations: int,
                 log_path=None, att_treatment: int | None = None) -> CausalTrainingResult:
    """Stage-1 training: optimise the causal objective, early-stop on validation.

    Batches are whole time steps (all locations at once) because the graph
    convolution couples locations; per-sample membership masks confine the
    loss to the training partition. Gradients are scaled by the batch's time
    step count; reported losses are unscaled sums. Returns the model at its
    best validation objective, ready to be frozen.
    """
    if not dataset.train or not dataset.validation:
        raise ParameterError("training requires nonempty train and validation partitions")
    grids = time_grids(dataset, num_locations)
    e = grids.treatments.shape[-1]
    window = grids.covariates.shape[-1]
    model = CausalModel(config, num_locations, e, window)

    positivity = positivity_report(dataset.train)

    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))

    train_rows = np.nonzero(grids.train_mask.any(axis=1))[0]
    val_rows = np.nonzero(grids.val_mask.any(axis=1))[0]

    def validation_loss() -> float:
        total = 0.0
        with ad.no_grad():
            for start in range(0, val_rows.size, config.batch_size):
                rows = val_rows[start : start + config.batch_size]
                loss = model.batch_loss(
                    grids.covariates[rows], grids.treatments[rows],
                    grids.outcomes[rows], grids.val_mask[rows],
                )
                total += loss.item()
        return total

    result = CausalTrainingResult(model=model, positivity=positivity)
    best_arrays = model.store.export_arrays()
    bad_epochs = 0
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(train_rows)
        train_loss = 0.0
        for start in range(0, order.size, config.batch_size):
            rows = order[start : start + config.batch_size]
            model.store.zero_grad()
            loss = model.batch_loss(
                grids.covariates[rows], grids.treatments[rows],
                grids.outcomes[rows], grids.train_mask[rows],
                training=True, drop_rng=drop_rng,
            )
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite causal loss at epoch {epoch}, batch {start // config.batch_size}; "
                    + _param_norm_summary(model.store)
                )
            train_loss += value
            loss.backward()
            scale = 1.0 / rows.size
            grads = {
                name: (tensor.grad * scale if tensor.grad is not None
                       else np.zeros_like(tensor.data))
                for name, tensor in model.store.items()
            }
            adam_step(model.store, grads, lr=config.lr)
        val_loss = validation_loss()
        record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
        if att_treatment is not None:
            from .evaluation import matched_att_error

            record["att_error_val"] = matched_att_error(
                model, grids, dataset.validation, att_treatment
            )
        result.epochs.append(record)
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_arrays = model.store.export_arrays()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    model.store.load_arrays(best_arrays)
    _write_log(log_path, result.epochs)
    return result


# -- serialization ------------------------------------------------------------------


def save_causal_model(path, model: CausalModel):
    config = model.config.to_dict()
    config.update({
        "M": model.num_locations,
        "E": model.num_event_types,
        "window": model.window,
    })
    save_checkpoint(path, "causal", config, model.store.export_arrays())


def load_causal_model(path) -> CausalModel:
    manifest, arrays = load_checkpoint(path)
    if manifest.get("kind") != "causal":
        raise ConfigError(f"{path}: checkpoint kind {manifest.get('kind')!r} is not 'causal'")
    config = dict(manifest["config"])
    m = config.pop("M")
    e = config.pop("E")
    window = config.pop("window")
    config.pop("run_config_hash", None)
    model = CausalModel(CausalModelConfig.from_dict(config), m, e, window)
    model.store.load_arrays(arrays)
    return model
