"""Matching-based ATT error, balanced accuracy, ITE summaries, robustness runs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetConfig, DatasetSplit, EventCube, TimeGrids, build_samples, \
    inject_poisson_noise, split, time_grids
from .errors import MetricError, ParameterError
from .seeding import stage_seed

FLAG_SETS = ("none", "F", "L", "FL")


# -- 1-NN matching without replacement ---------------------------------------------


@dataclass
class MatchedSet:
    """Treated-control pairs per treatment, matched within each location."""

    treatment: int
    pairs: list[tuple] = field(default_factory=list)   # ((t, i) treated, (t, i) control)
    distances: list[float] = field(default_factory=list)
    per_location: dict[int, dict] = field(default_factory=dict)
    dropped_treated: int = 0
    excluded_locations: list[int] = field(default_factory=list)

    def treated_keys(self) -> list[tuple]:
        return [p[0] for p in self.pairs]

    def control_keys(self) -> list[tuple]:
        return [p[1] for p in self.pairs]


def nn_match(samples, treatment: int, standardize: bool = False) -> MatchedSet:
    """Greedy 1-nearest-neighbour matching without replacement, per location.

    Treated samples are processed in ascending (time, location) key order;
    each takes its nearest remaining control by Euclidean distance over the
    flattened covariate window, ties broken by the earliest control key.
    Locations without controls are excluded; treated samples left over when
    controls run out are dropped. Both cases are counted and warned about.
    """
    if not samples:
        raise MetricError("cannot match an empty sample list")
    e = samples[0].covariates.shape[0]
    if not 0 <= treatment < e:
        raise ParameterError(f"treatment index {treatment} outside [0, {e})")

    features = np.stack([s.covariates.ravel() for s in samples]).astype(np.float64)
    if standardize:
        mu = features.mean(axis=0)
        sd = features.std(axis=0)
        sd[sd == 0] = 1.0
        features = (features - mu) / sd

    by_location: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        by_location.setdefault(s.location, []).append(idx)

    matched = MatchedSet(treatment=treatment)
    for location in sorted(by_location):
        idxs = sorted(by_location[location], key=lambda k: samples[k].key)
        treated = [k for k in idxs if samples[k].treatments[treatment] == 1]
        controls = [k for k in idxs if samples[k].treatments[treatment] == 0]
        record = {"treated": len(treated), "controls": len(controls), "matched": 0,
                  "dropped": 0}
        matched.per_location[location] = record
        if not controls:
            if treated:
                matched.excluded_locations.append(location)
                warnings.warn(
                    f"location {location}: no controls for treatment {treatment}; excluded",
                    stacklevel=2,
                )
            continue
        control_feats = features[controls]
        sq_norms = (control_feats**2).sum(axis=1)
        available = np.ones(len(controls), dtype=bool)
        for t_idx in treated:
            if not available.any():
                record["dropped"] += 1
                matched.dropped_treated += 1
                continue
            tf = features[t_idx]
            sq_dist = sq_norms - 2.0 * (control_feats @ tf) + (tf**2).sum()
            sq_dist = np.where(available, sq_dist, np.inf)
            pick = int(np.argmin(sq_dist))  # first minimum = earliest control key
            available[pick] = False
            record["matched"] += 1
            matched.pairs.append((samples[t_idx].key, samples[controls[pick]].key))
            matched.distances.append(float(np.sqrt(max(sq_dist[pick], 0.0))))
    if matched.dropped_treated:
        warnings.warn(
            f"{matched.dropped_treated} treated samples dropped after controls were "
            f"exhausted (treatment {treatment})",
            stacklevel=2,
        )
    return matched


def att_error(predicted_ite, matched: MatchedSet, factual_outcomes) -> float:
    """Absolute gap between the matched-sample ATT and the mean predicted effect.

    The ATT is the difference of factual outcome means between the treated and
    control sides of the matched set; the model term is the mean predicted
    effect over the matched treated samples.
    """
    if not matched.pairs:
        raise MetricError("ATT error undefined on an empty matched set")
    treated_keys = matched.treated_keys()
    control_keys = matched.control_keys()
    att = (np.mean([factual_outcomes[k] for k in treated_keys])
           - np.mean([factual_outcomes[k] for k in control_keys]))
    predicted = np.mean([predicted_ite[k] for k in treated_keys])
    return float(abs(att - predicted))


def matched_att(matched: MatchedSet, factual_outcomes) -> float:
    if not matched.pairs:
        raise MetricError("ATT undefined on an empty matched set")
    return float(
        np.mean([factual_outcomes[k] for k in matched.treated_keys()])
        - np.mean([factual_outcomes[k] for k in matched.control_keys()])
    )


# -- balanced accuracy ----------------------------------------------------------------


def confusion_counts(predictions, labels, threshold: float = 0.5) -> dict[str, int]:
    preds = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels)
    decided = preds >= threshold
    return {
        "tp": int(np.sum(decided & (y == 1))),
        "fp": int(np.sum(decided & (y == 0))),
        "tn": int(np.sum(~decided & (y == 0))),
        "fn": int(np.sum(~decided & (y == 1))),
    }


def bacc(predictions, labels, threshold: float = 0.5) -> float:
    """(TPR + TNR) / 2 at the given threshold; NaN with a warning if one class is absent."""
    counts = confusion_counts(predictions, labels, threshold)
    pos = counts["tp"] + counts["fn"]
    neg = counts["tn"] + counts["fp"]
    if pos == 0 or neg == 0:
        missing = "positive" if pos == 0 else "negative"
        warnings.warn(
            f"balanced accuracy is partial: no {missing} labels in this set",
            stacklevel=2,
        )
        return float("nan")
    return 0.5 * (counts["tp"] / pos + counts["tn"] / neg)


# -- model-facing metric helpers ---------------------------------------------------------


def model_ite_map(causal_model, grids: TimeGrids, samples, treatment: int) -> dict:
    """Predicted effect per sample key, from a frozen model in eval mode."""
    y1, y0 = causal_model.outcome_grids(grids.covariates)
    row_of = {int(t): r for r, t in enumerate(grids.times)}
    return {
        s.key: float(y1[row_of[s.t], s.location, treatment]
                     - y0[row_of[s.t], s.location, treatment])
        for s in samples
    }


def matched_att_error(causal_model, grids: TimeGrids, samples, treatment: int) -> float:
    """Matching-based ATT error of a trained model on the given samples."""
    matched = nn_match(samples, treatment)
    ite = model_ite_map(causal_model, grids, samples, treatment)
    factual = {s.key: s.outcome for s in samples}
    return att_error(ite, matched, factual)


def ite_distribution(causal_model, grids: TimeGrids, samples, treatment: int) -> dict:
    """Per-sample predicted effects plus summary statistics for plotting."""
    ite = model_ite_map(causal_model, grids, samples, treatment)
    values = np.array([ite[s.key] for s in samples])
    return {
        "treatment": treatment,
        "count": int(values.size),
        "mean": float(values.mean()),
        "median": float(np.median(values)),
        "q25": float(np.percentile(values, 25)),
        "q75": float(np.percentile(values, 75)),
        "min": float(values.min()),
        "max": float(values.max()),
        "values": values.tolist(),
    }


def metrics_report(causal_model, predictor, reweighter, dataset: DatasetSplit,
                   num_locations: int, treatments, seed: int, config_hash: str,
                   part: str = "test") -> dict:
    """MetricsReport: ATT error per treatment, BACC, confusion, ITE summaries."""
    from . import predict as ep

    grids = time_grids(dataset, num_locations)
    part_samples = {"train": dataset.train, "validation": dataset.validation,
                    "test": dataset.test}[part]
    mask = grids.mask_for("validation" if part == "validation" else part)

    report = {
        "metadata": {"seed": seed, "config_hash": config_hash, "split": part},
        "att_error": {},
        "ite_summary": {},
    }
    for j in treatments:
        try:
            report["att_error"][str(j)] = matched_att_error(causal_model, grids,
                                                            part_samples, j)
        except MetricError as exc:
            report["att_error"][str(j)] = None
            warnings.warn(f"treatment {j}: {exc}", stacklevel=2)
        summary = ite_distribution(causal_model, grids, part_samples, j)
        report["ite_summary"][str(j)] = summary

    if predictor is not None:
        tau = None
        if reweighter is not None:
            y1, y0 = causal_model.outcome_grids(grids.covariates)
            tau = y1 - y0
        probs = ep.predict_probs(predictor, grids.covariates, reweighter=reweighter,
                                 tau=tau)
        preds = probs[mask]
        labels = grids.outcomes[mask]
        report["bacc"] = bacc(preds, labels)
        report["confusion"] = confusion_counts(preds, labels)
    return report


# -- robustness harness -------------------------------------------------------------------


def _flagged_config(pred_cfg, flags: str):
    from .predict import PredictorConfig

    cfg = PredictorConfig.from_dict(pred_cfg.to_dict())
    cfg.use_reweight = "F" in flags and flags != "none"
    cfg.use_constraint = "L" in flags
    return cfg


def robustness_experiment(cube: EventCube, data_cfg: DatasetConfig, causal_cfg,
                          pred_cfg, mode: str, lambdas, flag_sets, seeds,
                          progress=None) -> list[dict]:
    """Run the full two-stage pipeline per (noise level, flags, seed) cell.

    ``test-noise`` perturbs validation and test covariates and keeps training
    clean; ``train-noise`` perturbs only the training covariates. The causal
    stage is shared across flag combinations within one (seed, noise) cell
    since it does not depend on them. Returns long-format rows
    {mode, lambda, flags, seed, bacc}.
    """
    from . import causal as cc
    from . import predict as ep

    if mode not in ("test-noise", "train-noise"):
        raise ParameterError(f"unknown robustness mode {mode!r}")
    if not lambdas:
        raise ParameterError("the noise-level grid must be nonempty")
    for flags in flag_sets:
        if flags not in FLAG_SETS:
            raise ParameterError(f"unknown flag combination {flags!r}")

    samples = build_samples(cube, data_cfg.window, data_cfg.lead, data_cfg.target_type)
    rows = []
    for seed in seeds:
        base_split = split(samples, data_cfg.ratios, seed=stage_seed(seed, "split"),
                           chronological=data_cfg.chronological)
        for lam in lambdas:
            noise_seed = stage_seed(seed, "noise") + int(round(lam * 1000))
            if mode == "test-noise":
                noisy = DatasetSplit(
                    train=base_split.train,
                    validation=inject_poisson_noise(base_split.validation, lam, noise_seed),
                    test=inject_poisson_noise(base_split.test, lam, noise_seed + 1),
                    seed=base_split.seed, ratios=base_split.ratios,
                )
            else:
                noisy = DatasetSplit(
                    train=inject_poisson_noise(base_split.train, lam, noise_seed),
                    validation=base_split.validation,
                    test=base_split.test,
                    seed=base_split.seed, ratios=base_split.ratios,
                )
            causal_model = None
            for flags in flag_sets:
                cfg = _flagged_config(pred_cfg, flags)
                cfg.seed = stage_seed(seed, "predictor")
                needs_causal = cfg.use_reweight or (cfg.use_constraint and cfg.mu > 0)
                if needs_causal and causal_model is None:
                    stage1_cfg = cc.CausalModelConfig.from_dict(causal_cfg.to_dict())
                    stage1_cfg.seed = stage_seed(seed, "causal")
                    causal_model = cc.train_causal(noisy, stage1_cfg, data_cfg.M).model
                trained = ep.train_predictor(noisy, cfg, data_cfg.M,
                                             causal_model=causal_model if needs_causal else None)
                score = ep.evaluate_bacc(trained.predictor, trained.reweighter,
                                         causal_model if needs_causal else None,
                                         noisy, data_cfg.M, part="test")
                row = {"mode": mode, "lambda": float(lam), "flags": flags,
                       "seed": int(seed), "bacc": score}
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows


def robustness_series(rows) -> dict:
    """Aggregate long-format rows into per-(mode, flags, lambda) mean and std."""
    grouped: dict[tuple, list[float]] = {}
    for row in rows:
        grouped.setdefault((row["mode"], row["flags"], float(row["lambda"])), []).append(
            float(row["bacc"])
        )
    out: dict = {}
    for (mode, flags, lam), values in sorted(grouped.items()):
        arr = np.array(values)
        out.setdefault((mode, flags), {})[lam] = (float(arr.mean()), float(arr.std()))
    return out
