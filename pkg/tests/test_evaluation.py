import numpy as np
import pytest

from evcause import causal as cm
from evcause import data as ed
from evcause import evaluation as ev
from evcause import predict as ep
from evcause import synthetic as syn
from evcause.errors import MetricError, ParameterError

from oracles import confusion_by_hand, greedy_match_bruteforce


def make_sample(location, t, covariates, treated, outcome=0):
    covariates = np.asarray(covariates, dtype=np.float64)
    if covariates.ndim == 1:
        covariates = covariates[None, :]
    e = covariates.shape[0]
    treatments = np.zeros(e, dtype=np.int8)
    treatments[0] = treated
    return ed.SampleWindow(location=location, t=t, covariates=covariates,
                           treatments=treatments, outcome=outcome, lead=1)


# -- matching ------------------------------------------------------------------


def test_identical_covariates_match_at_distance_zero():
    samples = [
        make_sample(0, 10, [1.0, 2.0, 3.0], treated=1),
        make_sample(0, 11, [1.0, 2.0, 3.0], treated=0),
    ]
    matched = ev.nn_match(samples, 0)
    assert matched.pairs == [((10, 0), (11, 0))]
    assert matched.distances[0] == 0.0


def test_matching_worked_example():
    samples = [
        make_sample(0, 1, [0.0], treated=1),
        make_sample(0, 2, [10.0], treated=1),
        make_sample(0, 3, [1.0], treated=0),
        make_sample(0, 4, [9.0], treated=0),
        make_sample(0, 5, [100.0], treated=0),
    ]
    matched = ev.nn_match(samples, 0)
    assert ((1, 0), (3, 0)) in matched.pairs
    assert ((2, 0), (4, 0)) in matched.pairs
    assert len(matched.pairs) == 2


def test_matching_is_without_replacement():
    samples = [
        make_sample(0, 1, [0.0], treated=1),
        make_sample(0, 2, [0.1], treated=1),
        make_sample(0, 3, [0.05], treated=0),
        make_sample(0, 4, [50.0], treated=0),
    ]
    matched = ev.nn_match(samples, 0)
    controls = matched.control_keys()
    assert len(controls) == len(set(controls)) == 2


def test_matching_stays_within_location():
    samples = [
        make_sample(0, 1, [0.0], treated=1),
        make_sample(1, 2, [0.0], treated=0),   # perfect match, wrong location
        make_sample(0, 3, [10.0], treated=0),
    ]
    matched = ev.nn_match(samples, 0)
    assert matched.pairs == [((1, 0), (3, 0))]


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_matching_matches_bruteforce_on_small_locations():
    rng = np.random.default_rng(0)
    for trial in range(30):
        samples = []
        expected_pairs = []
        for location in range(3):
            n = int(rng.integers(2, 7))
            treated_flags = rng.integers(0, 2, size=n)
            vecs = rng.normal(size=(n, 4)).round(3)
            entries = []
            for k in range(n):
                t = 100 * trial + 10 * location + k
                samples.append(make_sample(location, t, vecs[k], int(treated_flags[k])))
                entries.append(((t, location), vecs[k]))
            treated = [e for e, f in zip(entries, treated_flags) if f == 1]
            controls = [e for e, f in zip(entries, treated_flags) if f == 0]
            expected_pairs.extend(
                (tk, ck) for tk, ck, _ in greedy_match_bruteforce(treated, controls)
            )
        matched = ev.nn_match(samples, 0)
        assert sorted(matched.pairs) == sorted(expected_pairs), trial


def test_matching_order_fixed_by_keys_not_input_order():
    base = [
        make_sample(0, 1, [0.0], treated=1),
        make_sample(0, 2, [1.0], treated=1),
        make_sample(0, 3, [0.4], treated=0),
        make_sample(0, 4, [0.6], treated=0),
    ]
    matched_a = ev.nn_match(base, 0)
    matched_b = ev.nn_match(list(reversed(base)), 0)
    assert matched_a.pairs == matched_b.pairs


def test_location_without_controls_is_excluded_with_warning():
    samples = [
        make_sample(0, 1, [0.0], treated=1),
        make_sample(1, 2, [0.0], treated=1),
        make_sample(1, 3, [1.0], treated=0),
    ]
    with pytest.warns(UserWarning, match="location 0"):
        matched = ev.nn_match(samples, 0)
    assert matched.excluded_locations == [0]
    assert len(matched.pairs) == 1


def test_unmatched_treated_are_dropped_with_count():
    samples = [
        make_sample(0, 1, [0.0], treated=1),
        make_sample(0, 2, [1.0], treated=1),
        make_sample(0, 3, [0.5], treated=0),
    ]
    with pytest.warns(UserWarning, match="dropped"):
        matched = ev.nn_match(samples, 0)
    assert matched.dropped_treated == 1
    assert len(matched.pairs) == 1


# -- ATT error ----------------------------------------------------------------------


def matched_fixture():
    samples = [
        make_sample(0, 1, [0.0], treated=1, outcome=1),
        make_sample(0, 2, [5.0], treated=1, outcome=1),
        make_sample(0, 3, [0.1], treated=0, outcome=0),
        make_sample(0, 4, [5.1], treated=0, outcome=1),
    ]
    return samples, ev.nn_match(samples, 0)


def test_att_error_zero_effect_model_reports_att_itself():
    samples, matched = matched_fixture()
    factual = {s.key: s.outcome for s in samples}
    ite = {s.key: 0.0 for s in samples}
    att = ev.matched_att(matched, factual)
    assert att == pytest.approx(0.5)
    assert ev.att_error(ite, matched, factual) == pytest.approx(abs(att))


def test_att_error_matches_scripted_recomputation():
    samples, matched = matched_fixture()
    rng = np.random.default_rng(1)
    factual = {s.key: s.outcome for s in samples}
    ite = {s.key: float(rng.uniform(-0.5, 0.5)) for s in samples}
    got = ev.att_error(ite, matched, factual)
    t_keys = matched.treated_keys()
    c_keys = matched.control_keys()
    att = sum(factual[k] for k in t_keys) / len(t_keys) - sum(
        factual[k] for k in c_keys
    ) / len(c_keys)
    pred = sum(ite[k] for k in t_keys) / len(t_keys)
    assert got == pytest.approx(abs(att - pred), rel=1e-12)


def test_att_error_invariant_to_sample_order():
    samples, _ = matched_fixture()
    factual = {s.key: s.outcome for s in samples}
    ite = {s.key: 0.1 for s in samples}
    a = ev.att_error(ite, ev.nn_match(samples, 0), factual)
    b = ev.att_error(ite, ev.nn_match(list(reversed(samples)), 0), factual)
    assert a == b


def test_att_error_empty_matched_set():
    with pytest.raises(MetricError):
        ev.att_error({}, ev.MatchedSet(treatment=0), {})


# -- balanced accuracy ----------------------------------------------------------------


def test_bacc_perfect_classifier():
    assert ev.bacc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0


def test_bacc_all_positive_predictor_on_mixed_labels():
    assert ev.bacc([0.9, 0.9, 0.9, 0.9], [1, 1, 0, 0]) == 0.5


def test_bacc_hand_confusion_matrix():
    # TP=3, FN=1, TN=2, FP=2 -> (0.75 + 0.5) / 2
    preds = [0.9, 0.8, 0.7, 0.2, 0.6, 0.9, 0.1, 0.3]
    labels = [1, 1, 1, 1, 0, 0, 0, 0]
    assert ev.bacc(preds, labels) == pytest.approx(0.625)
    counts = ev.confusion_counts(preds, labels)
    assert (counts["tp"], counts["fn"], counts["tn"], counts["fp"]) == (3, 1, 2, 2)


def test_bacc_matches_bruteforce_confusion_oracle():
    rng = np.random.default_rng(2)
    preds = rng.uniform(0, 1, size=200)
    labels = rng.integers(0, 2, size=200)
    tp, fp, tn, fn = confusion_by_hand(preds, labels)
    expect = 0.5 * (tp / (tp + fn) + tn / (tn + fp))
    assert ev.bacc(preds, labels) == pytest.approx(expect, rel=1e-12)


def test_bacc_single_class_warns_and_returns_nan():
    with pytest.warns(UserWarning, match="partial"):
        out = ev.bacc([0.2, 0.9], [1, 1])
    assert np.isnan(out)


# -- ITE distribution and reports --------------------------------------------------------


def trained_fixture():
    cfg = syn.SyntheticConfig(M=4, E=3, T=300, window=3, lead=1,
                              effect_sizes=(0.0, 0.8, 0.0), target_type=0, seed=0)
    cube, _ = syn.generate(cfg)
    samples = ed.build_samples(cube, cfg.window, cfg.lead, cfg.target_type)
    dataset = ed.split(samples, seed=0)
    model_cfg = cm.CausalModelConfig(d_s=8, d_a=4, dilations=(1, 2), max_epochs=3,
                                     batch_size=32, seed=1)
    model = cm.train_causal(dataset, model_cfg, 4).model
    return dataset, model


def test_ite_distribution_summary_and_cardinality():
    dataset, model = trained_fixture()
    grids = ed.time_grids(dataset, 4)
    summary = ev.ite_distribution(model, grids, dataset.test, 1)
    assert summary["count"] == len(dataset.test) == len(summary["values"])
    values = sorted(summary["values"])
    assert summary["min"] == pytest.approx(values[0])
    assert summary["max"] == pytest.approx(values[-1])
    assert summary["median"] == pytest.approx(float(np.median(values)))
    assert summary["q25"] <= summary["median"] <= summary["q75"]


def test_ite_distribution_tied_heads_all_zero():
    dataset, model = trained_fixture()
    for layer in range(3):
        for kind in ("w", "b"):
            model.store[f"head1_a0_{kind}{layer}"].data = model.store[
                f"head1_a1_{kind}{layer}"
            ].data.copy()
    grids = ed.time_grids(dataset, 4)
    summary = ev.ite_distribution(model, grids, dataset.test, 1)
    np.testing.assert_allclose(summary["values"], 0.0, atol=1e-15)


def test_metrics_report_structure():
    dataset, model = trained_fixture()
    pred = ep.train_predictor(dataset, ep.PredictorConfig(
        d_s=8, d_a=4, dilations=(1, 2), batch_size=32, max_epochs=2, seed=2), 4)
    report = ev.metrics_report(model, pred.predictor, None, dataset, 4,
                               treatments=[0, 1], seed=0, config_hash="abc")
    assert set(report["att_error"]) == {"0", "1"}
    assert 0.0 <= report["bacc"] <= 1.0
    assert report["metadata"]["config_hash"] == "abc"
    assert {"tp", "fp", "tn", "fn"} == set(report["confusion"])


def test_null_effect_data_att_error_reduces_to_mean_predicted_effect():
    """On zero-effect data the matched ATT is near zero, so the error of a
    model is dominated by its own mean predicted effect."""
    cfg = syn.SyntheticConfig(M=4, E=3, T=900, window=3, lead=1, sharpness=1.0,
                              effect_sizes=(0.0, 0.0, 0.0), target_type=0, seed=4)
    cube, _ = syn.generate(cfg)
    samples = ed.build_samples(cube, cfg.window, cfg.lead, cfg.target_type)
    matched = ev.nn_match(samples, 1)
    factual = {s.key: s.outcome for s in samples}
    att = ev.matched_att(matched, factual)
    assert abs(att) < 0.05
    constant_effect = 0.3
    ite = {s.key: constant_effect for s in samples}
    err = ev.att_error(ite, matched, factual)
    assert err == pytest.approx(abs(att - constant_effect), rel=1e-12)
    assert abs(err - constant_effect) < 0.05


def test_metrics_are_pure_functions_of_inputs():
    dataset, model = trained_fixture()
    grids = ed.time_grids(dataset, 4)
    a = ev.matched_att_error(model, grids, dataset.test, 1)
    b = ev.matched_att_error(model, grids, dataset.test, 1)
    assert a == b


# -- robustness harness -------------------------------------------------------------------


def harness_inputs(t=220):
    synth_cfg = syn.SyntheticConfig(M=4, E=3, T=t, window=3, lead=1,
                                    effect_sizes=(0.0, 0.8, 0.0), target_type=0, seed=0)
    cube, _ = syn.generate(synth_cfg)
    data_cfg = ed.DatasetConfig(M=4, E=3, T=t, window=3, lead=1, target_type=0)
    causal_cfg = cm.CausalModelConfig(d_s=8, d_a=4, dilations=(1, 2), max_epochs=2,
                                      batch_size=32)
    pred_cfg = ep.PredictorConfig(d_s=8, d_a=4, dilations=(1, 2), batch_size=32,
                                  max_epochs=2, mu=0.01)
    return cube, data_cfg, causal_cfg, pred_cfg


def test_robustness_row_cardinality():
    cube, data_cfg, causal_cfg, pred_cfg = harness_inputs()
    rows = ev.robustness_experiment(cube, data_cfg, causal_cfg, pred_cfg,
                                    mode="test-noise", lambdas=[0.0, 2.0],
                                    flag_sets=["none", "FL"], seeds=[0, 1])
    assert len(rows) == 2 * 2 * 2
    assert {r["flags"] for r in rows} == {"none", "FL"}
    assert all(r["mode"] == "test-noise" for r in rows)


def test_robustness_lambda_zero_equals_noise_free_pipeline():
    cube, data_cfg, causal_cfg, pred_cfg = harness_inputs()
    rows = ev.robustness_experiment(cube, data_cfg, causal_cfg, pred_cfg,
                                    mode="test-noise", lambdas=[0.0],
                                    flag_sets=["none"], seeds=[3])
    from evcause.seeding import stage_seed
    samples = ed.build_samples(cube, 3, 1, 0)
    split = ed.split(samples, data_cfg.ratios, seed=stage_seed(3, "split"))
    cfg = ep.PredictorConfig.from_dict(pred_cfg.to_dict())
    cfg.seed = stage_seed(3, "predictor")
    trained = ep.train_predictor(split, cfg, 4)
    direct = ep.evaluate_bacc(trained.predictor, None, None, split, 4)
    assert rows[0]["bacc"] == pytest.approx(direct, abs=1e-12)


def test_robustness_train_noise_mode_runs():
    cube, data_cfg, causal_cfg, pred_cfg = harness_inputs()
    rows = ev.robustness_experiment(cube, data_cfg, causal_cfg, pred_cfg,
                                    mode="train-noise", lambdas=[1.0],
                                    flag_sets=["F"], seeds=[0])
    assert len(rows) == 1 and 0.0 <= rows[0]["bacc"] <= 1.0


def test_robustness_rejects_bad_arguments():
    cube, data_cfg, causal_cfg, pred_cfg = harness_inputs()
    with pytest.raises(ParameterError):
        ev.robustness_experiment(cube, data_cfg, causal_cfg, pred_cfg,
                                 mode="bogus", lambdas=[1.0], flag_sets=["none"], seeds=[0])
    with pytest.raises(ParameterError):
        ev.robustness_experiment(cube, data_cfg, causal_cfg, pred_cfg,
                                 mode="test-noise", lambdas=[], flag_sets=["none"], seeds=[0])
    with pytest.raises(ParameterError):
        ev.robustness_experiment(cube, data_cfg, causal_cfg, pred_cfg,
                                 mode="test-noise", lambdas=[1.0], flag_sets=["XL"], seeds=[0])


def test_robustness_series_aggregation():
    rows = [
        {"mode": "test-noise", "lambda": 0.0, "flags": "none", "seed": 0, "bacc": 0.6},
        {"mode": "test-noise", "lambda": 0.0, "flags": "none", "seed": 1, "bacc": 0.8},
        {"mode": "test-noise", "lambda": 5.0, "flags": "none", "seed": 0, "bacc": 0.5},
    ]
    series = ev.robustness_series(rows)
    mean, std = series[("test-noise", "none")][0.0]
    assert mean == pytest.approx(0.7)
    assert std == pytest.approx(0.1)
