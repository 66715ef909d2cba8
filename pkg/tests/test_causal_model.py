import numpy as np
import pytest

from evcause import autodiff as ad
from evcause import causal as cm
from evcause import data as ed
from evcause import synthetic as syn
from evcause.errors import ConfigError, ParameterError, TrainingError

from oracles import max_relative_error

MINI = dict(d_s=4, d_a=10, alpha=1e-2, eta=1e-5, dropout=0.5, seed=3)


def mini_model(m=3, e=2, window=7, **overrides):
    cfg = cm.CausalModelConfig(**{**MINI, **overrides})
    return cm.CausalModel(cfg, num_locations=m, num_event_types=e, window=window)


def random_batch(model, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.poisson(3.0, size=(batch, model.num_locations, model.num_event_types, model.window)).astype(float)
    c = rng.integers(0, 2, size=(batch, model.num_locations, model.num_event_types)).astype(np.int8)
    y = rng.integers(0, 2, size=(batch, model.num_locations)).astype(np.int8)
    mask = rng.random((batch, model.num_locations)) < 0.8
    if not mask.any():
        mask[0, 0] = True
    return x, c, y, mask


# -- adjacency -----------------------------------------------------------------


def test_adjacency_uniform_when_embeddings_zero():
    model = mini_model()
    model.store["node_emb1"].data[:] = 0.0
    model.store["node_emb2"].data[:] = 0.0
    adj = model.adaptive_adjacency()
    np.testing.assert_allclose(adj.data, np.full((3, 3), 1.0 / 3.0))


def test_adjacency_rows_sum_to_one():
    adj = mini_model().adaptive_adjacency()
    np.testing.assert_allclose(adj.data.sum(axis=1), np.ones(3), atol=1e-9)
    assert np.all((adj.data >= 0) & (adj.data <= 1))


def test_adjacency_relu_zeroed_row_becomes_uniform():
    model = mini_model()
    # Embeddings chosen so every score in row 0 is negative before the ReLU.
    model.store["node_emb1"].data[0, :] = -1.0
    model.store["node_emb2"].data[:, :] = np.abs(model.store["node_emb2"].data)
    adj = model.adaptive_adjacency()
    np.testing.assert_allclose(adj.data[0], np.full(3, 1.0 / 3.0), atol=1e-12)


# -- temporal encoder -----------------------------------------------------------


def test_temporal_zero_input_zero_biases_gives_zeros():
    model = mini_model()
    out = model.encode_temporal(np.zeros((3, 2, 7)))
    np.testing.assert_array_equal(out.data, np.zeros((3, 4)))


def test_temporal_output_shape():
    for m in (1, 3, 5):
        model = mini_model(m=m)
        out = model.encode_temporal(np.random.default_rng(0).poisson(2.0, size=(m, 2, 7)).astype(float))
        assert out.shape == (m, 4)


def test_window_below_receptive_span_rejected():
    with pytest.raises(ConfigError):
        mini_model(window=6)


def test_temporal_gradient_matches_finite_differences():
    model = mini_model()
    x, _, _, _ = random_batch(model, batch=1, seed=5)
    probe = np.random.default_rng(6).normal(size=(1, 3, 4))

    def loss_value():
        with ad.no_grad():
            return ad.tensor_sum(model.encoder.temporal(x) * probe).item()

    model.store.zero_grad()
    loss = ad.tensor_sum(model.encoder.temporal(x) * probe)
    loss.backward()
    h = 1e-5
    for name in ("tcn0_gamma1", "tcn1_gamma2", "tcn2_skip_w", "in_w"):
        tensor = model.store[name]
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        err = max_relative_error(analytic, numeric)
        assert err < 1e-4, (name, err)


# -- spatial encoder -------------------------------------------------------------


def test_spatial_identity_propagation():
    model = mini_model()
    for w in model.encoder.gcn_w:
        w.data[:] = np.eye(4)
    h = np.random.default_rng(1).normal(size=(3, 4))
    out = model.encode_spatial(h, adjacency=ad.Tensor(np.eye(3)))
    np.testing.assert_allclose(out.data, np.maximum(h, 0.0))


def test_spatial_uniform_adjacency_averages_rows():
    model = mini_model()
    h = np.random.default_rng(2).normal(size=(3, 4))
    uniform = ad.Tensor(np.full((3, 3), 1.0 / 3.0))
    out = model.encode_spatial(h, adjacency=uniform)
    assert np.allclose(out.data[0], out.data[1]) and np.allclose(out.data[1], out.data[2])


def test_spatial_matches_naive_dense_oracle():
    model = mini_model()
    rng = np.random.default_rng(3)
    h = rng.normal(size=(3, 4))
    adj = rng.random((3, 3))
    adj /= adj.sum(axis=1, keepdims=True)
    out = model.encode_spatial(h, adjacency=ad.Tensor(adj))
    expect = h.copy()
    for w in model.encoder.gcn_w:
        expect = np.maximum(adj @ expect @ w.data, 0.0)
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


# -- confounder representation and heads --------------------------------------------


def test_confounder_repr_shape_and_suffix():
    model = mini_model()
    g = np.arange(4, dtype=float)
    z0 = model.confounder_repr(g, 0)
    z1 = model.confounder_repr(g, 1)
    assert z0.shape == (8,)
    np.testing.assert_array_equal(z0.data[:4], g)
    np.testing.assert_array_equal(z1.data[:4], g)
    assert not np.array_equal(z0.data[4:], z1.data[4:])


def test_confounder_repr_index_bounds():
    model = mini_model()
    with pytest.raises(ParameterError):
        model.confounder_repr(np.zeros(4), 2)


def test_treatment_embedding_gradient_masked_by_loss_treatment():
    """Only the loss terms of treatment j reach v_j."""
    model = mini_model()
    x, c, y, mask = random_batch(model)
    y1_list, y0_list, _ = model._forward(x)
    cj = c[..., 0].astype(float)
    factual = y1_list[0] * cj + y0_list[0] * (1.0 - cj)
    loss = ad.tensor_sum(ad.bce_elements(factual, y))
    model.store.zero_grad()
    loss.backward()
    grad = model.store["treat_emb"].grad
    assert np.any(grad[0] != 0.0)
    np.testing.assert_array_equal(grad[1], np.zeros(4))


def test_potential_outcomes_in_open_unit_interval():
    model = mini_model()
    x, _, _, _ = random_batch(model, batch=3)
    y1, y0 = model.potential_outcomes(x)
    for arr in (y1.data, y0.data):
        assert np.all((arr > 0.0) & (arr < 1.0))
        assert arr.shape == (3, 3, 2)


def test_tied_heads_give_zero_ite():
    model = mini_model()
    for layer in range(3):
        for kind in ("w", "b"):
            src = model.store[f"head0_a1_{kind}{layer}"].data
            model.store[f"head0_a0_{kind}{layer}"].data = src.copy()
    x, _, _, _ = random_batch(model)
    y1, y0 = model.potential_outcomes(x)
    np.testing.assert_allclose(y1.data[..., 0], y0.data[..., 0], atol=1e-15)


def test_predict_potential_outcomes_single_vector():
    model = mini_model()
    pair = model.predict_potential_outcomes(np.random.default_rng(4).normal(size=8), 1)
    assert 0.0 < pair.y1 < 1.0 and 0.0 < pair.y0 < 1.0
    assert pair.ite == pytest.approx(pair.y1 - pair.y0)
    again = model.predict_potential_outcomes(
        np.random.default_rng(4).normal(size=8), 1
    )
    assert (pair.y1, pair.y0) == (again.y1, again.y0)


# -- losses -----------------------------------------------------------------------


def test_factual_loss_matches_enumeration_oracle():
    model = mini_model(eta=0.0)
    x, c, y, mask = random_batch(model)
    y1_list, y0_list, _ = model._forward(x)
    loss = model.factual_loss(y1_list, y0_list, c, y, mask)
    expect = 0.0
    for j in range(2):
        for b in range(x.shape[0]):
            for i in range(3):
                if not mask[b, i]:
                    continue
                p = y1_list[j].data[b, i] if c[b, i, j] == 1 else y0_list[j].data[b, i]
                p = min(max(p, 1e-7), 1 - 1e-7)
                expect += -(y[b, i] * np.log(p) + (1 - y[b, i]) * np.log(1 - p))
    assert loss.item() == pytest.approx(expect, rel=1e-12)


def test_factual_loss_decomposes_with_weight_decay():
    model = mini_model(eta=1e-3)
    x, c, y, mask = random_batch(model)
    y1_list, y0_list, _ = model._forward(x)
    with_reg = model.factual_loss(y1_list, y0_list, c, y, mask).item()
    model.config.eta = 0.0
    without = model.factual_loss(y1_list, y0_list, c, y, mask).item()
    model.config.eta = 1e-3
    assert with_reg == pytest.approx(without + 1e-3 * model.store.l2_penalty().item(), rel=1e-12)


def test_ipm_loss_zero_alpha_and_linear_scaling():
    model = mini_model(alpha=0.0)
    x, c, y, mask = random_batch(model)
    _, _, z_list = model._forward(x)
    assert model.ipm_loss(z_list, c, mask).item() == 0.0
    model.config.alpha = 0.5
    half = model.ipm_loss(z_list, c, mask).item()
    model.config.alpha = 1.0
    full = model.ipm_loss(z_list, c, mask).item()
    assert full == pytest.approx(2.0 * half, rel=1e-12)
    assert full >= 0.0


def test_ipm_loss_empty_group_is_zero():
    model = mini_model(alpha=1.0)
    x, c, y, mask = random_batch(model)
    _, _, z_list = model._forward(x)
    all_treated = np.ones_like(c)
    assert model.ipm_loss(z_list, all_treated, mask).item() == 0.0


def test_causal_loss_gradient_matches_finite_differences():
    """End-to-end check of the composed stage-1 objective on a miniature model."""
    model = mini_model()
    x, c, y, mask = random_batch(model, batch=2, seed=11)

    def loss_value():
        with ad.no_grad():
            return model.batch_loss(x, c, y, mask).item()

    model.store.zero_grad()
    loss = model.batch_loss(x, c, y, mask)
    loss.backward()
    h = 1e-5
    failures = []
    for name, tensor in model.store.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        err = max_relative_error(analytic, numeric)
        if err >= 1e-4:
            failures.append((name, err))
    assert not failures, failures


# -- training ---------------------------------------------------------------------


def tiny_dataset(seed=0, t=260):
    cfg = syn.SyntheticConfig(M=4, E=3, T=t, window=3, lead=1,
                              effect_sizes=(0.0, 0.8, 0.0), target_type=0, seed=seed)
    cube, _ = syn.generate(cfg)
    samples = ed.build_samples(cube, cfg.window, cfg.lead, cfg.target_type)
    return ed.split(samples, seed=seed), cfg


def smoke_config(**overrides):
    base = dict(d_s=8, d_a=4, dilations=(1, 2), alpha=1e-2, max_epochs=6,
                patience=10, batch_size=32, seed=1)
    base.update(overrides)
    return cm.CausalModelConfig(**base)


def test_training_loss_decreases_on_smoke_run():
    dataset, _ = tiny_dataset()
    result = cm.train_causal(dataset, smoke_config(), num_locations=4)
    losses = [rec["train_loss"] for rec in result.epochs]
    assert losses[4] < losses[0]


def test_training_is_deterministic():
    dataset, _ = tiny_dataset()
    a = cm.train_causal(dataset, smoke_config(max_epochs=3), num_locations=4)
    b = cm.train_causal(dataset, smoke_config(max_epochs=3), num_locations=4)
    assert [r["val_loss"] for r in a.epochs] == [r["val_loss"] for r in b.epochs]
    for name in a.model.store.names():
        np.testing.assert_array_equal(a.model.store[name].data, b.model.store[name].data)


def test_training_restores_best_epoch_parameters():
    dataset, _ = tiny_dataset()
    result = cm.train_causal(dataset, smoke_config(max_epochs=5, patience=2), num_locations=4)
    assert result.best_epoch >= 1
    assert result.best_val_loss == min(r["val_loss"] for r in result.epochs)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_input_aborts_with_diagnostics():
    dataset, _ = tiny_dataset()
    dataset.train[0].covariates[0, 0] = np.inf
    with pytest.raises(TrainingError, match="epoch"):
        cm.train_causal(dataset, smoke_config(), num_locations=4)


def test_eval_mode_is_deterministic_after_training():
    dataset, _ = tiny_dataset()
    result = cm.train_causal(dataset, smoke_config(max_epochs=2), num_locations=4)
    grids = ed.time_grids(dataset, 4)
    y1_a, y0_a = result.model.outcome_grids(grids.covariates[:10])
    y1_b, y0_b = result.model.outcome_grids(grids.covariates[:10])
    np.testing.assert_array_equal(y1_a, y1_b)
    np.testing.assert_array_equal(y0_a, y0_b)


def test_single_treatment_no_balancing_reduces_to_factual_regression():
    """With one event type and no balancing term the model is a plain factual
    regressor; on unconfounded data its matched ATT error stays small."""
    from evcause import evaluation as ev

    cfg = syn.SyntheticConfig(M=6, E=1, T=1200, sharpness=0.0, effect_sizes=(0.6,),
                              target_type=0, seed=0)
    cube, _ = syn.generate(cfg)
    samples = ed.build_samples(cube, cfg.window, cfg.lead, cfg.target_type)
    dataset = ed.split(samples, seed=0)
    model_cfg = cm.CausalModelConfig(d_s=16, alpha=0.0, max_epochs=25, patience=8, seed=0)
    model = cm.train_causal(dataset, model_cfg, 6).model
    grids = ed.time_grids(dataset, 6)
    eps = ev.matched_att_error(model, grids, dataset.test, 0)
    assert eps < 0.05


def test_checkpoint_roundtrip_preserves_model(tmp_path):
    dataset, _ = tiny_dataset()
    result = cm.train_causal(dataset, smoke_config(max_epochs=2), num_locations=4)
    path = tmp_path / "causal.ckpt"
    cm.save_causal_model(path, result.model)
    loaded = cm.load_causal_model(path)
    for name in result.model.store.names():
        np.testing.assert_array_equal(loaded.store[name].data, result.model.store[name].data)
    grids = ed.time_grids(dataset, 4)
    y1_a, _ = result.model.outcome_grids(grids.covariates[:5])
    y1_b, _ = loaded.outcome_grids(grids.covariates[:5])
    np.testing.assert_array_equal(y1_a, y1_b)
