import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import numeric_gradients, relative_error
from tshape.dualcnn import (
    DualCnnModel, ModelConfig, ModelError, PairData, TrainConfig, TrainingError, backward, build_embedding_matrix,
    conv_forward, fit, forward, load_model, maxpool, save_model, write_history,
)

SMALL = dict(n=6, m_d=4, k=2, f=2, p=2, m_c=3, m_q=3)


def _pair(cfg, rng, batch=None):
    shape = (cfg.n, cfg.m_d) if batch is None else (batch, cfg.n, cfg.m_d)
    return rng.random(shape), rng.random(shape)


def test_embedding_matrix_padding_and_truncation():
    docs = [np.array([1.0, 2, 3]), np.array([4.0, 5, 6])]
    E = build_embedding_matrix(docs, 4)
    assert E.shape == (4, 3)
    assert np.array_equal(E[:2], np.stack(docs)) and not E[2:].any()
    assert not build_embedding_matrix([], 3, 2).any()
    five = [np.full(2, float(i)) for i in range(5)]
    assert np.array_equal(build_embedding_matrix(five, 3)[:, 0], [0.0, 1.0, 2.0])
    with pytest.raises(ModelError):
        build_embedding_matrix([np.zeros(3), np.zeros(2)], 4)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(0, 24), st.integers(1, 5), st.integers(0, 10**6))
def test_embedding_matrix_contract(n, size, m_d, seed):
    docs = list(np.random.default_rng(seed).random((size, m_d)) + 0.01)
    E = build_embedding_matrix(docs, n, m_d)
    used = min(size, n)
    assert np.array_equal(E[:used], np.array(docs[:used]).reshape(used, m_d))
    assert not E[used:].any()


def test_conv_examples():
    E = np.array([[1.0, 0], [0, 1], [1, 1]])
    assert np.array_equal(conv_forward(E, np.ones((1, 2, 2)), [0.0], "identity"), [[2.0, 3.0]])
    assert not conv_forward(E, np.zeros((1, 2, 2)), [0.0], "relu").any()
    with pytest.raises(ModelError):
        conv_forward(E[:1], np.ones((1, 2, 2)), [0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(1, 4), st.integers(1, 3), st.integers(0, 10**6))
def test_conv_matches_window_dot_products(n, m_d, k, seed):
    rng = np.random.default_rng(seed)
    f = int(rng.integers(1, n + 1))
    E, F, b = rng.normal(size=(n, m_d)), rng.normal(size=(k, f, m_d)), rng.normal(size=k)
    out = conv_forward(E, F, b, "identity")
    assert out.shape == (k, n - f + 1)
    for j in range(k):
        for r in range(n - f + 1):
            assert out[j, r] == pytest.approx(float(np.sum(F[j] * E[r:r + f]) + b[j]), abs=1e-12)


def test_maxpool_examples():
    assert maxpool([2.0, 3.0], 2)[0].tolist() == [3.0]
    pooled, idx = maxpool([5.0, 1.0, 4.0, 2.0], 2)
    assert pooled.tolist() == [5.0, 4.0] and idx.tolist() == [0, 2]
    assert maxpool([7.0], 3)[0].tolist() == [7.0]
    with pytest.raises(ModelError):
        maxpool([1.0], 0)


@given(st.integers(1, 30), st.integers(1, 6))
def test_shape_law(n, p):
    for f in {1, min(2, n), n}:
        cfg = ModelConfig(n=n, m_d=3, k=2, f=f, p=p, m_c=4, m_q=4)
        assert cfg.pooled_len == -(-(n - f + 1) // p)
        assert cfg.flat_len == 2 * cfg.pooled_len


def test_config_validation():
    for bad in (dict(n=0), dict(n=1, f=2), dict(p=0), dict(m_c=3, m_q=4), dict(activation="gelu")):
        with pytest.raises(ModelError):
            ModelConfig(**{**SMALL, **bad})


def test_zero_parameters_give_zero_outputs():
    cfg = ModelConfig(**SMALL)
    out = forward(DualCnnModel.zeros(cfg), *_pair(cfg, np.random.default_rng(0)))
    assert not out.Lc.any() and not out.Lq.any()
    assert out.o1 == 0 and out.o2 == 0 and out.o3 == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["relu", "tanh"]))
def test_output_range_and_symmetry(seed, activation):
    cfg = ModelConfig(**SMALL, activation=activation, seed=seed)
    model = DualCnnModel.initialize(cfg)
    for key in ("filters", "filter_bias", "fc_weight", "fc_bias"):
        model.params[f"q.{key}"] = model.params[f"c.{key}"].copy()
    rng = np.random.default_rng(seed)
    Ec, Eq = rng.normal(size=(2, cfg.n, cfg.m_d)) * 5
    a, b = forward(model, Ec, Eq), forward(model, Eq, Ec)
    assert -1.0 <= a.o3 <= 1.0
    assert a.o1 == pytest.approx(b.o1, abs=1e-12)


def test_batch_matches_single_pairs():
    cfg = ModelConfig(**SMALL, seed=4)
    model = DualCnnModel.initialize(cfg)
    Ec, Eq = _pair(cfg, np.random.default_rng(1), batch=5)
    batched = model.score(Ec, Eq, chunk=2)
    singles = [forward(model, Ec[i], Eq[i]).o3 for i in range(5)]
    np.testing.assert_allclose(batched, singles, rtol=0, atol=1e-12)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed, activation):
    cfg = ModelConfig(**SMALL, activation=activation, seed=seed)
    model = DualCnnModel.initialize(cfg)
    rng = np.random.default_rng(1000 + seed)
    for name in model.params:  # nonzero biases exercise every path
        model.params[name] = model.params[name] + rng.normal(scale=0.1, size=model.params[name].shape)
    Ec, Eq = _pair(cfg, rng, batch=3)
    y = rng.choice([-1.0, 0.0, 1.0], size=3)
    analytic = backward(model, Ec, Eq, y)
    numeric = numeric_gradients(lambda: model.loss_and_gradients(Ec, Eq, y)[0], model.params)
    for name in model.params:
        assert relative_error(analytic[name], numeric[name]) < 1e-4, name


def test_zero_gradient_at_target():
    cfg = ModelConfig(**SMALL, seed=2)
    model = DualCnnModel.initialize(cfg)
    Ec, Eq = _pair(cfg, np.random.default_rng(2))
    y = forward(model, Ec, Eq).o3
    assert all(not g.any() for g in backward(model, Ec, Eq, y).values())


def test_dead_relu_filter_gets_no_gradient():
    cfg = ModelConfig(**SMALL, seed=3)
    model = DualCnnModel.initialize(cfg)
    model.params["c.filter_bias"][:] = [-100.0, 0.0]
    Ec, Eq = _pair(cfg, np.random.default_rng(3))
    grads = backward(model, Ec, Eq, 1.0)
    assert not grads["c.filters"][0].any() and grads["c.filter_bias"][0] == 0.0
    assert grads["c.filters"][1].any()


def _pairs(cfg, rng, count, targets=None):
    users = rng.random((count, cfg.n, cfg.m_d))
    queries = rng.random((1, cfg.n, cfg.m_d))
    y = rng.choice([-1.0, 1.0], size=count) if targets is None else np.asarray(targets, dtype=float)
    return PairData(users, queries, np.arange(count), np.zeros(count, dtype=np.int64), y)


def test_single_pair_overfits_monotonically():
    cfg = ModelConfig(**SMALL, activation="tanh", seed=0)
    data = _pairs(cfg, np.random.default_rng(0), 1, targets=[0.5])
    res = fit(DualCnnModel.initialize(cfg), data, data, TrainConfig(epochs=500, batch_size=1, patience=500))
    losses = [tr for _, tr, _ in res.history]
    assert losses[-1] < 1e-3
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_training_is_deterministic_and_keeps_best():
    cfg = ModelConfig(**SMALL, activation="tanh", seed=5)
    rng = np.random.default_rng(5)
    train, val = _pairs(cfg, rng, 12), _pairs(cfg, rng, 4)
    tc = TrainConfig(learning_rate=1e-2, epochs=30, batch_size=4, patience=5, seed=9)
    a = fit(DualCnnModel.initialize(cfg), train, val, tc)
    b = fit(DualCnnModel.initialize(cfg), train, val, tc)
    assert a.history == b.history and a.best_epoch == b.best_epoch
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)
    vals = [v for _, _, v in a.history]
    assert vals[a.best_epoch - 1] == min(vals)
    assert len(vals) - a.best_epoch <= tc.patience


def test_training_errors():
    cfg = ModelConfig(**SMALL)
    data = _pairs(cfg, np.random.default_rng(0), 3)
    empty = PairData(data.user_mats, data.query_mats, data.user_idx[:0], data.query_idx[:0], data.targets[:0])
    with pytest.raises(TrainingError):
        fit(DualCnnModel.initialize(cfg), empty, data, TrainConfig())
    with pytest.raises(ModelError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ModelError):
        TrainConfig(epochs=0)


def test_checkpoint_round_trip_and_errors(tmp_path):
    cfg = ModelConfig(**SMALL, activation="tanh", seed=8)
    model = DualCnnModel.initialize(cfg)
    save_model(model, tmp_path / "m.esm")
    back = load_model(tmp_path / "m.esm")
    assert back.config == cfg
    Ec, Eq = _pair(cfg, np.random.default_rng(8))
    assert forward(back, Ec, Eq).o3 == forward(model, Ec, Eq).o3
    blob = (tmp_path / "m.esm").read_bytes()
    (tmp_path / "t.esm").write_bytes(blob[:-5])
    with pytest.raises(ModelError, match="truncated"):
        load_model(tmp_path / "t.esm")
    (tmp_path / "v.esm").write_bytes(blob.replace(b"ESM-CNN-v1", b"ESM-CNN-v2", 1))
    with pytest.raises(ModelError, match="expected ESM-CNN-v1, found ESM-CNN-v2"):
        load_model(tmp_path / "v.esm")


def test_history_csv(tmp_path):
    write_history([(1, 0.5, 0.25)], tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == "epoch,train_loss,val_loss\n1,0.5,0.25\n"
