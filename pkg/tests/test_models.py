import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpgd import autodiff as ad
from mpgd.errors import ConfigError, ShapeError
from mpgd.gradcheck import max_rel_error, numeric_grads
from mpgd.models import Model, ModelConfig, init_model, param_shapes


def test_init_shapes_and_bounds():
    m = init_model(ModelConfig("mlp", (4, 8, 2)))
    assert {k: v.shape for k, v in m.params.items()} == {
        "W1": (8, 4), "b1": (8,), "W2": (2, 8), "b2": (2,)
    }
    assert np.abs(m.params["W1"]).max() < 0.5
    assert not m.params["b1"].any()


def test_init_is_deterministic():
    cfg = ModelConfig("fcn", (2, 4, 1), seed=3)
    a, b = init_model(cfg), init_model(cfg)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    other = init_model(ModelConfig("fcn", (2, 4, 1), seed=4))
    assert a.params["K1"].tobytes() != other.params["K1"].tobytes()


def test_forward_examples():
    m = Model(ModelConfig("mlp", (1, 1), activation="identity"), {"W1": np.array([[1.0]]), "b1": np.zeros(1)})
    assert m.predict(np.array([3.0])).tolist() == [3.0]
    m = Model(ModelConfig("mlp", (3, 2)), {"W1": np.zeros((2, 3)), "b1": np.array([0.5, -1.0])})
    np.testing.assert_array_equal(m.predict(np.array([7.0, -2.0, 1.0])), [0.5, -1.0])
    m = Model(ModelConfig("fcn", (1, 1), kernel=1, output_activation="relu"),
              {"K1": np.full((1, 1, 1, 1), 2.0), "b1": np.zeros(1)})
    assert not m.predict(-np.ones((1, 4, 4))).any()


def test_batched_forward_matches_single():
    for cfg, shape in ((ModelConfig("mlp", (3, 5, 2)), (3,)), (ModelConfig("fcn", (2, 3, 1)), (2, 5, 5))):
        m = init_model(cfg)
        xs = np.random.default_rng(0).normal(size=(4,) + shape)
        batched = m.predict(xs)
        for i in range(4):
            np.testing.assert_allclose(batched[i], m.predict(xs[i]), rtol=1e-13, atol=1e-15)


def test_forward_shape_errors():
    m = init_model(ModelConfig("mlp", (3, 2)))
    with pytest.raises(ShapeError):
        m.predict(np.zeros(4))
    f = init_model(ModelConfig("fcn", (2, 1)))
    with pytest.raises(ShapeError):
        f.predict(np.zeros((3, 4, 4)))


def test_config_validation():
    for kwargs in (dict(kind="rnn", widths=(1, 1)), dict(kind="mlp", widths=(1,)),
                   dict(kind="fcn", widths=(1, 1), kernel=2), dict(kind="mlp", widths=(1, 1), activation="tanh")):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs)
    with pytest.raises(ShapeError):
        Model(ModelConfig("mlp", (2, 1)), {"W1": np.zeros((2, 1)), "b1": np.zeros(1)})


def test_bias_free_model():
    cfg = ModelConfig("mlp", (2, 1), bias=False)
    assert list(param_shapes(cfg)) == ["W1"]
    m = Model(cfg, {"W1": np.array([[2.0, 3.0]])})
    assert m.predict(np.array([1.0, 1.0])).tolist() == [5.0]


def test_save_load_roundtrip(tmp_path):
    m = init_model(ModelConfig("fcn", (2, 3, 1), seed=9, output_activation="relu"))
    m.save(tmp_path / "ck")
    back = Model.load(tmp_path / "ck")
    assert back.config == m.config
    assert all(back.params[k].tobytes() == m.params[k].tobytes() for k in m.params)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["mlp", "fcn"]), st.integers(0, 10_000))
def test_param_gradients_match_fd(kind, seed):
    rng = np.random.default_rng(seed)
    if kind == "mlp":
        cfg, x = ModelConfig("mlp", (3, 4, 2), seed=seed), rng.normal(size=(2, 3))
    else:
        cfg, x = ModelConfig("fcn", (1, 2, 1), seed=seed), rng.normal(size=(1, 4, 4))
    m = init_model(cfg)
    m.params = {k: v + rng.normal(scale=0.1, size=v.shape) for k, v in m.params.items()}
    G = rng.normal(size=m.predict(x).shape)
    nodes = m.param_nodes()
    grads = ad.backward(ad.sum_(ad.mul(m.forward(x, nodes), G)))

    def f(params):
        return float(np.sum(Model(cfg, params).predict(x) * G))

    fd = numeric_grads(f, m.params)
    for name, node in nodes.items():
        assert max_rel_error(grads[node], fd[name], 1e-6) < 1e-5
