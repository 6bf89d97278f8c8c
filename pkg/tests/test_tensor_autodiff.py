import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mpgd import autodiff as ad
from mpgd.errors import FormatError, NonFiniteError, ShapeError
from mpgd.gradcheck import max_rel_error, numeric_grad
from mpgd.tensor import as_tensor, load_tensor, read_tensor, save_tensor, tensor_bytes, write_tensor

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# tensor --------------------------------------------------------------------

def test_as_tensor_keeps_scalar_rank():
    assert as_tensor(2.5).shape == ()
    assert as_tensor([1, 2]).dtype == np.float64


def test_as_tensor_rejects_nan():
    with pytest.raises(NonFiniteError):
        as_tensor([1.0, np.nan])


@given(arrays(np.float64, st.tuples(*[st.integers(0, 4)] * 3), elements=finite))
def test_tensor_roundtrip(arr):
    buf = io.BytesIO()
    write_tensor(buf, arr)
    buf.seek(0)
    back = read_tensor(buf)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_tensor_file_roundtrip_and_layout(tmp_path):
    arr = np.arange(6.0).reshape(2, 3)
    save_tensor(tmp_path / "a.mpgt", arr)
    raw = (tmp_path / "a.mpgt").read_bytes()
    assert raw[:4] == b"MPGT"
    assert int.from_bytes(raw[4:8], "little") == 2
    assert len(raw) == 4 + 4 + 8 + 6 * 8
    assert raw == tensor_bytes(arr)
    np.testing.assert_array_equal(load_tensor(tmp_path / "a.mpgt"), arr)


def test_tensor_truncated_and_bad_magic(tmp_path):
    raw = tensor_bytes(np.ones((3, 3)))
    (tmp_path / "t.mpgt").write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        load_tensor(tmp_path / "t.mpgt")
    (tmp_path / "m.mpgt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_tensor(tmp_path / "m.mpgt")
    (tmp_path / "x.mpgt").write_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        load_tensor(tmp_path / "x.mpgt")


# elementwise / reductions ----------------------------------------------------

def test_elementwise_examples():
    np.testing.assert_array_equal(ad.elementwise("add", ad.const([1, 2]), [3, 4]).value, [4, 6])
    np.testing.assert_array_equal(ad.elementwise("square", ad.const([0, -3])).value, [0, 9])
    a = ad.leaf([2.0])
    grads = ad.backward(ad.sum_(ad.mul(a, ad.const([5.0]))))
    np.testing.assert_array_equal(grads[a], [5.0])


def test_reduce_examples():
    assert ad.reduce("mean", ad.const([2, 4, 6])).item() == 4
    a = ad.leaf([1.0, 2.0, 3.0, 4.0])
    gm = ad.reduce("gather-mean", a, [1, 3])
    assert gm.item() == 3
    np.testing.assert_array_equal(ad.backward(gm)[a], [0, 0.5, 0, 0.5])


def test_gather_mean_index_errors():
    a = ad.leaf([1.0, 2.0])
    for bad in ([], [2], [0, 0], [-1]):
        with pytest.raises((ShapeError, IndexError, ValueError)):
            ad.gather_mean(a, bad)


@given(arrays(np.float64, st.integers(1, 40), elements=finite))
def test_gather_mean_all_equals_mean_bitwise(x):
    a = ad.const(x)
    assert ad.gather_mean(a, np.arange(x.size)).item() == ad.mean(a).item()


def test_max_gradient_goes_to_first_argmax():
    a = ad.leaf([1.0, 3.0, 3.0])
    np.testing.assert_array_equal(ad.backward(ad.max_(a))[a], [0, 1, 0])


def test_abs_subgradient_zero_at_zero():
    a = ad.leaf([0.0, -2.0, 2.0])
    np.testing.assert_array_equal(ad.backward(ad.sum_(ad.absolute(a)))[a], [0, -1, 1])


def test_div_by_zero_is_explicit():
    with pytest.raises(ZeroDivisionError):
        ad.div(ad.const([1.0]), ad.const([0.0]))


def test_exp_overflow_raises():
    with pytest.raises(NonFiniteError):
        ad.exp(ad.const([1000.0]))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(ad.const([1.0, 2.0]), ad.const([1.0, 2.0, 3.0]))


# linear algebra ----------------------------------------------------------------

def test_matmul_examples():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(ad.matmul(ad.const(np.eye(2)), ad.const(x)).value, x)
    assert ad.matmul(ad.const([[1.0, 2.0]]), ad.const([[3.0], [4.0]])).value.tolist() == [[11.0]]


def test_matmul_grad_matches_fd():
    rng = np.random.default_rng(0)
    a0, b0, G = rng.normal(size=(2, 3)), rng.normal(size=(3, 2)), rng.normal(size=(2, 2))
    a = ad.leaf(a0)
    grads = ad.backward(ad.sum_(ad.mul(ad.matmul(a, ad.const(b0)), G)))
    np.testing.assert_allclose(grads[a], G @ b0.T, rtol=1e-12)
    fd = numeric_grad(lambda v: float(np.sum((v @ b0) * G)), a0)
    assert max_rel_error(grads[a], fd) < 1e-8


def test_conv_examples():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 5, 6))
    out = ad.conv2d(ad.const(x), ad.const([[[[2.0]]]])).value
    np.testing.assert_allclose(out, 2 * x)
    assert not ad.conv2d(ad.const(x), ad.const(np.zeros((2, 1, 3, 3)))).value.any()


def _conv_oracle(x, k):
    c_out, c_in, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((c_out,) + x.shape[1:])
    for o in range(c_out):
        for i in range(x.shape[1]):
            for j in range(x.shape[2]):
                out[o, i, j] = np.sum(xp[:, i:i + kh, j:j + kw] * k[o])
    return out


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3, 5]), st.integers(0, 2**31))
def test_conv_matches_loop_oracle_and_fd(c_in, c_out, ks, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(c_in, 4, 5))
    k0 = rng.normal(size=(c_out, c_in, ks, ks))
    G = rng.normal(size=(c_out, 4, 5))
    x, k = ad.leaf(x0), ad.leaf(k0)
    y = ad.conv2d(x, k)
    np.testing.assert_allclose(y.value, _conv_oracle(x0, k0), atol=1e-12)
    grads = ad.backward(ad.sum_(ad.mul(y, G)))
    fx = numeric_grad(lambda v: float(np.sum(_conv_oracle(v, k0) * G)), x0)
    fk = numeric_grad(lambda v: float(np.sum(_conv_oracle(x0, v) * G)), k0)
    assert max_rel_error(grads[x], fx, 1e-6) < 1e-6
    assert max_rel_error(grads[k], fk, 1e-6) < 1e-6


def test_batched_conv_equals_per_instance():
    rng = np.random.default_rng(2)
    x, k = rng.normal(size=(3, 2, 4, 4)), rng.normal(size=(2, 2, 3, 3))
    batched = ad.conv2d(ad.const(x), ad.const(k)).value
    for i in range(3):
        np.testing.assert_array_equal(batched[i], ad.conv2d(ad.const(x[i]), ad.const(k)).value)


def test_conv_rejects_even_kernel_and_channel_mismatch():
    with pytest.raises(ShapeError):
        ad.conv2d(ad.const(np.zeros((1, 4, 4))), ad.const(np.zeros((1, 1, 2, 2))))
    with pytest.raises(ShapeError):
        ad.conv2d(ad.const(np.zeros((2, 4, 4))), ad.const(np.zeros((1, 1, 3, 3))))


# backward ------------------------------------------------------------------

def test_backward_examples():
    w = ad.leaf([1.0, 2.0])
    np.testing.assert_array_equal(ad.backward(ad.sum_(ad.square(w)))[w], [2, 4])
    w = ad.leaf([3.0])
    np.testing.assert_array_equal(ad.backward(ad.mean(ad.square(ad.sub(w, [1.0]))))[w], [4])


def test_backward_needs_scalar_root():
    with pytest.raises(ShapeError):
        ad.backward(ad.square(ad.leaf([1.0, 2.0])))


def test_shared_subexpression_accumulates():
    w = ad.leaf([1.5])
    y = ad.mul(w, w)
    np.testing.assert_allclose(ad.backward(ad.sum_(ad.add(y, y)))[w], [6.0])


UNARY = ["exp", "square", "abs", "relu", "max"]
BINARY = ["add", "sub", "mul", "div"]


def _random_graph(rng, n_ops):
    """A random expression over two leaves, built both as nodes and as a numpy closure."""
    ops = [(rng.choice(UNARY + BINARY), rng.integers(0, 2), rng.normal()) for _ in range(n_ops)]

    def build(x, y, lib):
        vals = [x, y]
        for op, pick, s in ops:
            a, b = vals[-1], vals[pick]
            if op == "exp":
                r = lib["exp"](lib["mul"](a, 0.1))
            elif op == "square":
                r = lib["mul"](lib["square"](a), 0.2)
            elif op == "abs":
                r = lib["abs"](a)
            elif op == "relu":
                r = lib["relu"](a)
            elif op == "max":
                r = lib["max"](a, s)
            elif op == "div":
                r = lib["div"](a, lib["add"](lib["square"](b), 1.0))
            else:
                r = lib[op](a, b)
            vals.append(r)
        return lib["mean"](vals[-1])

    return build


NODE_LIB = {"exp": ad.exp, "mul": ad.mul, "square": ad.square, "abs": ad.absolute, "relu": ad.relu,
            "max": ad.maximum, "div": ad.div, "add": ad.add, "sub": ad.sub, "mean": ad.mean}
NP_LIB = {"exp": np.exp, "mul": np.multiply, "square": np.square, "abs": np.abs,
          "relu": lambda a: np.maximum(a, 0), "max": np.maximum, "div": np.divide, "add": np.add,
          "sub": np.subtract, "mean": np.mean}


def test_random_graphs_match_finite_differences():
    rng = np.random.default_rng(123)
    for case in range(100):
        build = _random_graph(rng, int(rng.integers(1, 8)))
        x0, y0 = rng.normal(size=6), rng.normal(size=6)
        x, y = ad.leaf(x0), ad.leaf(y0)
        grads = ad.backward(build(x, y, NODE_LIB))
        fx = numeric_grad(lambda v: float(build(v, y0, NP_LIB)), x0)
        fy = numeric_grad(lambda v: float(build(x0, v, NP_LIB)), y0)
        assert max_rel_error(grads.get(x, np.zeros(6)), fx, 1e-6) < 1e-5, case
        assert max_rel_error(grads.get(y, np.zeros(6)), fy, 1e-6) < 1e-5, case


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    build = _random_graph(rng, 6)
    x0, y0 = rng.normal(size=6), rng.normal(size=6)
    runs = []
    for _ in range(2):
        x, y = ad.leaf(x0), ad.leaf(y0)
        g = ad.backward(build(x, y, NODE_LIB))
        runs.append(g[x].tobytes() + g[y].tobytes())
    assert runs[0] == runs[1]
