import hashlib
import subprocess
import sys

import numpy as np
import pytest

from diffmesh.errors import DimensionError, FormatError, StateError
from diffmesh.numcore import (
    ParamStore,
    Rng,
    Tensor,
    absolute,
    adamw_step,
    add,
    clip_grad_norm,
    div,
    gather_rows,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    reshape,
    scatter_add_rows,
    softmax_rows,
    sqrt,
    square,
    sub,
    sum_all,
    transpose_last_two,
)


def tensor(rng, *shape):
    return Tensor(rng.normal(shape), requires_grad=True)


@pytest.fixture
def rng():
    return Rng(1234)


def test_elementwise_gradients(rng):
    a, b = tensor(rng, 4, 3), tensor(rng, 3)
    assert grad_check(lambda a, b: sum_all(square(add(a, b))), [a, b]) < 1e-5
    assert grad_check(lambda a, b: sum_all(square(sub(a, b))), [a, b]) < 1e-5
    assert grad_check(lambda a, b: sum_all(mul(a, b)), [a, b]) < 1e-5
    c = tensor(rng, 4, 3)
    d = Tensor(rng.uniform((4, 3)) + 1.0, requires_grad=True)
    assert grad_check(lambda c, d: sum_all(div(c, d)), [c, d]) < 1e-5


def test_unary_gradients(rng):
    x = Tensor(rng.uniform((5, 2)) + 0.5, requires_grad=True)
    assert grad_check(lambda x: sum_all(sqrt(x)), [x]) < 1e-5
    y = tensor(rng, 5, 2)
    assert grad_check(lambda y: sum_all(mul(absolute(y), y)), [y]) < 1e-5
    assert grad_check(lambda y: sum_all(gelu(y)), [y]) < 1e-5


def test_matmul_and_softmax_gradients(rng):
    a, b = tensor(rng, 3, 4), tensor(rng, 4, 2)
    weights = rng.normal((3, 2))
    assert grad_check(lambda a, b: sum_all(mul(matmul(a, b), weights)), [a, b]) < 1e-5
    x = tensor(rng, 3, 5)
    target = rng.normal((3, 5))
    assert grad_check(lambda x: sum_all(mul(softmax_rows(x), target)), [x]) < 1e-5


def test_layer_norm_gradients(rng):
    x, gain, bias = tensor(rng, 4, 6), tensor(rng, 6), tensor(rng, 6)
    target = rng.normal((4, 6))

    def f(x, gain, bias):
        return sum_all(mul(layer_norm(x, gain, bias), target))

    assert grad_check(f, [x, gain, bias]) < 1e-5


def test_layer_norm_normalizes():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    out = layer_norm(x, np.ones(4), np.zeros(4)).data
    assert np.allclose(out.mean(axis=-1), 0.0)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_row_gradients(rng):
    x = tensor(rng, 4, 3)
    index = np.array([[0, 3], [-1, 1], [2, 2]])
    weights = rng.normal((3, 2, 3))
    assert grad_check(lambda x: sum_all(mul(gather_rows(x, index), weights)), [x]) < 1e-5
    rows = tensor(rng, 5, 2)
    weights = rng.normal((3, 2))

    def f(rows):
        return sum_all(mul(scatter_add_rows(rows, [0, 2, 2, 1, 0], 3), weights))

    assert grad_check(f, [rows]) < 1e-5


def test_shape_gradients(rng):
    x = tensor(rng, 2, 3, 4)
    weights = rng.normal((2, 4, 3))
    assert grad_check(lambda x: sum_all(mul(transpose_last_two(x), weights)), [x]) < 1e-5
    assert grad_check(lambda x: sum_all(square(reshape(x, (6, 4)))), [x]) < 1e-5
    assert grad_check(lambda x: sum_all(square(sum_all(x, axis=1))), [x]) < 1e-5
    assert grad_check(lambda x: mean(square(x)), [x]) < 1e-5


def test_mse():
    assert mse(np.ones((2, 3)), np.zeros((2, 3))).item() == pytest.approx(1.0)


def test_broadcast_over_leading_axes_only():
    with pytest.raises(DimensionError):
        add(np.ones((4, 3)), np.ones((4, 1)))
    assert add(np.ones((2, 4, 3)), np.ones((4, 3))).shape == (2, 4, 3)


def test_gradients_accumulate():
    x = Tensor([2.0], requires_grad=True)
    sum_all(mul(x, 3.0)).backward()
    sum_all(mul(x, 4.0)).backward()
    assert x.grad.tolist() == [7.0]


def test_shared_input_sums_adjoints():
    x = Tensor([3.0], requires_grad=True)
    y = mul(x, 2.0)
    sum_all(add(mul(y, y), y)).backward()
    assert x.grad.tolist() == [2.0 * (2.0 * 6.0 + 1.0)]


def test_reflected_operators():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = sum_all(np.array([3.0, 3.0]) - x)
    assert y.item() == 3.0
    y.backward()
    assert x.grad.tolist() == [-1.0, -1.0]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad
    assert y._parents == ()


def test_backward_releases_graph():
    x = Tensor([1.0], requires_grad=True)
    y = mul(x, x)
    z = sum_all(y)
    z.backward()
    assert y._parents == ()
    assert z._backward is None


def test_deep_graph_backward():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = add(y, 1.0)
    sum_all(y).backward()
    assert x.grad.tolist() == [1.0]


def test_param_store_roundtrip():
    store = ParamStore()
    w = store.add("layer.weight", np.arange(6.0).reshape(2, 3))
    store.add("layer.bias", np.zeros(3))
    w.grad = np.ones((2, 3))
    store.params["layer.bias"].grad = np.ones(3)
    adamw_step(store, lr=0.1)
    blob = store.dumps()
    loaded = ParamStore.loads(blob)
    assert loaded.names() == ["layer.weight", "layer.bias"]
    assert loaded.dumps() == blob
    assert loaded.moments["layer.weight"][2] == 1


def test_param_store_rejects_bad_blobs():
    store = ParamStore()
    store.add("w", np.ones(4))
    blob = store.dumps()
    with pytest.raises(FormatError):
        ParamStore.loads(blob[:-3])
    with pytest.raises(FormatError):
        ParamStore.loads(blob + b"\0")
    with pytest.raises(FormatError):
        ParamStore.loads(b"XXXX" + blob[4:])


def test_param_store_duplicate_name():
    store = ParamStore()
    store.add("w", 1.0)
    with pytest.raises(StateError):
        store.add("w", 2.0)


def test_load_values_strict():
    store, other = ParamStore(), ParamStore()
    store.add("a", np.zeros(2))
    other.add("b", np.zeros(2))
    with pytest.raises(FormatError):
        store.load_values(other)


def test_adamw_needs_gradients():
    store = ParamStore()
    store.add("w", np.ones(2))
    with pytest.raises(StateError):
        adamw_step(store, lr=0.1)


def test_adamw_skips_frozen_parameters():
    store = ParamStore()
    frozen = store.add("base.w", np.ones(2))
    free = store.add("depth.w", np.ones(2))
    store.freeze("depth.")
    free.grad = np.ones(2)
    adamw_step(store, lr=0.1, weight_decay=0.0)
    assert frozen.data.tolist() == [1.0, 1.0]
    assert free.data.tolist() == pytest.approx([0.9, 0.9])
    assert store.step == 1


def test_clip_grad_norm():
    store = ParamStore()
    w = store.add("w", np.zeros(2))
    w.grad = np.array([3.0, 4.0])
    assert clip_grad_norm(store, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(w.grad) == pytest.approx(1.0)


def test_rng_streams():
    assert np.array_equal(Rng(3, 1).normal((4, 3)), Rng(3, 1).normal((4, 3)))
    assert not np.array_equal(Rng(3, 1).normal(5), Rng(3, 2).normal(5))
    parent = Rng(3)
    assert not np.array_equal(parent.substream(0).uniform(4), parent.substream(1).uniform(4))
    draws = Rng(5).integers(1, 3, size=1000)
    assert set(draws.tolist()) == {1, 2, 3}


def test_rng_normal_moments():
    draws = Rng(11).normal(20000)
    assert draws.mean() == pytest.approx(0.0, abs=0.03)
    assert draws.std() == pytest.approx(1.0, abs=0.03)


def test_adamw_decay_is_decoupled():
    store = ParamStore()
    w0 = Rng(2).normal((3, 2))
    w = store.add("w", w0)
    w.grad = np.zeros((3, 2))
    adamw_step(store, lr=0.1, weight_decay=0.01)
    assert np.array_equal(w.data, w0 - 0.1 * (0.01 * w0))


def test_rng_draws_are_stable_across_processes():
    digest = hashlib.sha256(Rng(2024).normal(1000).tobytes()).hexdigest()
    script = (
        "import hashlib; from diffmesh.numcore import Rng; "
        "print(hashlib.sha256(Rng(2024).normal(1000).tobytes()).hexdigest())"
    )
    out = subprocess.run(
        [sys.executable, "-c", script], check=True, capture_output=True, text=True
    )
    assert out.stdout.strip() == digest


def test_param_store_file_roundtrip(tmp_path):
    store = ParamStore()
    store.add("a.weight", Rng(4).normal((3, 5)))
    store.add("a.bias", np.zeros(5))
    first, second = str(tmp_path / "first.bin"), str(tmp_path / "second.bin")
    store.save(first)
    ParamStore.load(first).save(second)
    with open(first, "rb") as fh, open(second, "rb") as gh:
        assert fh.read() == gh.read()
