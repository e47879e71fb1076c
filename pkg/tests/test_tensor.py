import numpy as np
import pytest

from helpers import check_op, op_cases
from shdeconv import tensor as tn
from shdeconv.tensor import Adam, AdamState, Tensor, adam_step, load_checkpoint, save_checkpoint


@pytest.mark.parametrize("seed", range(3))
def test_every_op_gradient(seed):
    for name, fn, arrays in op_cases(seed):
        err = check_op(fn, arrays, seed=seed)
        assert err < 1e-4, f"{name}: relative error {err:.2e}"


def test_relu_softplus_values():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    tn.sum_(tn.relu(x)).backward()
    assert np.array_equal(tn.relu(x).data, [0.0, 2.0]) and np.array_equal(x.grad, [0.0, 1.0])
    z = Tensor(np.array([0.0]), requires_grad=True)
    y = tn.softplus(z)
    y.backward(np.ones(1))
    assert y.data[0] == pytest.approx(np.log(2)) and z.grad[0] == pytest.approx(0.5)


def test_backward_basics():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    tn.sum_(x).backward()
    assert np.array_equal(x.grad, np.ones(3))
    x.zero_grad()
    tn.sum_(x * x).backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_fan_out_accumulates():
    x = Tensor(np.array([1.5, 2.0]), requires_grad=True)
    y = x * 2.0 + x * 3.0
    tn.sum_(y).backward()
    assert np.allclose(x.grad, 5.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_shape_errors():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ValueError):
        tn.permute(Tensor(np.ones((2, 3))), (0, 0))
    with pytest.raises(ValueError):
        tn.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


def test_cycle_detected():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 2.0
    x._parents = (y,)
    x._backward = lambda g: (g,)
    with pytest.raises(RuntimeError):
        tn.sum_(y).backward()


def test_batchnorm_permutation_commutes():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 4, 4, 4, 6))
    g, b = Tensor(rng.random(3) + 0.5), Tensor(rng.standard_normal(3))
    out = tn.batchnorm(Tensor(x), g, b, np.zeros(3), np.ones(3)).data
    perm_s = rng.permutation(4)
    perm_v = rng.permutation(6)
    xp = x[:, :, perm_s][..., perm_v]
    outp = tn.batchnorm(Tensor(xp), g, b, np.zeros(3), np.ones(3)).data
    assert np.abs(outp - out[:, :, perm_s][..., perm_v]).max() < 1e-12


def test_batchnorm_running_stats():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 2, 10)) * 3 + 1
    rm, rv = np.zeros(2), np.ones(2)
    tn.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, momentum=1.0)
    axes = (0, 2)
    assert np.allclose(rm, x.mean(axis=axes))
    assert np.allclose(rv, x.var(axis=axes, ddof=1))
    ev = tn.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False).data
    assert np.allclose(ev, (x - rm[None, :, None]) / np.sqrt(rv[None, :, None] + 1e-5))


def test_adam_closed_form_first_step():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    st = AdamState()
    q = p.copy()
    adam_step([q], [g], st, lr=0.1)
    # bias-corrected first step: m_hat = g, v_hat = g^2
    assert np.allclose(q, p - 0.1 * g / (np.abs(g) + 1e-8))


def test_adam_zero_and_constant_gradient():
    p = np.array([1.0, 2.0])
    st = AdamState()
    adam_step([p], [np.zeros(2)], st, lr=0.1)
    assert np.array_equal(p, [1.0, 2.0])
    st = AdamState()
    q = np.zeros(2)
    for _ in range(2000):
        before = q.copy()
        adam_step([q], [np.array([2.0, -0.01])], st, lr=0.01)
    assert np.allclose(q - before, [-0.01, 0.01], rtol=1e-3)


def test_adam_refuses_nan():
    p = np.ones(2)
    with pytest.raises(FloatingPointError):
        adam_step([p], [np.array([np.nan, 1.0])], AdamState(), lr=0.1)
    assert np.array_equal(p, np.ones(2))


def test_adam_optimizer_wrapper():
    w = Tensor(np.array([3.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        tn.sum_(tn.square(w - 1.0)).backward()
        opt.step()
    assert abs(w.data[0] - 1.0) < 1e-2


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b.c": np.float32(rng.standard_normal(5)),
               "scalar": np.array(1.5, dtype=np.float32)}
    save_checkpoint(tmp_path / "ck", tensors, {"kind": "x", "n": 3})
    cfg, back = load_checkpoint(tmp_path / "ck")
    assert cfg["kind"] == "x" and cfg["n"] == 3
    for k, v in tensors.items():
        assert back[k].tobytes() == np.asarray(v, dtype=np.float32).tobytes()
    assert (tmp_path / "ck").read_bytes()[:4] == b"SHDW"
    (tmp_path / "bad").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
