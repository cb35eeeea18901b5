import math

import numpy as np
import pytest

from tgaml import ContractError, ShapeError
from tgaml import autodiff as ad
from tgaml.autodiff import Adam, ParameterStore, Tensor

from gradcases import CASES, worst_error
from helpers import fd_max_rel_error


def leaf(v):
    return Tensor(np.asarray(v, dtype=float), requires_grad=True)


def test_sigmoid_at_zero():
    x = leaf([0.0])
    y = ad.sigmoid(x)
    ad.backward(ad.tsum(y))
    assert y.value[0] == 0.5 and x.grad[0] == pytest.approx(0.25)


def test_row_mean():
    x = leaf([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.mean(x, axis=0).value, [2.0, 3.0])


def test_matmul_gradient_3x4_by_4x2():
    gen = np.random.default_rng(0)
    a, b = leaf(gen.normal(size=(3, 4))), leaf(gen.normal(size=(4, 2)))
    assert fd_max_rel_error(lambda: ad.tsum(ad.matmul(a, b)), [a, b]) < 1e-6


def test_identity_and_square_gradients():
    x = leaf([3.0])
    ad.backward(ad.tsum(x))
    assert x.grad[0] == 1.0
    y = leaf([1.0, 2.0])
    ad.backward(ad.tsum(ad.mul(y, y)))
    np.testing.assert_array_equal(y.grad, [2.0, 4.0])


def test_gradients_accumulate_over_reuse():
    x = leaf([2.0])
    ad.backward(ad.tsum(ad.add(ad.mul(x, 3.0), x)))
    assert x.grad[0] == 4.0
    ad.backward(ad.tsum(x))
    assert x.grad[0] == 5.0


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        ad.backward(ad.mul(leaf([1.0, 2.0]), 2.0))


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ad.broadcast_add(leaf(np.ones((2, 3))), leaf(np.ones(4)))
    with pytest.raises(ShapeError):
        ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


@pytest.mark.parametrize("name", sorted(CASES))
def test_randomised_finite_differences(name):
    assert worst_error(name, trials=100) < 1e-4


# -- LSTM ---------------------------------------------------------------------

def _lstm_params(gen, d=3, h=2, scale=0.5):
    return (leaf(gen.normal(0, scale, (d, 4 * h))), leaf(gen.normal(0, scale, (h, 4 * h))),
            leaf(gen.normal(0, scale, 4 * h)))


def test_lstm_zero_weights_and_state():
    z = np.zeros
    h, c = ad.lstm_cell(leaf(np.ones((1, 3))), leaf(z((1, 2))), leaf(z((1, 2))),
                        leaf(z((3, 8))), leaf(z((2, 8))), leaf(z(8)))
    assert (h.value == 0).all() and (c.value == 0).all()


def test_lstm_forget_bias_one():
    b = np.zeros(8)
    b[2:4] = 1.0  # forget block
    c0 = np.array([[1.0, -2.0]])
    _, c = ad.lstm_cell(leaf(np.zeros((1, 3))), leaf(np.zeros((1, 2))), leaf(c0),
                        leaf(np.zeros((3, 8))), leaf(np.zeros((2, 8))), leaf(b))
    f = 1 / (1 + math.exp(-1))
    assert f == pytest.approx(0.7311, abs=1e-4)
    np.testing.assert_allclose(c.value, f * c0)


def test_lstm_sequence_of_three_gradient():
    gen = np.random.default_rng(1)
    wx, wh, b = _lstm_params(gen)
    xs = [leaf(gen.normal(size=(2, 3))) for _ in range(3)]

    def loss():
        h = c = Tensor(np.zeros((2, 2)))
        for x in xs:
            h, c = ad.lstm_cell(x, h, c, wx, wh, b)
        return ad.tsum(ad.mul(h, h))

    assert fd_max_rel_error(loss, [wx, wh, b, *xs]) < 1e-4


def test_fused_cell_matches_composed_reference():
    gen = np.random.default_rng(2)
    wx, wh, b = _lstm_params(gen, scale=1.0)
    x, h0, c0 = leaf(gen.normal(size=(4, 3))), leaf(gen.normal(size=(4, 2))), leaf(gen.normal(size=(4, 2)))
    args = (x, h0, c0, wx, wh, b)
    grads = []
    for cell in (ad.lstm_cell, ad.lstm_cell_reference):
        for a in args:
            a.grad = None
        h, c = cell(*args)
        ad.backward(ad.add(ad.tsum(ad.mul(h, 1.5)), ad.tsum(ad.mul(c, c))))
        grads.append(([h.value, c.value], [a.grad.copy() for a in args]))
    for u, v in zip(grads[0][0] + grads[0][1], grads[1][0] + grads[1][1]):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)


def test_masked_update_keeps_old_rows():
    new, old = leaf([[1.0], [2.0]]), leaf([[9.0], [8.0]])
    out = ad.masked_update(new, old, np.array([[1.0], [0.0]]))
    np.testing.assert_array_equal(out.value, [[1.0], [8.0]])


# -- parameters and optimiser -------------------------------------------------

def test_adam_first_step_moves_by_lr():
    store = ParameterStore([("a.w", [1.0, -1.0])])
    store["a.w"].grad = np.array([0.3, -5.0])
    Adam(store, lr=1e-3).step(["a"])
    np.testing.assert_allclose(store["a.w"].value, [1.0 - 1e-3, -1.0 + 1e-3], atol=1e-9)


def test_adam_zero_gradient_is_a_no_op():
    value, m, v = ad.adam_update(np.array([2.0]), np.zeros(1), np.zeros(1), np.zeros(1), 1, 1e-3)
    assert value[0] == 2.0


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ContractError):
        ad.adam_update(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), 1, 1e-3)


def test_adam_touches_only_requested_groups():
    store = ParameterStore([("enc.w", np.ones(3)), ("cls.w", np.ones(2))])
    for _, t in store:
        t.grad = np.ones_like(t.value)
    before = store.digest("cls")
    Adam(store).step(["enc"])
    assert store.digest("cls") == before and store.digest("enc") != before
    assert store.groups == ["enc", "cls"]
    with pytest.raises(ContractError):
        Adam(store).step(["nope"])


def test_checkpoint_roundtrip(tmp_path):
    store = ParameterStore([("a.w", np.arange(6.0).reshape(2, 3)), ("b.s", 3.5)])
    opt = Adam(store)
    store["a.w"].grad = np.ones((2, 3))
    opt.step(["a"])
    path = tmp_path / "m.ckpt"
    ad.save_checkpoint(path, {**store.state(), **opt.state()})
    back = ad.load_checkpoint(path)
    fresh = ParameterStore([("a.w", np.zeros((2, 3))), ("b.s", 0.0)])
    fresh.load_state(back)
    assert fresh.digest() == store.digest()
    opt2 = Adam(fresh)
    opt2.load_state(back)
    assert opt2.t["a.w"] == 1 and opt2.t["b.s"] == 0
    np.testing.assert_array_equal(opt2.m["a.w"], opt.m["a.w"])


def test_checkpoint_rejects_foreign_and_truncated_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(ContractError):
        ad.load_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    ad.save_checkpoint(good, {"a.w": np.ones(50)})
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ContractError):
        ad.load_checkpoint(good)


def test_load_state_checks_shapes():
    store = ParameterStore([("a.w", np.zeros(2))])
    with pytest.raises(ShapeError):
        store.load_state({"a.w": np.zeros(3)})
    with pytest.raises(ContractError):
        store.load_state({})
