import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgaml import ConfigError, ContractError
from tgaml.autodiff import Tensor
from tgaml.losses import (
    UNIT_WEIGHTS, ConfusionWeights, SoftConfusion, cross_entropy_loss, focal_loss, make_loss,
    soft_confusion, weighted_mcc, weighted_mcc_loss,
)
from tgaml.metrics import ConfusionMatrix, scalar_metrics

from helpers import fd_max_rel_error


def counts(tp, fp, tn, fn):
    return SoftConfusion(*(Tensor(float(v)) for v in (tp, fp, tn, fn)))


def test_soft_confusion_hard_and_symmetric():
    assert soft_confusion([1.0, 0.0], [1, 0]).values() == (1, 0, 1, 0)
    assert soft_confusion([0.5, 0.5], [1, 0]).values() == (0.5, 0.5, 0.5, 0.5)


def test_soft_counts_sum_to_n():
    gen = np.random.default_rng(0)
    p = gen.random(37)
    assert sum(soft_confusion(p, gen.integers(0, 2, 37)).values()) == pytest.approx(37)


def test_length_mismatch():
    with pytest.raises(ContractError):
        soft_confusion([0.2, 0.3], [1])


@pytest.mark.parametrize("c, mcc", [((1, 0, 1, 0), 1.0), ((0, 1, 0, 1), -1.0),
                                    ((2, 1, 3, 0), 6 / math.sqrt(72))])
def test_weighted_mcc_examples(c, mcc):
    assert float(weighted_mcc(counts(*c)).value) == pytest.approx(mcc, abs=1e-9)
    assert float(weighted_mcc_loss(counts(*c)).value) == pytest.approx(1 - mcc, abs=1e-9)


def test_weighted_mcc_frozen_value():
    assert 1 - 6 / math.sqrt(72) == pytest.approx(0.29289, abs=1e-5)


def test_degenerate_confusion_is_finite():
    assert float(weighted_mcc_loss(counts(5, 0, 0, 0)).value) == pytest.approx(1.0)


def test_nonpositive_weight_is_config_error():
    with pytest.raises(ConfigError):
        ConfusionWeights(w_fp=0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=40), st.integers(0, 2**31))
def test_hard_predictions_match_classical_mcc(labels, seed):
    y = np.array(labels, dtype=int)
    p = np.random.default_rng(seed).integers(0, 2, len(y)).astype(float)
    tp, fp = int((p * y).sum()), int((p * (1 - y)).sum())
    tn, fn = int(((1 - p) * (1 - y)).sum()), int(((1 - p) * y).sum())
    classical = scalar_metrics(ConfusionMatrix(tp, fp, tn, fn)).mcc
    got = float(weighted_mcc_loss(soft_confusion(p, y), UNIT_WEIGHTS).value)
    assert got == pytest.approx(1 - classical, abs=1e-9)


def test_loss_is_permutation_invariant():
    gen = np.random.default_rng(3)
    p, y = gen.random(20), gen.integers(0, 2, 20)
    perm = gen.permutation(20)
    for name in ("mcc", "cross_entropy", "focal"):
        f = make_loss(name)
        assert float(f(Tensor(p), y).value) == pytest.approx(float(f(Tensor(p[perm]), y[perm]).value), abs=1e-12)


def test_cross_entropy_examples():
    assert float(cross_entropy_loss(np.array([1 - 1e-12]), [1]).value) == pytest.approx(0, abs=1e-9)
    assert float(cross_entropy_loss(np.array([0.5, 0.5]), [1, 0]).value) == pytest.approx(math.log(2))
    single = float(cross_entropy_loss(np.array([0.3]), [1]).value)
    assert float(cross_entropy_loss(np.array([0.3]), [1], (1.0, 2.0)).value) == pytest.approx(2 * single)


def test_focal_examples():
    half = float(focal_loss(np.array([0.5]), [1], 0.25, 2.0).value)
    assert half == pytest.approx(0.25 * 0.25 * math.log(2)) and half == pytest.approx(0.04332, abs=1e-5)
    for gamma in (0.0, 2.0, 5.0):
        assert float(focal_loss(np.array([1 - 1e-12]), [1], 0.25, gamma).value) < 1e-9
    p = np.array([0.2, 0.7, 0.9])
    y = [1, 0, 1]
    assert float(focal_loss(p, y, 0.4, 0.0).value) == pytest.approx(0.4 * float(cross_entropy_loss(p, y).value))


@pytest.mark.parametrize("alpha, gamma", [(0.0, 2.0), (1.0, 2.0), (0.5, -1.0)])
def test_focal_rejects_bad_parameters(alpha, gamma):
    with pytest.raises(ConfigError):
        make_loss("focal", alpha=alpha, gamma=gamma)


def test_unknown_loss_name():
    with pytest.raises(ConfigError):
        make_loss("hinge")


@pytest.mark.parametrize("name", ["mcc", "cross_entropy", "focal"])
def test_losses_pass_gradient_check(name):
    gen = np.random.default_rng(7)
    p = Tensor(gen.uniform(0.05, 0.95, 12), requires_grad=True)
    y = gen.integers(0, 2, 12)
    y[:2] = [0, 1]
    f = make_loss(name, weights=ConfusionWeights(1.0, 3.0, 1.5, 2.0))
    assert fd_max_rel_error(lambda: f(p, y), [p]) < 1e-6
