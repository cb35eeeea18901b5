"""Randomised finite-difference cases for every differentiable primitive.

Each case draws fresh inputs and returns ``(loss_fn, params)`` where the loss is
the op's output contracted with a fixed random weight tensor, so every output
entry contributes a distinct gradient.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.sparse as sp

from tgaml import autodiff as ad
from tgaml.autodiff import Tensor
from tgaml.losses import make_loss
from tgaml.model import GraphInputs, Model, ModelConfig

from helpers import fd_max_rel_error, make_graph


def _leaf(gen, *shape, lo=-2.0, hi=2.0, away=0.0):
    v = gen.uniform(lo, hi, size=shape)
    if away:
        v = np.where(np.abs(v) < away, np.sign(v + 1e-300) * away + v, v)
    return Tensor(v, requires_grad=True)


def _contract(out: Tensor, gen) -> Callable[[Tensor], Tensor]:
    w = gen.normal(size=out.shape)
    return lambda o: ad.tsum(ad.mul(o, w))


def _case(gen, build, *params):
    weight = _contract(build(*params), gen)
    return (lambda: weight(build(*params))), list(params)


def _dims(gen, k=2):
    return [int(d) for d in gen.integers(1, 4, size=k)]


def case_add(gen):
    r, c = _dims(gen)
    return _case(gen, ad.add, _leaf(gen, r, c), _leaf(gen, 1, c))


def case_broadcast_add(gen):
    r, c = _dims(gen)
    return _case(gen, ad.broadcast_add, _leaf(gen, r, c), _leaf(gen, c))


def case_sub(gen):
    r, c = _dims(gen)
    return _case(gen, ad.sub, _leaf(gen, r, c), _leaf(gen, r, 1))


def case_neg(gen):
    return _case(gen, ad.neg, _leaf(gen, *_dims(gen)))


def case_mul(gen):
    r, c = _dims(gen)
    return _case(gen, ad.mul, _leaf(gen, r, c), _leaf(gen, r, c))


def case_div(gen):
    r, c = _dims(gen)
    return _case(gen, ad.div, _leaf(gen, r, c), _leaf(gen, r, c, lo=0.5, hi=2.0))


def case_power(gen):
    k = float(gen.choice([2.0, 3.0, 0.5, -1.0]))
    return _case(gen, lambda a: ad.power(a, k), _leaf(gen, *_dims(gen), lo=0.3, hi=2.0))


def case_sqrt(gen):
    return _case(gen, ad.sqrt, _leaf(gen, *_dims(gen), lo=0.2, hi=3.0))


def case_log(gen):
    return _case(gen, ad.log, _leaf(gen, *_dims(gen), lo=0.2, hi=3.0))


def case_exp(gen):
    return _case(gen, ad.exp, _leaf(gen, *_dims(gen)))


def case_clip(gen):
    return _case(gen, lambda a: ad.clip(a, -1.0, 1.0), _leaf(gen, *_dims(gen), away=0.01))


def case_sigmoid(gen):
    return _case(gen, ad.sigmoid, _leaf(gen, *_dims(gen), lo=-6, hi=6))


def case_tanh(gen):
    return _case(gen, ad.tanh, _leaf(gen, *_dims(gen)))


def case_relu(gen):
    return _case(gen, ad.relu, _leaf(gen, *_dims(gen), away=0.01))


def case_matmul(gen):
    a, b, c = _dims(gen, 3)
    return _case(gen, ad.matmul, _leaf(gen, a, b), _leaf(gen, b, c))


def case_spmm(gen):
    a, b, c = _dims(gen, 3)
    m = sp.random(a, b, density=0.6, random_state=np.random.RandomState(int(gen.integers(2**31))))
    return _case(gen, lambda x: ad.spmm(m, x), _leaf(gen, b, c))


def case_concat(gen):
    r, c1, c2 = _dims(gen, 3)
    return _case(gen, lambda a, b: ad.concat([a, b], axis=1), _leaf(gen, r, c1), _leaf(gen, r, c2))


def case_concat_rows(gen):
    r1, r2, c = _dims(gen, 3)
    return _case(gen, lambda a, b: ad.concat([a, b], axis=0), _leaf(gen, r1, c), _leaf(gen, r2, c))


def case_slice(gen):
    r, c = _dims(gen)
    return _case(gen, lambda a: a[:, : max(1, c - 1)], _leaf(gen, r + 1, c))


def case_gather(gen):
    r, c = _dims(gen)
    idx = gen.integers(0, r, size=r + 2)  # repeats exercise accumulation
    return _case(gen, lambda a: ad.getitem(a, idx), _leaf(gen, r, c))


def case_reshape(gen):
    r, c = _dims(gen)
    return _case(gen, lambda a: ad.reshape(a, (c, r)), _leaf(gen, r, c))


def case_sum(gen):
    axis = [None, 0, 1][int(gen.integers(3))]
    return _case(gen, lambda a: ad.tsum(a, axis), _leaf(gen, *_dims(gen)))


def case_mean(gen):
    axis = [None, 0, 1][int(gen.integers(3))]
    return _case(gen, lambda a: ad.mean(a, axis), _leaf(gen, *_dims(gen)))


def case_lstm_cell(gen):
    b, d, h = _dims(gen, 3)
    x, hp, cp = _leaf(gen, b, d), _leaf(gen, b, h, lo=-1, hi=1), _leaf(gen, b, h)
    wx, wh, bias = _leaf(gen, d, 4 * h, lo=-1, hi=1), _leaf(gen, h, 4 * h, lo=-1, hi=1), _leaf(gen, 4 * h)
    return _case(gen, lambda *a: ad.concat(list(ad.lstm_cell(*a)), axis=1), x, hp, cp, wx, wh, bias)


def case_masked_update(gen):
    r, c = _dims(gen)
    mask = gen.integers(0, 2, size=(r, 1)).astype(float)
    return _case(gen, lambda a, b: ad.masked_update(a, b, mask), _leaf(gen, r, c), _leaf(gen, r, c))


CASES = {name[5:]: fn for name, fn in sorted(globals().items()) if name.startswith("case_")}


def worst_error(name: str, trials: int, seed: int = 0) -> float:
    gen = np.random.default_rng([seed, sorted(CASES).index(name)])
    worst = 0.0
    for _ in range(trials):
        loss, params = CASES[name](gen)
        worst = max(worst, fd_max_rel_error(loss, params))
    return worst


def end_to_end_error(seed: int = 0) -> float:
    """Worst finite-difference error of the MCC loss over every model parameter on a 6-node graph."""
    edges = [(0, 1, 0), (1, 2, 0), (2, 0, 1), (3, 1, 1), (1, 3, 2), (0, 1, 2), (2, 2, 3), (0, 3, 4),
             (1, 0, 4), (4, 5, 3), (5, 4, 3)]
    g = make_graph(6, edges, labels=[1, 0, 0, 1, 0, 1], total_steps=5)
    gen = np.random.default_rng(seed)
    x, e = gen.normal(size=(6, 2)), gen.normal(size=(len(edges), 2))
    config = ModelConfig(num_node_encoder_layers=2, encoder_channels=3, lstm_units_per_layer=(2, 3),
                         classifier_hidden=(4,), max_sequence_length=3)
    model = Model.create(config, 2, 2, seed)
    for _, p in model.params:
        p.value = 1.5 * p.value + gen.normal(0, 0.1, p.shape)
    inputs = GraphInputs.build(g, (x, e), config.max_sequence_length)
    loss = make_loss("mcc")
    return fd_max_rel_error(lambda: loss(model.forward(inputs), g.labels), [p for _, p in model.params])
