"""Central-difference checks for every differentiable primitive."""

import zlib

import numpy as np
import pytest

from pitvqa import autodiff as ad
from pitvqa.autodiff import Tensor
from pitvqa.gradcheck import grad_check, numeric_grad, relative_error

TOL = 1e-4


def _rng(seed=0):
    return np.random.default_rng(seed)


def _weights(shape, seed):
    return Tensor(_rng(seed).normal(size=shape))


def test_numeric_grad_of_quadratic():
    x = np.array([1.0, -3.0, 200.0])
    g = numeric_grad(lambda v: float((v**2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-6)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-10, 0.0) == pytest.approx(1e-2)


def test_sigmoid_sum():
    assert grad_check(lambda x: ad.total(ad.sigmoid(x)), _rng(1).normal(size=(3, 4))) <= 1e-6


def test_layer_norm_sum():
    w = _weights(6, 7)

    def f(x):
        # weight the outputs: a plain sum of a normalized row is constant
        return ad.total(ad.mul(ad.layer_norm(x, ad.ones(6), ad.zeros(6)), w))

    assert grad_check(f, _rng(2).normal(size=(4, 6))) <= 1e-5


def test_linear_exact():
    w = _weights((5, 3), 3)
    assert grad_check(lambda x: ad.total(ad.matmul(x, w)), _rng(4).normal(size=(2, 5))) <= 1e-9


def _ops():
    w = _weights((5, 4), 11)
    v = _weights((3, 5), 12)
    c = _weights((3, 5), 13)
    return {
        "matmul_left": lambda x: ad.total(ad.mul(ad.gelu(ad.matmul(x, w)), ad.ones(3, 4))),
        "matmul_right": lambda x: ad.total(ad.sigmoid(ad.matmul(v, ad.reshape(x, (5, 3))))),
        "add": lambda x: ad.total(ad.sigmoid(ad.add(x, c))),
        "sub": lambda x: ad.total(ad.sigmoid(ad.sub(c, x))),
        "mul": lambda x: ad.total(ad.mul(ad.mul(x, c), x)),
        "bias_broadcast": lambda x: ad.total(ad.sigmoid(ad.add(c, ad.reduce_mean(x, 0)))),
        "softmax": lambda x: ad.total(ad.mul(ad.softmax(x, -1), c)),
        "softmax_axis0": lambda x: ad.total(ad.mul(ad.softmax(x, 0), c)),
        "sigmoid": lambda x: ad.total(ad.sigmoid(x)),
        "gelu": lambda x: ad.total(ad.gelu(x)),
        "layer_norm": lambda x: ad.total(ad.mul(ad.layer_norm(x, Tensor(np.linspace(0.5, 1.5, 5)), ad.zeros(5)), c)),
        "reduce_mean": lambda x: ad.total(ad.gelu(ad.reduce_mean(x, 1))),
        "transpose": lambda x: ad.total(ad.mul(ad.transpose(ad.sigmoid(x), (1, 0)), ad.transpose(c, (1, 0)))),
        "reshape": lambda x: ad.total(ad.gelu(ad.reshape(x, (5, 3)))),
        "scale": lambda x: ad.total(ad.gelu(ad.scale(x, -1.7))),
        "cross_entropy": lambda x: ad.cross_entropy(x, [0, 4, 2]),
        "where_mask": lambda x: ad.total(ad.mul(ad.softmax(ad.where_mask(x, np.tri(3, 5, 1, dtype=bool))), c)),
        "dropout_fixed": lambda x: ad.total(ad.gelu(ad.dropout(x, 0.3, True, np.random.default_rng(9)))),
        "batch_norm_train": lambda x: ad.total(
            ad.mul(ad.batch_norm_1d(x, Tensor(np.linspace(0.5, 1.5, 5)), ad.zeros(5), np.zeros(5), np.ones(5), True)[0], c)
        ),
        "batch_norm_eval": lambda x: ad.total(
            ad.mul(
                ad.batch_norm_1d(x, Tensor(np.linspace(0.5, 1.5, 5)), ad.zeros(5), np.full(5, 0.3), np.full(5, 2.0), False)[0],
                c,
            )
        ),
    }


@pytest.mark.parametrize("name", sorted(_ops()))
def test_primitive_at_ten_points(name):
    f = _ops()[name]
    rng = _rng(zlib.crc32(name.encode()))
    worst = max(grad_check(f, rng.normal(size=(3, 5))) for _ in range(10))
    assert worst <= TOL, f"{name}: {worst:.2e}"


def test_embedding_table_gradient():
    ids = [0, 2, 2, 3]

    def f(table):
        return ad.total(ad.gelu(ad.embedding_lookup(table, ids)))

    assert grad_check(f, _rng(8).normal(size=(4, 3))) <= TOL
