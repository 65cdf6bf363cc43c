import math
import zlib

import numpy as np
import pytest

from oracles import softmax_list
from thumbnet.errors import GeometryError, ShapeError, UsageError
from thumbnet.losses import Hyperparams, cl_loss, fm_loss, kd_loss, l2_reg, mm_loss
from thumbnet.model import build_decoder
from thumbnet.tensor import Tensor, grad_check, precision


def T64(a, requires_grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


# -- loop oracles -------------------------------------------------------------------
def mm_oracle(x, y, lam):
    total = 0.0
    for n in range(x.shape[0]):
        acc = 0.0
        for c in range(3):
            a, b = x[n, c].ravel().tolist(), y[n, c].ravel().tolist()
            ma, mb = sum(a) / len(a), sum(b) / len(b)
            sa = math.sqrt(sum((v - ma) ** 2 for v in a) / len(a))
            sb = math.sqrt(sum((v - mb) ** 2 for v in b) / len(b))
            acc += (ma - mb) ** 2 / 3 + lam * (sa - sb) ** 2 / 3
        total += acc
    return total / x.shape[0]


def kd_oracle(s, t, tau):
    total = 0.0
    for row_s, row_t in zip(s.tolist(), t.tolist()):
        p_t = softmax_list([v / tau for v in row_t])
        p_s = softmax_list([v / tau for v in row_s])
        total += -sum(a * math.log(b) for a, b in zip(p_t, p_s))
    return total / len(s)


def entropy(p):
    return -sum(v * math.log(v) for v in p if v > 0)


# -- examples ---------------------------------------------------------------------
def test_mm_examples(f64):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3, 6, 6))
    assert mm_loss(T64(x), T64(x)).item() == pytest.approx(0.0, abs=1e-15)
    y = x.copy()
    y[:, 0] += 0.1
    assert mm_loss(T64(x), T64(y)).item() == pytest.approx(0.01 / 3, rel=1e-9)
    mean = x.mean(axis=(2, 3), keepdims=True)
    sd = x.std(axis=(2, 3), keepdims=True)
    z = mean + (x - mean) * (sd + 0.3) / sd
    assert mm_loss(T64(x), T64(z), lambda_mm=0.1).item() == pytest.approx(0.009, rel=1e-9)


def test_mm_matches_loop_oracle(f64):
    rng = np.random.default_rng(1)
    for _ in range(5):
        x, y = rng.normal(size=(3, 3, 5, 4)), rng.normal(1.0, 2.0, size=(3, 3, 5, 4))
        assert mm_loss(T64(x), T64(y), 0.37).item() == pytest.approx(mm_oracle(x, y, 0.37), rel=1e-10)


def test_mm_errors():
    with pytest.raises(UsageError):
        mm_loss(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))
    with pytest.raises(UsageError):
        mm_loss(Tensor(np.ones((2, 3, 4, 4))), Tensor(np.ones((1, 3, 2, 2))))


def test_mm_ignores_pixel_order(f64):
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(2, 3, 3, 3))
    perm = rng.permutation(9)
    shuffled = y.reshape(2, 3, 9)[:, :, perm].reshape(2, 3, 3, 3)
    assert mm_loss(T64(x), T64(shuffled)).item() == pytest.approx(mm_loss(T64(x), T64(y)).item(), rel=1e-12)


def test_cl_examples(f64):
    assert cl_loss(T64(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(math.log(10), rel=1e-12)
    confident = np.zeros((2, 5))
    confident[[0, 1], [3, 1]] = 1000.0
    assert cl_loss(T64(confident), [3, 1]).item() == pytest.approx(0.0, abs=1e-12)
    assert cl_loss(T64([[2.0, 0.0]]), [0]).item() == pytest.approx(0.126928, abs=1e-6)
    assert cl_loss(T64([[2.0, 0.0]]), [0]).item() == pytest.approx(-math.log(math.e**2 / (math.e**2 + 1)), rel=1e-12)


def test_cl_errors_and_shift_invariance(f64):
    with pytest.raises(UsageError):
        cl_loss(T64(np.zeros((1, 3))), [3])
    with pytest.raises(ShapeError):
        cl_loss(T64(np.zeros((2, 3))), [0])
    z = np.random.default_rng(3).normal(size=(4, 6))
    shift = np.random.default_rng(4).normal(size=(4, 1)) * 50
    labels = [0, 5, 2, 2]
    assert cl_loss(T64(z + shift), labels).item() == pytest.approx(cl_loss(T64(z), labels).item(), rel=1e-10)


def test_kd_examples(f64):
    val = kd_loss(T64([[0.0, 2.0]]), T64([[2.0, 0.0]]), tau=2.0).item()
    # p_t = (0.731059, 0.268941), p_s reversed; -(p ln q + q ln p) with p = 1/(1+e^-1)
    p = 1 / (1 + math.exp(-1))
    assert val == pytest.approx(-(p * math.log(1 - p) + (1 - p) * math.log(p)), rel=1e-12)
    assert val == pytest.approx(1.0443202661, abs=1e-9)
    t = np.random.default_rng(5).normal(size=(1, 7))
    same = kd_loss(T64(t), T64(t), tau=3.0).item()
    assert same == pytest.approx(entropy(softmax_list((t[0] / 3.0).tolist())), rel=1e-10)
    s = np.random.default_rng(6).normal(size=(2, 7))
    assert kd_loss(T64(s), T64(t.repeat(2, 0)), tau=1e8).item() == pytest.approx(math.log(7), rel=1e-6)


def test_kd_matches_loop_oracle_and_gibbs(f64):
    rng = np.random.default_rng(7)
    for _ in range(20):
        s, t = rng.normal(size=(3, 5)) * 3, rng.normal(size=(3, 5)) * 3
        tau = float(rng.uniform(1, 5))
        got = kd_loss(T64(s), T64(t), tau).item()
        assert got == pytest.approx(kd_oracle(s, t, tau), rel=1e-10)
        floor = sum(entropy(softmax_list((row / tau).tolist())) for row in t) / 3
        assert got > floor


def test_kd_teacher_gets_no_gradient(f64):
    s, t = T64(np.ones((2, 3)), True), T64(np.arange(6.0).reshape(2, 3), True)
    kd_loss(s, t).backward()
    assert s.grad is not None and t.grad is None


def test_kd_errors():
    with pytest.raises(UsageError):
        kd_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_fm_examples(f64):
    t = np.random.default_rng(8).normal(size=(2, 4, 3, 3))
    assert fm_loss(T64(t), T64(t)).item() == 0.0
    assert fm_loss(T64(np.zeros((2, 4, 3, 3))), T64(np.ones((2, 4, 3, 3)))).item() == pytest.approx(0.5)
    s = t + 0.3
    one = fm_loss(T64(t), T64(s)).item()
    assert fm_loss(T64(t), T64(t + 0.6)).item() == pytest.approx(4 * one, rel=1e-12)


def test_fm_decoder_shape_errors():
    dec = build_decoder((4, 4, 4), (4, 8, 8))
    with pytest.raises(GeometryError, match="decoder depth"):
        fm_loss(Tensor(np.zeros((1, 4, 16, 16))), Tensor(np.zeros((1, 4, 4, 4))), dec)
    out = fm_loss(Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((1, 4, 4, 4))), dec)
    assert out.shape in ((), (1,))


def test_l2_examples(f64):
    assert l2_reg([]).item() == 0.0
    assert l2_reg([T64([3.0, 4.0])]).item() == 25.0
    ws = [T64(np.random.default_rng(i).normal(size=(3, 2))) for i in range(3)]
    assert l2_reg([w * 2 for w in ws]).item() == pytest.approx(4 * l2_reg(ws).item(), rel=1e-12)


def test_hyperparam_validation():
    with pytest.raises(UsageError):
        Hyperparams(tau=0.5)
    with pytest.raises(UsageError):
        Hyperparams(beta=-1)
    with pytest.raises(UsageError):
        Hyperparams(finetune_lr_factor=0.0)


# -- gradient checks ------------------------------------------------------------------
_rng = np.random.default_rng(9)
_X = _rng.normal(size=(2, 3, 4, 4))
_T = _rng.normal(size=(3, 5))
_F = _rng.normal(size=(2, 2, 4, 4))
_DEC = None


def _fm_with_decoder(s):
    global _DEC
    if _DEC is None:
        with precision("f64"):
            _DEC = build_decoder((2, 2, 2), (2, 4, 4), seed=5)
    return fm_loss(T64(_F), s, _DEC)


LOSS_CASES = {
    "mm": (lambda y: mm_loss(T64(_X), y, 0.5), (2, 3, 2, 2)),
    "cl": (lambda z: cl_loss(z, [1, 4, 0]), (3, 5)),
    "kd": (lambda z: kd_loss(z, T64(_T), 2.5), (3, 5)),
    "fm": (lambda s: fm_loss(T64(_F), s), (2, 2, 4, 4)),
    "fm_decoder": (_fm_with_decoder, (2, 2, 2, 2)),
    "l2": (lambda w: l2_reg([w, w * 0.5]), (4, 3)),
}


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_loss_grad_check(name):
    f, shape = LOSS_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        assert grad_check(f, rng.normal(size=shape)) < 1e-4
