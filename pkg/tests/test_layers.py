import zlib

import numpy as np
import pytest

from oracles import naive_conv, naive_deconv
from thumbnet.errors import GeometryError, ShapeError, UsageError
from thumbnet.layers import (
    LayerParams,
    LayerSpec,
    apply_layer,
    avgpool2d,
    batchnorm,
    conv,
    conv2d,
    deconv2d,
    global_avgpool,
    init_params,
    linear,
    log_softmax,
    maxpool2d,
    output_shape,
    relu,
    softmax,
)
from thumbnet.model import resnet_mini, vgg_mini
from thumbnet.tensor import Tensor, grad, grad_check, precision


def T64(a, requires_grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


def test_conv_ones_gives_nine(f64):
    out = conv2d(T64(np.ones((1, 1, 3, 3))), T64(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.item() == 9.0


def test_conv_identity_kernel(f64):
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(conv2d(T64(x), T64(w)).data, x)


def test_conv_matches_naive_on_2x3x8x8(f64):
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    assert np.allclose(conv2d(T64(x), T64(w), T64(b), 1, 1).data, naive_conv(x, w, b, 1, 1), atol=1e-6)


def test_conv_errors():
    with pytest.raises(ShapeError, match="channels"):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(GeometryError):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_deconv_single_pixel(f64):
    out = deconv2d(T64(np.full((1, 1, 1, 1), 2.5)), T64(np.ones((1, 1, 2, 2))), stride=2)
    assert out.shape == (1, 1, 2, 2) and np.all(out.data == 2.5)


def test_deconv_identity(f64):
    x = np.random.default_rng(2).normal(size=(2, 3, 4, 4))
    assert np.allclose(deconv2d(T64(x), T64(np.eye(3).reshape(3, 3, 1, 1))).data, x)


def test_deconv_is_adjoint_of_conv(f64):
    rng = np.random.default_rng(3)
    for stride, pad, k, size in [(2, 1, 4, 8), (1, 1, 3, 6), (2, 0, 3, 7)]:
        x = T64(rng.normal(size=(2, 3, size, size)), requires_grad=True)
        w = rng.normal(size=(5, 3, k, k))
        y = conv2d(x, T64(w), stride=stride, padding=pad)
        g = rng.normal(size=y.shape)
        (dx,) = grad((y * T64(g)).sum(), [x])
        out = deconv2d(T64(g), T64(w), stride=stride, padding=pad).data
        # the transposed output may be short of the input extent when stride does not divide evenly
        assert np.allclose(out, dx[:, :, : out.shape[2], : out.shape[3]], atol=1e-6)


def _random_conv_case(rng):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    o = int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, k))
    h = int(rng.integers(max(1, k - 2 * p), 7))
    w = int(rng.integers(max(1, k - 2 * p), 7))
    return n, c, o, k, s, p, h, w


def test_conv_and_deconv_random_shapes_against_naive(f64):
    rng = np.random.default_rng(42)
    cases = 0
    while cases < 60:
        n, c, o, k, s, p, h, w = _random_conv_case(rng)
        if (h + 2 * p - k) // s + 1 < 1 or (w + 2 * p - k) // s + 1 < 1:
            continue
        x, wt, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
        assert np.allclose(conv2d(T64(x), T64(wt), T64(b), s, p).data, naive_conv(x, wt, b, s, p), atol=1e-6)
        if min(h, w) - 1 >= 0 and (min(h, w) - 1) * s - 2 * p + k >= 1:
            wd = rng.normal(size=(c, o, k, k))
            got = deconv2d(T64(x), T64(wd), T64(b), s, p).data
            assert np.allclose(got, naive_deconv(x, wd, b, s, p), atol=1e-6)
        cases += 1


def _bn_params(c, gamma=None, beta=None):
    p = LayerParams()
    p.gamma = T64(np.ones(c) if gamma is None else gamma, requires_grad=True)
    p.beta = T64(np.zeros(c) if beta is None else beta, requires_grad=True)
    p.running_mean = np.zeros(c)
    p.running_var = np.ones(c)
    return p


def test_batchnorm_constant_channels_give_zero(f64):
    x = np.ones((4, 2, 3, 3)) * np.array([3.0, -1.0])[None, :, None, None]
    assert np.allclose(batchnorm(T64(x), _bn_params(2), "train").data, 0.0)


def test_batchnorm_standardizes(f64):
    rng = np.random.default_rng(5)
    z = rng.normal(size=(8, 1, 4, 4))
    z = (z - z.mean()) / z.std()
    out = batchnorm(T64(z + 2.0), _bn_params(1), "train", eps=0.0).data
    assert abs(out.mean()) < 1e-12 and abs(out.var() - 1.0) < 1e-12


def test_batchnorm_eval_affine(f64):
    x = np.random.default_rng(6).normal(size=(2, 3, 2, 2))
    out = batchnorm(T64(x), _bn_params(3, gamma=np.full(3, 2.0), beta=np.ones(3)), "eval", eps=0.0).data
    assert np.allclose(out, 2 * x + 1)


def test_batchnorm_running_stats_and_errors(f64):
    p = _bn_params(1)
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    batchnorm(T64(x), p, "train", momentum=0.9)
    assert np.isclose(p.running_mean[0], 0.1 * x.mean())
    assert np.isclose(p.running_var[0], 0.9 + 0.1 * x.var())
    with pytest.raises(UsageError):
        batchnorm(T64(np.ones((1, 1, 1, 1))), p, "train")


def test_relu_maxpool_softmax_examples():
    assert np.array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2).item() == 4.0
    assert np.allclose(softmax(Tensor(np.zeros((2, 7)))).data, 1 / 7)


def test_softmax_rows_sum_to_one_and_shift_invariant(f64):
    z = np.random.default_rng(7).normal(size=(5, 6)) * 30
    s = softmax(T64(z)).data
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(softmax(T64(z + 123.0)).data, s, atol=1e-12)
    assert np.allclose(np.exp(log_softmax(T64(z)).data), s)


def test_maxpool_ties_route_to_first(f64):
    x = T64(np.ones((1, 1, 2, 2)), requires_grad=True)
    (g,) = grad(maxpool2d(x, 2, 2).sum(), [x])
    assert np.array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_padding_uses_minus_infinity():
    x = Tensor(-np.ones((1, 1, 2, 2)))
    assert np.all(maxpool2d(x, 3, 2, padding=1).data == -1.0)


def test_global_avgpool_and_linear(f64):
    x = np.random.default_rng(8).normal(size=(2, 3, 4, 4))
    assert np.allclose(global_avgpool(T64(x)).data[..., 0, 0], x.mean(axis=(2, 3)))
    w, b = np.ones((2, 3)), np.array([1.0, -1.0])
    assert np.allclose(linear(T64(np.eye(3)), T64(w), T64(b)).data, np.array([[2.0, 0.0]] * 3))


def test_layerspec_validation_and_geometry():
    with pytest.raises(UsageError):
        LayerSpec("conv", 0, 3)
    with pytest.raises(UsageError):
        LayerSpec("maxpool", kernel=0)
    with pytest.raises(UsageError):
        LayerSpec("dropout")
    assert output_shape(conv(3, 8, 3, 2, 1), (3, 32, 32)) == (8, 16, 16)
    assert output_shape(LayerSpec("deconv", 8, 8, 4, 2, 1), (8, 8, 8)) == (8, 16, 16)
    with pytest.raises(ShapeError):
        output_shape(conv(4, 8), (3, 32, 32))


@pytest.mark.parametrize("builder", [resnet_mini, vgg_mini])
def test_shape_inference_matches_execution(builder):
    g = builder()
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 32, 32)))
    for i, expected in enumerate(g.shapes()):
        x = g.forward(x, "train", i, i + 1)
        assert tuple(x.shape[1:]) == tuple(expected)


# -- gradient checks: 10 random points per layer, double precision -------------------
def _layer_cases():
    rng = np.random.default_rng(11)
    R4 = rng.normal(size=(2, 3, 5, 5))

    def conv_x(x):
        return (conv2d(x, T64(W), T64(B), 2, 1) * T64(Rc)).sum()

    W = rng.normal(size=(3, 2, 3, 3))
    B = rng.normal(size=3)
    Rc = rng.normal(size=(2, 3, 3, 3))
    Wd = rng.normal(size=(2, 3, 4, 4))
    Rd = rng.normal(size=(2, 3, 10, 10))
    Rm = rng.normal(size=(2, 2, 2, 2))
    Wf = rng.normal(size=(4, 6))
    Rf = rng.normal(size=(3, 4))
    Rs = rng.normal(size=(3, 6))

    def bn_train(x):
        return (batchnorm(x, _bn_params(3, rng_gamma, rng_beta), "train") * T64(R4)).sum()

    rng_gamma, rng_beta = rng.normal(size=3), rng.normal(size=3)
    return {
        "conv_input": (conv_x, (2, 2, 5, 5)),
        "conv_weight": (lambda w: (conv2d(T64(Xc), w, None, 1, 1) * T64(Rw)).sum(), (3, 2, 3, 3)),
        "conv_bias": (lambda b: (conv2d(T64(Xc), T64(W), b, 2, 1) * T64(Rc)).sum(), (3,)),
        "deconv_input": (lambda x: (deconv2d(x, T64(Wd), None, 2, 1) * T64(Rd)).sum(), (2, 2, 5, 5)),
        "deconv_weight": (lambda w: (deconv2d(T64(Xc), w, None, 2, 1) * T64(Rd)).sum(), (2, 3, 4, 4)),
        "batchnorm_train": (bn_train, (2, 3, 5, 5)),
        "batchnorm_gamma": (lambda g: (batchnorm(T64(R4 * 2 + 1), _bn_gamma(g), "train") * T64(R4)).sum(), (3,)),
        "batchnorm_eval": (lambda x: (batchnorm(x, _bn_params(3, rng_gamma, rng_beta), "eval") * T64(R4)).sum(), (2, 3, 5, 5)),
        "relu": (lambda x: (relu(x) * T64(R4)).sum(), (2, 3, 5, 5)),
        "maxpool": (lambda x: (maxpool2d(x, 2, 2) * T64(Rm)).sum(), (2, 2, 4, 4)),
        "maxpool_padded": (lambda x: (maxpool2d(x, 3, 2, 1) * T64(Rm)).sum(), (2, 2, 4, 4)),
        "avgpool": (lambda x: (avgpool2d(x, 2, 2) * T64(Rm)).sum(), (2, 2, 4, 4)),
        "globalavgpool": (lambda x: (global_avgpool(x) ** 2).sum(), (2, 3, 3, 3)),
        "fullyconnected": (lambda x: (linear(x, T64(Wf), T64(np.ones(4))) * T64(Rf)).sum(), (3, 6)),
        "fullyconnected_weight": (lambda w: (linear(T64(Rs), w) * T64(Rf)).sum(), (4, 6)),
        "softmax": (lambda x: (softmax(x) * T64(Rs)).sum(), (3, 6)),
        "log_softmax": (lambda x: (log_softmax(x) * T64(Rs)).sum(), (3, 6)),
    }


Xc = np.random.default_rng(12).normal(size=(2, 2, 5, 5))
Rw = np.random.default_rng(13).normal(size=(2, 3, 5, 5))


def _bn_gamma(g):
    p = _bn_params(3)
    p.gamma = g
    return p


LAYER_CASES = _layer_cases()


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_grad_check(name):
    f, shape = LAYER_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    with precision("f64"):
        for _ in range(10):
            assert grad_check(f, _sample(rng, shape, name in KINKED)) < 1e-4


# piecewise-linear layers: keep values well apart from each other and from zero so
# no finite-difference probe straddles a kink
KINKED = {"relu", "maxpool", "maxpool_padded"}


def _sample(rng, shape, kinked):
    if not kinked:
        return rng.normal(size=shape)
    n = int(np.prod(shape))
    values = (np.arange(n) - n / 2 + 0.5) * 0.05 + rng.uniform(-0.01, 0.01, size=n)
    return rng.permutation(values).reshape(shape)


def test_init_params_shapes_and_scale():
    rng = np.random.default_rng(0)
    p = init_params(conv(16, 32, 3), rng)
    assert p.weight.shape == (32, 16, 3, 3) and p.bias is None
    assert abs(p.weight.data.std() - np.sqrt(2 / 144)) < 0.01
    q = init_params(LayerSpec("batchnorm", 4, 4), rng)
    assert np.all(q.running_var > 0) and np.all(q.gamma.data == 1)


def test_apply_layer_checks_channels():
    p = init_params(conv(3, 4), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        apply_layer(conv(3, 4), Tensor(np.ones((1, 2, 4, 4))), p)


def test_flatten_grad_check():
    r = np.random.default_rng(20).normal(size=(2, 12))
    f = lambda x: (apply_layer(LayerSpec("flatten"), x, None) * T64(r)).sum()  # noqa: E731
    rng = np.random.default_rng(21)
    for _ in range(10):
        assert grad_check(f, rng.normal(size=(2, 3, 2, 2))) < 1e-4


@pytest.mark.parametrize("stride", [1, 2])
def test_residual_block_grad_check(stride):
    from thumbnet.model import NetworkGraph, basic_block

    with precision("f64"):
        g = NetworkGraph("block", [basic_block(2, 3, stride)], (2, 6, 6), seed=4)
        r = np.random.default_rng(22).normal(size=(2, *g.output_shape()))
    f = lambda x: (g.forward(x, "train") * T64(r)).sum()  # noqa: E731
    rng = np.random.default_rng(23 + stride)
    for _ in range(10):
        # the inner relu sees batch-normalized values; a short probe keeps clear of its kink
        assert grad_check(f, rng.normal(size=(2, 2, 6, 6)), step=1e-5) < 1e-4
