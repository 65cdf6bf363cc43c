"""Network graphs and the four ThumbNet networks.

A :class:`NetworkGraph` is an ordered list of :class:`LayerSpec` with the
parameters of every layer keyed by a dotted path (``"4"`` for a top-level
layer, ``"4.body.1"`` inside a residual block). ``split_index`` marks the
feature-mapping tap: layers before it form the left segment.
"""

from __future__ import annotations

import hashlib
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ShapeError, UsageError
from .layers import (
    BN_EPS,
    BN_MOMENTUM,
    LayerSpec,
    apply_layer,
    avgpool2d,
    bn,
    conv,
    deconv,
    fc,
    init_params,
    output_shape,
    simple,
)
from .tensor import Tensor, default_dtype, no_grad

SEGMENTS = ("all", "left", "right")

_build = threading.local()


@contextmanager
def shapes_only():
    """Build graphs without allocating parameters (for static analysis of large nets)."""
    prev = getattr(_build, "skip_init", False)
    _build.skip_init = True
    try:
        yield
    finally:
        _build.skip_init = prev


class NetworkGraph:
    def __init__(self, name, layers, input_shape, split_index=None, seed=0, dtype=None):
        self.name = name
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.split_index = split_index
        self.bn_momentum = BN_MOMENTUM
        self.bn_eps = BN_EPS
        self.frozen = False
        self.dtype = dtype or default_dtype()
        if split_index is not None and not 0 < split_index < len(self.layers):
            raise UsageError(f"{name}: split_index {split_index} outside (0, {len(self.layers)})")
        self.shapes()
        self.params = {}
        self.materialized = not getattr(_build, "skip_init", False)
        if self.materialized:
            self.initialize(seed)

    # -- structure ---------------------------------------------------------
    def walk(self):
        """Yield (path, spec, top_index) for every non-residual layer, depth first."""

        def visit(specs, prefix, top):
            for i, spec in enumerate(specs):
                path = f"{prefix}{i}"
                idx = i if top is None else top
                if spec.kind == "residual":
                    yield from visit(spec.body, f"{path}.body.", idx)
                    yield from visit(spec.shortcut, f"{path}.shortcut.", idx)
                else:
                    yield path, spec, idx

        yield from visit(self.layers, "", None)

    def shapes(self, input_shape=None):
        """Per-layer output shapes (unbatched) by shape inference."""
        shape = tuple(input_shape or self.input_shape)
        out = []
        for i, spec in enumerate(self.layers):
            try:
                shape = output_shape(spec, shape)
            except ShapeError as exc:
                raise type(exc)(f"{self.name} layer {i} ({spec.kind}): {exc}") from None
            out.append(shape)
        return out

    def output_shape(self):
        return self.shapes()[-1]

    @property
    def logit_stop(self):
        """Index just past the logits layer (a trailing softmax is skipped)."""
        n = len(self.layers)
        return n - 1 if n and self.layers[-1].kind == "softmax" else n

    def logits(self, x, mode="train", start=0):
        return self.forward(x, mode, start, self.logit_stop)

    def tap_shape(self):
        if self.split_index is None:
            raise UsageError(f"{self.name}: no feature-mapping tap configured")
        return self.shapes()[self.split_index - 1]

    def initialize(self, seed=0):
        rng = np.random.default_rng(seed)
        self.params = {}
        for path, spec, _ in self.walk():
            if spec.kind in ("conv", "deconv", "fullyconnected", "batchnorm"):
                self.params[path] = init_params(spec, rng, self.dtype)
        self.materialized = True

    # -- execution ---------------------------------------------------------
    def _run_spec(self, spec, path, x, mode):
        if spec.kind != "residual":
            return apply_layer(spec, x, self.params.get(path), mode, self.bn_momentum, self.bn_eps)
        main = x
        for j, sub in enumerate(spec.body):
            main = self._run_spec(sub, f"{path}.body.{j}", main, mode)
        side = x
        for j, sub in enumerate(spec.shortcut):
            side = self._run_spec(sub, f"{path}.shortcut.{j}", side, mode)
        return main + side

    def forward(self, x, mode="train", start=0, stop=None):
        """Run layers[start:stop] on a batch. Frozen graphs always run in eval mode."""
        if not self.materialized:
            raise UsageError(f"{self.name}: built shapes-only; call initialize() before running it")
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        if start == 0 and tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.name}: input {tuple(x.shape[1:])} does not match declared {self.input_shape}")
        if self.frozen:
            mode = "eval"
        stop = len(self.layers) if stop is None else stop
        for i in range(start, stop):
            x = self._run_spec(self.layers[i], str(i), x, mode)
        return x

    __call__ = forward

    # -- parameters --------------------------------------------------------
    def _in_segment(self, top, segment):
        if segment == "all" or self.split_index is None:
            return segment != "right"
        return top < self.split_index if segment == "left" else top >= self.split_index

    def named_tensors(self, segment="all"):
        if segment not in SEGMENTS:
            raise UsageError(f"unknown segment {segment!r}")
        out = {}
        for path, _, top in self.walk():
            if path in self.params and self._in_segment(top, segment):
                for slot, t in self.params[path].tensors().items():
                    out[f"{path}.{slot}"] = t
        return out

    def parameters(self, segment="all"):
        return list(self.named_tensors(segment).values())

    def weights(self, segment="all"):
        """Weight tensors subject to l2 regularization (no biases, no BN affine)."""
        return [t for name, t in self.named_tensors(segment).items() if name.endswith(".weight")]

    def state_dict(self):
        state = {name: t.data for name, t in self.named_tensors().items()}
        for path, p in self.params.items():
            if p.running_mean is not None:
                state[f"{path}.running_mean"] = p.running_mean
                state[f"{path}.running_var"] = p.running_var
        return state

    def load_state_dict(self, state, strict=True):
        own = self.state_dict()
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise ShapeError(f"{self.name}: state mismatch (missing {missing[:5]}, unexpected {extra[:5]})")
        for name, value in state.items():
            if name not in own:
                continue
            if tuple(own[name].shape) != tuple(np.shape(value)):
                raise ShapeError(f"{self.name}: {name} has shape {np.shape(value)}, expected {own[name].shape}")
            path, slot = name.rsplit(".", 1)
            p = self.params[path]
            if slot in ("running_mean", "running_var"):
                setattr(p, slot, np.array(value, dtype=np.float64))
            else:
                getattr(p, slot).data = np.array(value, dtype=self.dtype)

    def with_input_shape(self, input_shape):
        """A graph over the same layers and shared parameters for another input size."""
        other = object.__new__(NetworkGraph)
        other.__dict__.update(self.__dict__)
        other.input_shape = tuple(int(v) for v in input_shape)
        other.shapes()
        return other

    def num_params(self):
        return int(sum(t.size for t in self.parameters()))

    def checksum(self):
        h = hashlib.sha256()
        for name, value in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()

    def freeze(self):
        self.frozen = True
        for t in self.parameters():
            t.requires_grad = False
        return self

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def __repr__(self):
        return f"NetworkGraph({self.name!r}, layers={len(self.layers)}, input={self.input_shape})"


# -- residual blocks -----------------------------------------------------------
def basic_block(cin, cout, stride=1):
    body = (conv(cin, cout, 3, stride), bn(cout), simple("relu"), conv(cout, cout, 3), bn(cout))
    shortcut = ()
    if stride != 1 or cin != cout:
        shortcut = (conv(cin, cout, 1, stride, 0), bn(cout))
    return LayerSpec("residual", cin, cout, body=body, shortcut=shortcut)


def bottleneck_block(cin, width, stride=1, expansion=4):
    cout = width * expansion
    body = (
        conv(cin, width, 1, 1, 0),
        bn(width),
        simple("relu"),
        conv(width, width, 3, stride),
        bn(width),
        simple("relu"),
        conv(width, cout, 1, 1, 0),
        bn(cout),
    )
    shortcut = ()
    if stride != 1 or cin != cout:
        shortcut = (conv(cin, cout, 1, stride, 0), bn(cout))
    return LayerSpec("residual", cin, cout, body=body, shortcut=shortcut)


# -- backbone templates -----------------------------------------------------
def resnet_mini(num_classes=10, input_size=32, width=16, blocks=(1, 1, 1), seed=0, name="resnet-mini",
                tap_stage=None):
    """Three residual stages (widths w, 2w, 4w) and a global-average-pool head.

    Stages after the first downsample. The FM tap defaults to the end of the
    second downsampling stage, i.e. the last stage.
    """
    tap_stage = len(blocks) - 1 if tap_stage is None else tap_stage
    layers = [conv(3, width, 3), bn(width), simple("relu")]
    cin = width
    split = None
    for stage, n in enumerate(blocks):
        cout = width * 2**stage
        for b in range(n):
            stride = 2 if stage > 0 and b == 0 else 1
            layers += [basic_block(cin, cout, stride), simple("relu")]
            cin = cout
        if stage == tap_stage:
            split = len(layers)
    layers += [simple("globalavgpool"), simple("flatten"), fc(cin, num_classes)]
    return NetworkGraph(name, layers, (3, input_size, input_size), split, seed)


def vgg_mini(num_classes=10, input_size=32, widths=(16, 32, 64), hidden=128, seed=0, name="vgg-mini"):
    """Conv-BN-ReLU pairs per stage with 2x2 max pooling, then two FC layers.

    The FM tap sits after the second pooling layer.
    """
    layers = []
    cin = 3
    split = None
    for stage, cout in enumerate(widths):
        layers += [conv(cin, cout), bn(cout), simple("relu"), conv(cout, cout), bn(cout), simple("relu")]
        layers.append(simple("maxpool", 2, 2))
        cin = cout
        if stage == 1:
            split = len(layers)
    m = input_size // 2 ** len(widths)
    layers += [simple("flatten"), fc(cin * m * m, hidden), simple("relu"), fc(hidden, num_classes)]
    return NetworkGraph(name, layers, (3, input_size, input_size), split, seed)


_VGG11 = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")


def vgg11(num_classes=1000, input_size=224, seed=0):
    """VGG-11 (configuration A): no batch norm, three FC layers, softmax output."""
    layers = []
    cin = 3
    pools = 0
    split = None
    for v in _VGG11:
        if v == "M":
            layers.append(simple("maxpool", 2, 2))
            pools += 1
            if pools == 2:
                split = len(layers)
        else:
            layers += [conv(cin, v, 3, bias=True), simple("relu")]
            cin = v
    m = input_size // 32
    layers += [simple("flatten"), fc(cin * m * m, 4096), simple("relu"), fc(4096, 4096), simple("relu")]
    layers += [fc(4096, num_classes), simple("softmax")]
    return NetworkGraph("vgg11", layers, (3, input_size, input_size), split, seed)


def _resnet_imagenet(name, block, counts, num_classes, input_size, seed):
    layers = [conv(3, 64, 7, 2, 3), bn(64), simple("relu"), LayerSpec("maxpool", kernel=3, stride=2, padding=1)]
    split = len(layers)
    cin = 64
    for stage, n in enumerate(counts):
        width = 64 * 2**stage
        for b in range(n):
            stride = 2 if stage > 0 and b == 0 else 1
            spec = block(cin, width, stride)
            layers += [spec, simple("relu")]
            cin = spec.out_channels
    layers += [simple("globalavgpool"), simple("flatten"), fc(cin, num_classes), simple("softmax")]
    return NetworkGraph(name, layers, (3, input_size, input_size), split, seed)


def resnet18(num_classes=1000, input_size=224, seed=0):
    return _resnet_imagenet("resnet18", basic_block, (2, 2, 2, 2), num_classes, input_size, seed)


def resnet34(num_classes=1000, input_size=224, seed=0):
    return _resnet_imagenet("resnet34", basic_block, (3, 4, 6, 3), num_classes, input_size, seed)


def resnet50(num_classes=1000, input_size=224, seed=0):
    return _resnet_imagenet("resnet50", bottleneck_block, (3, 4, 6, 3), num_classes, input_size, seed)


TEMPLATES = {
    "resnet-mini": resnet_mini,
    "vgg-mini": vgg_mini,
    "vgg11": vgg11,
    "resnet18": resnet18,
    "resnet34": resnet34,
    "resnet50": resnet50,
}


def build_backbone(template, num_classes=10, input_size=32, seed=0, **kwargs):
    try:
        builder = TEMPLATES[template]
    except KeyError:
        raise UsageError(f"unknown backbone template {template!r}; choose from {sorted(TEMPLATES)}") from None
    return builder(num_classes=num_classes, input_size=input_size, seed=seed, **kwargs)


# -- ThumbNet builders ---------------------------------------------------------
def _check_factor(f):
    if f not in (2, 4):
        raise GeometryError(f"downscale factor must be 2 or 4 (decoder depth log2(f) must be integral), got {f}")


def build_student_from_teacher(teacher: NetworkGraph, f: int, seed=1):
    """Same layers as the teacher on an input f times smaller per side.

    Only the first fully-connected layer may change, when its input width
    depends on the spatial size.
    """
    _check_factor(f)
    c, h, w = teacher.input_shape
    if h % f or w % f:
        raise GeometryError(f"teacher input {h}x{w} not divisible by downscale factor {f}")
    shape = (c, h // f, w // f)
    layers = []
    resized = False
    for i, spec in enumerate(teacher.layers):
        if spec.kind == "fullyconnected" and not resized:
            resized = True
            if spec.in_channels != shape[0]:
                spec = spec.with_in_channels(shape[0])
        try:
            shape = output_shape(spec, shape)
        except ShapeError as exc:
            raise GeometryError(f"student layer {i} ({spec.kind}) at input {h // f}x{w // f}: {exc}") from None
        layers.append(spec)
    student = NetworkGraph(f"{teacher.name}-student", layers, (c, h // f, w // f), teacher.split_index, seed, teacher.dtype)
    return student


def build_downscaler(f: int, hidden_channels=16, input_size=32, seed=2, final_relu=True):
    """Two 5x5 conv + BN + ReLU layers mapping 3 -> hidden -> 3 channels."""
    if f not in (2, 4):
        raise UsageError(f"downscaler supports f in (2, 4), got {f}")
    if hidden_channels <= 3:
        raise UsageError("downscaler needs more hidden channels than the 3 input channels")
    s1, s2 = (2, 1) if f == 2 else (2, 2)
    layers = [conv(3, hidden_channels, 5, s1, 2), bn(hidden_channels), simple("relu")]
    layers += [conv(hidden_channels, 3, 5, s2, 2), bn(3)]
    if final_relu:
        layers.append(simple("relu"))
    return NetworkGraph("downscaler", layers, (3, input_size, input_size), None, seed)


def build_decoder(student_feat_shape, teacher_feat_shape, seed=3):
    """Stride-2 channel-preserving deconvolutions from student to teacher tap size."""
    cs, hs, ws = student_feat_shape
    ct, ht, wt = teacher_feat_shape
    if cs != ct:
        raise GeometryError(f"decoder: channel mismatch {cs} vs {ct}")
    if ht % hs or wt % ws or ht // hs != wt // ws:
        raise GeometryError(f"decoder: {hs}x{ws} -> {ht}x{wt} is not a uniform integer upscale")
    ratio = ht // hs
    k = int(round(math.log2(ratio))) if ratio > 0 else 0
    if k < 1 or 2**k != ratio:
        raise GeometryError(f"decoder: upscale ratio {ratio} is not a power of two >= 2")
    layers = []
    for i in range(k):
        if i:
            layers.append(simple("relu"))
        layers.append(deconv(cs, cs, 4, 2, 1, bias=True))
    return NetworkGraph("decoder", layers, student_feat_shape, None, seed)


# -- non-learned downscalers ---------------------------------------------------
class BicubicDownscaler:
    """Fixed cubic-convolution resampler standing in for the learned downscaler."""

    trainable = False

    def __init__(self, f):
        self.f = f

    def forward(self, x, mode="eval"):
        from .dataio import bicubic_downscale_batch

        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        return Tensor(bicubic_downscale_batch(data, self.f), dtype=data.dtype)

    __call__ = forward

    def parameters(self, segment="all"):
        return []

    def weights(self, segment="all"):
        return []


class AvgPoolDownscaler(BicubicDownscaler):
    def forward(self, x, mode="eval"):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return avgpool2d(x.detach(), self.f, self.f)


class IdentityDownscaler(BicubicDownscaler):
    def __init__(self):
        super().__init__(1)

    def forward(self, x, mode="eval"):
        return x if isinstance(x, Tensor) else Tensor(x)


def is_trainable(downscaler):
    return isinstance(downscaler, NetworkGraph)


@dataclass
class ThumbNetBundle:
    teacher: NetworkGraph
    student: NetworkGraph
    downscaler: object
    decoder: NetworkGraph | None
    downscale_factor: int

    def check(self):
        t_shapes = self.teacher.shapes()
        s_shapes = self.student.shapes()
        if len(self.teacher.layers) != len(self.student.layers):
            raise GeometryError("student and teacher have different layer counts")
        f = self.downscale_factor
        for i, (ts, ss, a, b) in enumerate(zip(t_shapes, s_shapes, self.teacher.layers, self.student.layers)):
            if a.kind != b.kind:
                raise GeometryError(f"layer {i}: teacher {a.kind} vs student {b.kind}")
            if len(ts) == 3 and (ts[0] != ss[0]):
                raise GeometryError(f"layer {i}: channel count differs ({ts[0]} vs {ss[0]})")
        if self.decoder is not None:
            if self.decoder.output_shape() != self.teacher.tap_shape():
                raise GeometryError("decoder output does not match the teacher tap shape")
        return f


def build_bundle(teacher, f, downscaler="learned", hidden_channels=16, seed=0, with_decoder=True):
    """Assemble teacher, student, downscaler, and decoder for a factor f."""
    teacher.freeze()
    student = build_student_from_teacher(teacher, f, seed=seed + 1)
    size = teacher.input_shape[1]
    if downscaler == "learned":
        down = build_downscaler(f, hidden_channels, size, seed=seed + 2)
    elif downscaler == "bicubic":
        down = BicubicDownscaler(f)
    elif downscaler == "avgpool":
        down = AvgPoolDownscaler(f)
    else:
        raise UsageError(f"unknown downscaler {downscaler!r}")
    decoder = None
    if with_decoder and teacher.split_index is not None:
        decoder = build_decoder(student.tap_shape(), teacher.tap_shape(), seed=seed + 3)
    bundle = ThumbNetBundle(teacher, student, down, decoder, f)
    bundle.check()
    return bundle


@dataclass
class PipelineOutput:
    y: Tensor
    logits_s: Tensor
    logits_t: Tensor | None
    feat_s: Tensor | None
    feat_t: Tensor | None


def forward_pipeline(bundle: ThumbNetBundle, x, mode="train", teacher=True, student_head=True):
    """Downscale, run the student on the thumbnail and the frozen teacher on x."""
    x = x if isinstance(x, Tensor) else Tensor(x, dtype=bundle.student.dtype)
    if tuple(x.shape[1:]) != bundle.teacher.input_shape:
        raise ShapeError(f"pipeline input {tuple(x.shape[1:])} does not match teacher input {bundle.teacher.input_shape}")
    y = bundle.downscaler.forward(x, mode=mode)
    student = bundle.student
    split = student.split_index
    if split is None:
        feat_s = None
        logits_s = student.logits(y, mode)
    else:
        feat_s = student.forward(y, mode, 0, split)
        logits_s = student.logits(feat_s, mode, split) if student_head else None
    feat_t = logits_t = None
    if teacher:
        with no_grad():
            t = bundle.teacher
            if t.split_index is None:
                logits_t = t.logits(x.detach(), "eval")
            else:
                feat_t = t.forward(x.detach(), "eval", 0, t.split_index)
                logits_t = t.logits(feat_t, "eval", t.split_index)
    return PipelineOutput(y, logits_s, logits_t, feat_s, feat_t)
