"""Line-oriented text form of a NetworkGraph.

    graph name=resnet-mini input=3x32x32 split=7
    conv in=3 out=16 k=3 p=1
    residual in=16 out=32
      conv in=16 out=32 k=3 s=2 p=1
    shortcut
      conv in=16 out=32 s=2
    end

Fields left out take their defaults (k=1 s=1 p=0 bias=0). Blank lines and
``#`` comments are ignored; indentation is cosmetic.
"""

from __future__ import annotations

from .errors import DataFormatError
from .layers import KINDS, LayerSpec
from .model import NetworkGraph

_DEFAULTS = {"in": 0, "out": 0, "k": 1, "s": 1, "p": 0, "bias": 0}
_KEYS = {"in": "in_channels", "out": "out_channels", "k": "kernel", "s": "stride", "p": "padding", "bias": "has_bias"}


def _fields(tokens, lineno):
    out = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep:
            raise DataFormatError(f"graph line {lineno}: expected key=value, got {tok!r}")
        out[key] = value
    return out


def _spec_line(spec: LayerSpec):
    parts = [spec.kind]
    for short, attr in _KEYS.items():
        value = int(getattr(spec, attr))
        if value != _DEFAULTS[short]:
            parts.append(f"{short}={value}")
    return " ".join(parts)


def dump_graph(graph: NetworkGraph) -> str:
    c, h, w = graph.input_shape
    head = f"graph name={graph.name} input={c}x{h}x{w}"
    if graph.split_index is not None:
        head += f" split={graph.split_index}"
    lines = [head]

    def emit(specs, depth):
        pad = "  " * depth
        for spec in specs:
            if spec.kind == "residual":
                lines.append(f"{pad}residual in={spec.in_channels} out={spec.out_channels}")
                emit(spec.body, depth + 1)
                if spec.shortcut:
                    lines.append(f"{pad}shortcut")
                    emit(spec.shortcut, depth + 1)
                lines.append(f"{pad}end")
            else:
                lines.append(pad + _spec_line(spec))

    emit(graph.layers, 0)
    return "\n".join(lines) + "\n"


def _parse_layer(kind, fields, lineno):
    if kind not in KINDS:
        raise DataFormatError(f"graph line {lineno}: unknown layer kind {kind!r}")
    kwargs = {}
    for key, value in fields.items():
        if key not in _KEYS:
            raise DataFormatError(f"graph line {lineno}: unknown field {key!r}")
        try:
            kwargs[_KEYS[key]] = int(value)
        except ValueError:
            raise DataFormatError(f"graph line {lineno}: {key}={value!r} is not an integer") from None
    if "has_bias" in kwargs:
        kwargs["has_bias"] = bool(kwargs["has_bias"])
    try:
        return LayerSpec(kind, **kwargs)
    except Exception as exc:
        raise DataFormatError(f"graph line {lineno}: {exc}") from None


def parse_graph(text: str, seed=0, dtype=None) -> NetworkGraph:
    lines = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append((lineno, line.split()))
    if not lines or lines[0][1][0] != "graph":
        raise DataFormatError("graph text must start with a 'graph' header line")
    lineno, tokens = lines[0]
    head = _fields(tokens[1:], lineno)
    try:
        name = head["name"]
        shape = tuple(int(v) for v in head["input"].split("x"))
    except (KeyError, ValueError):
        raise DataFormatError(f"graph line {lineno}: header needs name= and input=CxHxW") from None
    if len(shape) != 3:
        raise DataFormatError(f"graph line {lineno}: input must be CxHxW")
    split = int(head["split"]) if "split" in head else None

    # stack of [spec_fields, body, shortcut, in_shortcut]
    stack = []
    top = []
    for lineno, tokens in lines[1:]:
        kind, fields = tokens[0], _fields(tokens[1:], lineno)
        target = top if not stack else (stack[-1][2] if stack[-1][3] else stack[-1][1])
        if kind == "residual":
            stack.append([(fields, lineno), [], [], False])
        elif kind == "shortcut":
            if not stack or stack[-1][3]:
                raise DataFormatError(f"graph line {lineno}: 'shortcut' outside a residual block")
            stack[-1][3] = True
        elif kind == "end":
            if not stack:
                raise DataFormatError(f"graph line {lineno}: 'end' without a residual block")
            (rf, rline), body, shortcut, _ = stack.pop()
            spec = _parse_layer("residual", rf, rline)
            spec = LayerSpec("residual", spec.in_channels, spec.out_channels, body=tuple(body), shortcut=tuple(shortcut))
            (top if not stack else (stack[-1][2] if stack[-1][3] else stack[-1][1])).append(spec)
        else:
            target.append(_parse_layer(kind, fields, lineno))
    if stack:
        raise DataFormatError("graph text ends inside a residual block")
    return NetworkGraph(name, top, shape, split, seed, dtype)
