"""Static cost accounting: multiply-accumulates, feature-map memory,
parameter counts, and image storage for a network graph."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, ShapeError
from .layers import LayerSpec, output_shape, param_shapes

MB = 1e6


@dataclass
class CostRow:
    name: str
    kind: str
    n_in: int
    kernel: int
    n_out: int
    m_out: int
    macs: int
    feature_bytes: int
    params: int


@dataclass
class CostReport:
    name: str
    batch: int
    input_shape: tuple
    rows: list = field(default_factory=list)
    multiply_add: bool = False

    @property
    def macs(self):
        return sum(r.macs for r in self.rows)

    @property
    def flops(self):
        """Reported FLOPs: one per MAC unless the multiply+add convention is on."""
        return self.macs * (2 if self.multiply_add else 1)

    @property
    def feature_bytes(self):
        return sum(r.feature_bytes for r in self.rows)

    @property
    def params(self):
        return sum(r.params for r in self.rows)

    @property
    def image_bytes(self):
        c, h, w = self.input_shape
        return self.batch * h * w * c

    def totals(self):
        return {
            "flops": self.flops,
            "feature_bytes": self.feature_bytes,
            "params": self.params,
            "image_bytes": self.image_bytes,
        }


def _numel(shape):
    return int(np.prod(shape))


def _leaf_rows(spec: LayerSpec, name, in_shape, batch, bytes_per_element, extended):
    """Rows for one layer (recursing into residual blocks) and its output shape."""
    if spec.kind == "residual":
        rows = []
        shape = in_shape
        for j, sub in enumerate(spec.body):
            sub_rows, shape = _leaf_rows(sub, f"{name}.body.{j}", shape, batch, bytes_per_element, extended)
            rows += sub_rows
        side = in_shape
        for j, sub in enumerate(spec.shortcut):
            sub_rows, side = _leaf_rows(sub, f"{name}.shortcut.{j}", side, batch, bytes_per_element, extended)
            rows += sub_rows
        out = output_shape(spec, in_shape)
        add = batch * _numel(out) if extended else 0
        rows.append(CostRow(f"{name}.add", "add", out[0], 1, out[0], out[-1] if len(out) == 3 else 1,
                            add, batch * _numel(out) * bytes_per_element, 0))
        return rows, out

    out = output_shape(spec, in_shape)
    params = sum(_numel(s) for s in param_shapes(spec).values())
    n_in = in_shape[0]
    n_out = out[0]
    m_out = out[-1] if len(out) == 3 else 1
    k = spec.kernel
    if spec.kind == "conv":
        macs = batch * n_in * k * k * n_out * out[1] * out[2]
    elif spec.kind == "deconv":
        macs = batch * n_in * k * k * n_out * in_shape[1] * in_shape[2]
    elif spec.kind == "fullyconnected":
        macs = batch * spec.in_channels * spec.out_channels
        k = 1
    elif not extended or spec.kind == "flatten":
        macs = 0
    elif spec.kind in ("maxpool", "avgpool"):
        macs = batch * _numel(out) * k * k
    elif spec.kind == "globalavgpool":
        macs = batch * _numel(in_shape)
    else:
        macs = batch * _numel(out)
    fbytes = 0 if spec.kind == "flatten" else batch * _numel(out) * bytes_per_element
    return [CostRow(name, spec.kind, n_in, k, n_out, m_out, macs, fbytes, params)], out


def count_flops(graph, input_shape=None, batch=1, bytes_per_element=4, extended=False,
                multiply_add=False, count_input=True, prefix=""):
    """Per-layer cost rows for a graph.

    Conv layers cost batch * n_in * k^2 * n_out * m_out^2 multiply-accumulates;
    deconv layers use their input spatial size; FC layers in * out. Other layers
    count zero unless ``extended`` is set. Feature memory counts the input image
    (when ``count_input``) and every produced feature map.
    """
    shape = tuple(input_shape or graph.input_shape)
    report = CostReport(graph.name, batch, shape, multiply_add=multiply_add)
    if count_input:
        report.rows.append(CostRow(f"{prefix}input", "input", 0, 0, shape[0], shape[-1], 0,
                                   batch * _numel(shape) * bytes_per_element, 0))
    for i, spec in enumerate(graph.layers):
        try:
            rows, shape = _leaf_rows(spec, f"{prefix}{i}", shape, batch, bytes_per_element, extended)
        except ShapeError as exc:
            raise GeometryError(f"{graph.name} layer {i} ({spec.kind}): {exc}") from None
        report.rows += rows
    return report


def count_feature_memory(graph, input_shape=None, batch=1, bytes_per_element=4, count_input=True):
    return count_flops(graph, input_shape, batch, bytes_per_element, count_input=count_input).feature_bytes


def count_params(graph):
    """Learnable scalars, BN scale and shift included, running statistics excluded."""
    total = 0
    for _, spec, _ in graph.walk():
        total += sum(_numel(s) for s in param_shapes(spec).values())
    return total


def image_storage(shape, batch=1):
    c, h, w = shape
    return batch * c * h * w


def merge_reports(name, parts, multiply_add=False):
    """Concatenate reports of networks run in sequence; the first supplies the input."""
    first = parts[0]
    merged = CostReport(name, first.batch, first.input_shape, multiply_add=multiply_add)
    for part in parts:
        merged.rows += part.rows
    return merged


@dataclass
class Comparison:
    reference: CostReport
    thumb: CostReport
    thumb_image_shape: tuple

    @property
    def ratios(self):
        ref, th = self.reference, self.thumb
        thumb_images = image_storage(self.thumb_image_shape, th.batch)
        return {
            "flops_ratio": ref.flops / th.flops if th.flops else float("inf"),
            "memory_ratio": ref.feature_bytes / th.feature_bytes if th.feature_bytes else float("inf"),
            "params_ratio": ref.params / th.params if th.params else float("inf"),
            "storage_ratio": ref.image_bytes / thumb_images,
        }

    def rows(self):
        """Summary rows: (metric, reference, thumbnail, ratio)."""
        r = self.ratios
        thumb_images = image_storage(self.thumb_image_shape, self.thumb.batch)
        return [
            ("flops_G", self.reference.flops / 1e9, self.thumb.flops / 1e9, r["flops_ratio"]),
            ("feature_memory_MB", self.reference.feature_bytes / MB, self.thumb.feature_bytes / MB, r["memory_ratio"]),
            ("params_M", self.reference.params / 1e6, self.thumb.params / 1e6, r["params_ratio"]),
            ("image_storage_MB", self.reference.image_bytes / MB, thumb_images / MB, r["storage_ratio"]),
        ]


def speedup_report(reference, reference_shape, thumb, thumb_shape, batch=32, downscaler=None,
                   decoder=None, bytes_per_element=4, extended=False, multiply_add=False):
    """Compare a reference network with a thumbnail network.

    ``downscaler`` and ``decoder`` graphs, when given, are added to the
    thumbnail side (the downscaler then consumes the full-size input).
    """
    ref = count_flops(reference, reference_shape, batch, bytes_per_element, extended, multiply_add)
    parts = []
    if downscaler is not None:
        parts.append(count_flops(downscaler, reference_shape, batch, bytes_per_element, extended,
                                 multiply_add, prefix="E."))
    parts.append(count_flops(thumb, thumb_shape, batch, bytes_per_element, extended, multiply_add,
                             count_input=downscaler is None, prefix="S."))
    if decoder is not None:
        parts.append(count_flops(decoder, None, batch, bytes_per_element, extended, multiply_add,
                                 count_input=False, prefix="D."))
    th = merge_reports(f"{thumb.name}", parts, multiply_add)
    return Comparison(ref, th, tuple(thumb_shape))


def format_table(comparison: Comparison, fmt="text"):
    header = ("metric", comparison.reference.name, comparison.thumb.name, "ratio")
    rows = comparison.rows()
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for metric, a, b, r in rows:
            writer.writerow([metric, f"{a:.6g}", f"{b:.6g}", f"{r:.6g}"])
        return buf.getvalue()
    lines = [f"{header[0]:<20}{header[1]:>20}{header[2]:>20}{header[3]:>10}"]
    for metric, a, b, r in rows:
        lines.append(f"{metric:<20}{a:>20.2f}{b:>20.2f}{r:>9.2f}x")
    return "\n".join(lines) + "\n"


def format_layers(report: CostReport, fmt="text"):
    cols = ("layer", "kind", "n_in", "s", "n_out", "m", "macs", "feature_bytes", "params")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in report.rows:
            writer.writerow([r.name, r.kind, r.n_in, r.kernel, r.n_out, r.m_out, r.macs, r.feature_bytes, r.params])
        return buf.getvalue()
    lines = [f"{'layer':<18}{'kind':<15}{'n_in':>6}{'s':>3}{'n_out':>6}{'m':>5}{'macs':>16}{'feat_bytes':>14}{'params':>12}"]
    for r in report.rows:
        lines.append(f"{r.name:<18}{r.kind:<15}{r.n_in:>6}{r.kernel:>3}{r.n_out:>6}{r.m_out:>5}"
                     f"{r.macs:>16}{r.feature_bytes:>14}{r.params:>12}")
    return "\n".join(lines) + "\n"
