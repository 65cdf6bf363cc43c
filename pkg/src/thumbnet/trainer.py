"""Two-stage ThumbNet training, teacher training, and evaluation.

Stage A (unsupervised pre-training) fits the downscaler, the left student
segment, and the decoder to moment matching plus feature mapping. Stage B
trains downscaler and student end-to-end on classification plus distillation,
with the Stage A parameters at a reduced learning rate.
"""

from __future__ import annotations

import csv
import logging
import math
import queue
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .errors import NumericFault, ShapeError, UsageError
from .graphfile import dump_graph
from .layers import log_softmax
from .losses import Hyperparams, cl_loss, fm_loss, kd_loss, l2_reg, mm_loss
from .model import NetworkGraph, ThumbNetBundle, forward_pipeline, is_trainable
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


# -- configuration ---------------------------------------------------------------
@dataclass(frozen=True)
class AblationConfig:
    use_supervised_downscaler: bool = True
    use_distillation: bool = True
    use_feature_mapping: bool = True
    use_moment_matching: bool = True

    def __post_init__(self):
        if self.use_feature_mapping and not self.use_supervised_downscaler:
            raise UsageError("feature mapping pre-trains the learned downscaler; it requires the supervised downscaler")

    @property
    def needs_teacher(self):
        return self.use_distillation or self.use_feature_mapping

    @property
    def mm_in_stage_b(self):
        # Without a pre-training stage the learned downscaler only meets the
        # moment-matching loss during end-to-end training.
        return self.use_moment_matching and self.use_supervised_downscaler and not self.use_feature_mapping

    @classmethod
    def from_method(cls, method):
        try:
            return METHODS[method]
        except KeyError:
            raise UsageError(f"unknown method {method!r}; ThumbNet methods are {sorted(METHODS)}") from None


METHODS = {
    "b": AblationConfig(False, False, False),
    "c": AblationConfig(True, False, False),
    "d": AblationConfig(False, True, False),
    "e": AblationConfig(True, True, False),
    "f": AblationConfig(True, True, True),
}
METHOD_NAMES = {
    "a": "original",
    "b": "bicubic downscaler",
    "c": "supervised downscaler",
    "d": "bicubic + distillation",
    "e": "supervised + distillation",
    "f": "thumbnet",
}


@dataclass
class Budget:
    epochs: int = 30
    stage_a_epochs: int | None = None
    batch_size: int = 128
    steps_per_epoch: int | None = None
    val_batch_size: int = 500
    augment: bool = True
    log_every: int = 10

    @property
    def pretrain_epochs(self):
        if self.stage_a_epochs is not None:
            return self.stage_a_epochs
        return max(1, round(0.25 * self.epochs)) if self.epochs > 0 else 0


# -- optimizer -------------------------------------------------------------------
def sgd_step(params, grads, velocities, lr, momentum=0.9):
    """v <- momentum * v + g; w <- w - lr * v, in place.

    Weight decay is not applied here; it reaches ``grads`` through the loss.
    """
    for p, g, v in zip(params, grads, velocities):
        w = p.data if isinstance(p, Tensor) else p
        if g is None:
            g = np.zeros_like(w)
        if np.shape(g) != w.shape or v.shape != w.shape:
            raise UsageError(f"sgd_step: gradient {np.shape(g)} / buffer {v.shape} vs parameter {w.shape}")
        v *= momentum
        v += g
        w -= (lr * v).astype(w.dtype)


class SGD:
    """Momentum SGD over named parameter groups with per-group lr multipliers."""

    def __init__(self, groups, momentum=0.9):
        self.groups = {}
        self.momentum = momentum
        self.buffers = {}
        for name, (params, mult) in groups.items():
            self.add_group(name, params, mult)

    def add_group(self, name, params, lr_mult=1.0):
        params = [p for p in params if p.requires_grad]
        self.groups[name] = [params, float(lr_mult)]
        for p in params:
            self.buffers.setdefault(id(p), np.zeros(p.shape, dtype=np.float64))

    def set_multiplier(self, name, lr_mult):
        self.groups[name][1] = float(lr_mult)

    def params(self):
        return [p for params, _ in self.groups.values() for p in params]

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def step(self, lr):
        for params, mult in self.groups.values():
            sgd_step(params, [p.grad for p in params], [self.buffers[id(p)] for p in params], lr * mult, self.momentum)


class PlateauSchedule:
    """Divide the lr by 10 once the best validation loss stalls for ``patience`` evaluations."""

    def __init__(self, lr, patience=3, rel_tol=1e-3, max_decays=2, factor=0.1):
        self.lr = lr
        self.patience = patience
        self.rel_tol = rel_tol
        self.max_decays = max_decays
        self.factor = factor
        self.best = math.inf
        self.bad = 0
        self.decays = 0

    def update(self, val_loss):
        if val_loss < self.best - self.rel_tol * abs(self.best) or self.best == math.inf:
            self.best = val_loss
            self.bad = 0
            return self.lr
        self.bad += 1
        if self.bad >= self.patience and self.decays < self.max_decays:
            self.lr *= self.factor
            self.decays += 1
            self.bad = 0
        return self.lr

    def state(self):
        return {"lr": self.lr, "best": self.best, "bad": self.bad, "decays": self.decays}


# -- metrics log -------------------------------------------------------------------
LOG_FIELDS = ("step", "stage", "event", "epoch", "lr", "total", "mm", "fm", "cl", "kd", "reg",
              "val_loss", "val_top1", "val_top5")


class MetricsLog:
    """CSV metrics rows; unused fields are left blank."""

    def __init__(self, path=None):
        self.rows = []
        self.path = Path(path) if path else None
        self._fh = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, LOG_FIELDS)
            self._writer.writeheader()
            self._fh.flush()

    def write(self, **row):
        clean = {k: ("" if row.get(k) is None else row[k]) for k in LOG_FIELDS}
        for k, v in clean.items():
            if isinstance(v, float):
                clean[k] = f"{v:.10g}"
        self.rows.append(clean)
        if self._fh:
            self._writer.writerow(clean)
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- data plumbing -------------------------------------------------------------------
def prefetch(iterable, depth=2):
    """Produce items on a background thread through a bounded queue."""
    q = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()
    errors = []

    def produce():
        try:
            for item in iterable:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced on the consumer side
            errors.append(exc)
        finally:
            while not stop.is_set():
                try:
                    q.put(done, timeout=0.1)
                    break
                except queue.Full:
                    continue

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is done:
                if errors:
                    raise errors[0]
                return
            yield item
    finally:
        stop.set()
        worker.join()


def _epoch_batches(dataset, budget, seed, epoch):
    it = dataset.batches(budget.batch_size, seed=seed * 1000 + epoch, shuffle=True, augment=budget.augment)
    n = 0
    for batch in prefetch(it):
        if budget.steps_per_epoch is not None and n >= budget.steps_per_epoch:
            break
        n += 1
        yield batch


def _finite(value, what, state):
    if not np.isfinite(value):
        raise NumericFault(f"{what} diverged at step {state.step}", checkpoint=state.last_checkpoint)


class _with_checkpoint:
    """Attach the last good checkpoint to numeric faults raised inside kernels."""

    def __init__(self, checkpoint):
        self.checkpoint = checkpoint

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if isinstance(exc, NumericFault) and exc.checkpoint is None and self.checkpoint is not None:
            raise NumericFault(str(exc), checkpoint=self.checkpoint) from exc
        return False


# -- evaluation ----------------------------------------------------------------------
def topk_errors(logits, labels, ks=(1, 5)):
    """Counts of misses for each k; k is clipped to the class count."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    order = np.argsort(-logits, axis=1, kind="stable")
    out = []
    for k in ks:
        k = min(k, logits.shape[1])
        hit = (order[:, :k] == labels[:, None]).any(axis=1)
        out.append(int((~hit).sum()))
    return out


def evaluate(model, dataset, downscaler=None, batch_size=500, limit=None):
    """Top-1/top-5 error (fractions) and mean CL loss of a graph or bundle."""
    if isinstance(model, ThumbNetBundle):
        downscaler, graph = model.downscaler, model.student
    else:
        graph = model
    n = 0
    miss1 = miss5 = 0
    loss = 0.0
    with no_grad():
        for batch in dataset.batches(batch_size, shuffle=False, augment=False, dtype=graph.dtype):
            x = batch.images
            if downscaler is not None:
                x = downscaler.forward(x, mode="eval")
            logits = graph.logits(x, "eval")
            m1, m5 = topk_errors(logits.data, batch.labels)
            miss1 += m1
            miss5 += m5
            lsm = log_softmax(logits).data
            loss -= float(lsm[np.arange(len(batch.labels)), batch.labels].sum())
            n += len(batch.labels)
            if limit is not None and n >= limit:
                break
    if n == 0:
        raise UsageError("evaluate: empty dataset")
    return {"top1": miss1 / n, "top5": miss5 / n, "loss": loss / n, "count": n}


# -- training state --------------------------------------------------------------------
@dataclass
class TrainState:
    bundle: ThumbNetBundle
    hp: Hyperparams
    ablation: AblationConfig
    seed: int = 0
    optimizer: SGD | None = None
    stage: str = ""
    epoch: int = 0
    step: int = 0
    lr: float = 0.0
    schedule: PlateauSchedule | None = None
    last_checkpoint: str | None = None
    out_dir: Path | None = None
    pretrained: bool = False
    history: list = field(default_factory=list)

    def progress(self):
        return {"stage": self.stage, "epoch": self.epoch, "step": self.step, "lr": self.lr,
                "pretrained": self.pretrained, "seed": self.seed}


def bundle_graphs(bundle):
    graphs = {"student": bundle.student}
    if is_trainable(bundle.downscaler):
        graphs["downscaler"] = bundle.downscaler
    if bundle.decoder is not None:
        graphs["decoder"] = bundle.decoder
    return graphs


def save_state(state: TrainState, path, extra=None):
    graphs = bundle_graphs(state.bundle)
    meta = {
        "kind": "thumbnet",
        "graphs": {k: dump_graph(g) for k, g in graphs.items()},
        "teacher": dump_graph(state.bundle.teacher),
        "teacher_checksum": state.bundle.teacher.checksum(),
        "downscale_factor": state.bundle.downscale_factor,
        "downscaler": "learned" if is_trainable(state.bundle.downscaler) else type(state.bundle.downscaler).__name__,
        "hyperparams": state.hp.to_dict(),
        "ablation": asdict(state.ablation),
        "progress": state.progress(),
    }
    meta.update(extra or {})
    dataio.save_checkpoint(path, dataio.graphs_to_tensors(graphs), meta)
    state.last_checkpoint = str(path)
    return path


def _checkpoint(state, name):
    if state.out_dir is None:
        return None
    return save_state(state, state.out_dir / name)


# -- stages ------------------------------------------------------------------------------
def stage_a_objective(bundle, x, hp, ablation, mode="train"):
    """Returns (total, components) for MM + alpha * FM + theta/2 * R."""
    out = forward_pipeline(bundle, x, mode, teacher=True, student_head=False)
    mm = mm_loss(x, out.y, hp.lambda_mm) if ablation.use_moment_matching else None
    fm = fm_loss(out.feat_t, out.feat_s, bundle.decoder, mode)
    weights = list(bundle.downscaler.weights()) + bundle.student.weights("left") + bundle.decoder.weights()
    reg = l2_reg(weights)
    total = fm * hp.alpha + reg * (0.5 * hp.theta)
    if mm is not None:
        total = total + mm
    return total, {"mm": mm, "fm": fm, "reg": reg}


def stage_b_objective(bundle, x, labels, hp, ablation, mode="train"):
    """Returns (total, components) for CL + beta * KD (+ MM) + theta/2 * R."""
    out = forward_pipeline(bundle, x, mode, teacher=ablation.use_distillation)
    cl = cl_loss(out.logits_s, labels)
    kd = kd_loss(out.logits_s, out.logits_t, hp.tau) if ablation.use_distillation else None
    mm = mm_loss(x, out.y, hp.lambda_mm) if ablation.mm_in_stage_b else None
    reg = l2_reg(list(bundle.downscaler.weights()) + bundle.student.weights())
    total = cl + reg * (0.5 * hp.theta)
    if kd is not None:
        total = total + kd * hp.beta
    if mm is not None:
        total = total + mm
    return total, {"cl": cl, "kd": kd, "mm": mm, "reg": reg}


def _components(parts):
    return {k: (None if v is None else float(v.item())) for k, v in parts.items()}


def _run_epochs(state, objective, train_ds, val_fn, budget, epochs, stage, metrics):
    opt = state.optimizer
    state.schedule = PlateauSchedule(state.lr)
    for epoch in range(epochs):
        state.epoch = epoch
        for batch in _epoch_batches(train_ds, budget, state.seed, epoch):
            opt.zero_grad()
            with _with_checkpoint(state.last_checkpoint):
                total, parts = objective(batch)
                value = float(total.item())
                _finite(value, f"stage {stage} objective", state)
                backward(total)
            opt.step(state.lr)
            state.step += 1
            if state.step % budget.log_every == 0 or state.step == 1:
                metrics.write(step=state.step, stage=stage, event="train", epoch=epoch, lr=state.lr,
                              total=value, **_components(parts))
        with _with_checkpoint(state.last_checkpoint):
            val = val_fn()
        _finite(val["loss"], f"stage {stage} validation loss", state)
        metrics.write(step=state.step, stage=stage, event="val", epoch=epoch, lr=state.lr,
                      val_loss=val["loss"], val_top1=val.get("top1"), val_top5=val.get("top5"))
        state.history.append({"stage": stage, "epoch": epoch, **val})
        _checkpoint(state, "last.ckpt")
        state.lr = state.schedule.update(val["loss"])
    return state


def pretrain_stage(state: TrainState, train_ds, val_ds, budget: Budget, metrics: MetricsLog):
    """Stage A over the downscaler, the left student segment, and the decoder."""
    b = state.bundle
    if not state.ablation.use_feature_mapping:
        raise UsageError("pretrain_stage requires feature mapping to be enabled")
    if b.decoder is None or b.teacher.split_index is None:
        raise UsageError("pretrain_stage needs a decoder and a teacher feature tap")
    if not is_trainable(b.downscaler):
        raise UsageError("pretrain_stage needs the learned downscaler")
    state.stage = "A"
    state.lr = state.hp.base_lr
    state.optimizer = SGD(
        {"downscaler": (b.downscaler.parameters(), 1.0), "student_left": (b.student.parameters("left"), 1.0),
         "decoder": (b.decoder.parameters(), 1.0)},
        state.hp.momentum,
    )

    def objective(batch):
        return stage_a_objective(b, batch.images, state.hp, state.ablation)

    def val_fn():
        total, count = 0.0, 0
        with no_grad():
            for batch in val_ds.batches(budget.val_batch_size, shuffle=False, augment=False):
                value, parts = stage_a_objective(b, batch.images, state.hp, state.ablation, mode="eval")
                reg = parts["reg"].item() * 0.5 * state.hp.theta
                total += (value.item() - reg) * len(batch.labels)
                count += len(batch.labels)
        return {"loss": total / max(count, 1)}

    _run_epochs(state, objective, train_ds, val_fn, budget, budget.pretrain_epochs, "A", metrics)
    state.pretrained = budget.pretrain_epochs > 0
    return state


def finetune_stage(state: TrainState, train_ds, val_ds, budget: Budget, metrics: MetricsLog):
    """Stage B: end-to-end training of downscaler and student."""
    b = state.bundle
    hp = state.hp
    state.stage = "B"
    state.lr = hp.base_lr
    factor = hp.finetune_lr_factor if state.pretrained else 1.0
    if b.student.split_index is None:
        pretrained, fresh = list(b.downscaler.parameters()), b.student.parameters()
    else:
        pretrained = list(b.downscaler.parameters()) + b.student.parameters("left")
        fresh = b.student.parameters("right")
    state.optimizer = SGD({"pretrained": (pretrained, factor), "fresh": (fresh, 1.0)}, hp.momentum)

    def objective(batch):
        return stage_b_objective(b, batch.images, batch.labels, hp, state.ablation)

    def val_fn():
        return evaluate(b, val_ds, batch_size=budget.val_batch_size)

    return _run_epochs(state, objective, train_ds, val_fn, budget, budget.epochs, "B", metrics)


def train_thumbnet(bundle, train_ds, val_ds, ablation: AblationConfig, hp=None, budget=None, seed=0,
                   out_dir=None, metrics=None):
    """Two-stage driver: Stage A when feature mapping is on, then Stage B."""
    hp = hp or Hyperparams()
    budget = budget or Budget()
    if ablation.needs_teacher and bundle.teacher is None:
        raise UsageError("this method needs a trained teacher (--teacher)")
    if ablation.use_supervised_downscaler != is_trainable(bundle.downscaler):
        raise UsageError("bundle downscaler does not match the ablation configuration")
    state = TrainState(bundle, hp, ablation, seed, out_dir=Path(out_dir) if out_dir else None)
    checksum = bundle.teacher.checksum()
    _checkpoint(state, "last.ckpt")  # initialization is the first known-good state
    own_log = metrics is None
    metrics = metrics or MetricsLog(state.out_dir / "metrics.csv" if state.out_dir else None)
    try:
        if ablation.use_feature_mapping:
            pretrain_stage(state, train_ds, val_ds, budget, metrics)
        finetune_stage(state, train_ds, val_ds, budget, metrics)
    finally:
        if own_log:
            metrics.close()
    if bundle.teacher.checksum() != checksum:
        raise UsageError("teacher weights changed during ThumbNet training")
    return state


def train_classifier(graph: NetworkGraph, train_ds, val_ds, hp=None, budget=None, seed=0, out_dir=None,
                     metrics=None, downscaler=None, stage="T", name="teacher"):
    """Train a network with CL + theta/2 * R, optionally on outputs of a fixed downscaler."""
    hp = hp or Hyperparams()
    budget = budget or Budget()
    out_dir = Path(out_dir) if out_dir else None
    if downscaler is None and tuple(train_ds.image_shape) != graph.input_shape:
        raise ShapeError(f"dataset images {train_ds.image_shape} do not match network input {graph.input_shape}")
    if downscaler is not None and is_trainable(downscaler) and not downscaler.frozen:
        raise UsageError("train_classifier only accepts a frozen or fixed downscaler")
    own_log = metrics is None
    metrics = metrics or MetricsLog(out_dir / "metrics.csv" if out_dir else None)
    opt = SGD({"all": (graph.parameters(), 1.0)}, hp.momentum)
    schedule = PlateauSchedule(hp.base_lr)
    lr = hp.base_lr
    step = 0
    history = []
    ckpt = None
    graphs = {name: graph}
    if downscaler is not None and is_trainable(downscaler):
        graphs["downscaler"] = downscaler

    def save(fname, progress):
        meta = {"kind": "classifier" if downscaler is not None else "teacher",
                "graphs": {k: dump_graph(g) for k, g in graphs.items()},
                "downscaler": None if downscaler is None else (
                    "learned" if is_trainable(downscaler) else type(downscaler).__name__),
                "downscale_factor": getattr(downscaler, "f", None) if downscaler is not None else None,
                "hyperparams": hp.to_dict(), "progress": progress}
        return dataio.save_checkpoint(out_dir / fname, dataio.graphs_to_tensors(graphs), meta)

    if out_dir:
        ckpt = str(save("last.ckpt", {"epoch": 0, "step": 0, "lr": lr, "seed": seed}))
    try:
        for epoch in range(budget.epochs):
            for batch in _epoch_batches(train_ds, budget, seed, epoch):
                opt.zero_grad()
                with _with_checkpoint(ckpt):
                    x = batch.images
                    if downscaler is not None:
                        with no_grad():
                            x = downscaler.forward(x, mode="eval")
                    cl = cl_loss(graph.logits(x, "train"), batch.labels)
                    reg = l2_reg(graph.weights())
                    total = cl + reg * (0.5 * hp.theta)
                    value = float(total.item())
                    if not np.isfinite(value):
                        raise NumericFault(f"{name} objective diverged at step {step}", checkpoint=ckpt)
                    backward(total)
                opt.step(lr)
                step += 1
                if step % budget.log_every == 0 or step == 1:
                    metrics.write(step=step, stage=stage, event="train", epoch=epoch, lr=lr, total=value,
                                  cl=float(cl.item()), reg=float(reg.item()))
            with _with_checkpoint(ckpt):
                val = evaluate(graph, val_ds, downscaler=downscaler, batch_size=budget.val_batch_size)
            metrics.write(step=step, stage=stage, event="val", epoch=epoch, lr=lr, val_loss=val["loss"],
                          val_top1=val["top1"], val_top5=val["top5"])
            history.append({"epoch": epoch, **val})
            if out_dir:
                ckpt = str(save("last.ckpt", {"epoch": epoch, "step": step, "lr": lr, "seed": seed}))
            lr = schedule.update(val["loss"])
        if out_dir:
            save(f"{name}.ckpt", {"epoch": budget.epochs, "step": step, "lr": lr, "seed": seed})
    finally:
        if own_log:
            metrics.close()
    return history


def train_teacher(graph: NetworkGraph, train_ds, val_ds, hp=None, budget=None, seed=0, out_dir=None,
                  metrics=None):
    """Train the original network on full-size images."""
    return train_classifier(graph, train_ds, val_ds, hp, budget, seed, out_dir, metrics)


# -- restoring from checkpoints --------------------------------------------------------------
def restore_graph(ckpt, key, seed=0):
    from .graphfile import parse_graph

    try:
        text = ckpt.meta["graphs"][key]
    except KeyError:
        raise UsageError(f"checkpoint holds no {key!r} graph") from None
    graph = parse_graph(text, seed)
    graph.load_state_dict(dataio.tensors_for(ckpt, key))
    return graph


def load_teacher(path):
    ckpt = dataio.load_checkpoint(path)
    if ckpt.meta.get("kind") != "teacher":
        raise UsageError(f"{path}: not a teacher checkpoint (kind {ckpt.meta.get('kind')!r})")
    return restore_graph(ckpt, "teacher").freeze()


def load_downscaler(ckpt):
    """The checkpoint's downscaler: a frozen learned graph or a fixed resampler."""
    from .model import AvgPoolDownscaler, BicubicDownscaler

    kind = ckpt.meta.get("downscaler")
    if kind == "learned":
        return restore_graph(ckpt, "downscaler").freeze()
    f = ckpt.meta.get("downscale_factor")
    if kind == "BicubicDownscaler":
        return BicubicDownscaler(f)
    if kind == "AvgPoolDownscaler":
        return AvgPoolDownscaler(f)
    raise UsageError(f"checkpoint has no downscaler (kind {ckpt.meta.get('kind')!r})")
