"""Mean-teacher training loop with style-transferred source supervision.

Each iteration draws one source sample (already rendered in target style when
the transfer is enabled) and one unlabeled target sample. The student gets a
dice loss on the source, a consistency loss between its prediction on the
deformed target and the deformed teacher prediction, and an entropy penalty on
its own target prediction. Only the student is optimised; the teacher follows
by exponential moving average.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import elastic, segnet
from .errors import InvalidConfig, NumericalFailure
from .fourier_style import offline_pairing, transfer_style
from .losses import (
    consistency_loss_and_grad,
    dice_loss_and_grad,
    entropy_loss_and_grad,
    lambda_schedule,
)
from .slices import LabeledSlice, Slice

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "loss_total", "loss_dice", "loss_con", "loss_ent", "lambda")

ABLATIONS = {
    "full": dict(use_cgftda=True, use_consistency=True, use_entropy=True),
    "source-only": dict(use_cgftda=False, use_consistency=False, use_entropy=False),
    "no-cgftda": dict(use_cgftda=False, use_consistency=True, use_entropy=True),
    "no-con": dict(use_cgftda=True, use_consistency=False, use_entropy=True),
    "no-ent": dict(use_cgftda=True, use_consistency=True, use_entropy=False),
}


@dataclass
class Ablation:
    use_cgftda: bool = True
    use_consistency: bool = True
    use_entropy: bool = True

    @classmethod
    def named(cls, name: str) -> "Ablation":
        try:
            return cls(**ABLATIONS[name])
        except KeyError:
            raise InvalidConfig(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}") from None


@dataclass
class Seeds:
    net: int = 0
    data: int = 0
    tau: int = 0


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1
    lr: float = 6e-4
    weight_decay: float = 5e-4
    alpha: float = 0.005
    beta: float = 0.99
    lambda_max: float = 1.5
    ramp_coeff: float = 5.0
    dice_eps: float = 1e-6
    ablation: Ablation = field(default_factory=Ablation)
    seeds: Seeds = field(default_factory=Seeds)
    consistency_reduction: str = "mean"
    entropy_form: str = "binary_full"
    # "student" makes the entropy term trainable; "teacher" is the literal, gradient-free form
    entropy_target: str = "student"
    cgftda_mode: str = "offline"
    entropy_schedule: str = "ramp"
    # the configured lr is the initial rate; "poly" decays it as (1 - step/total)^0.9
    lr_schedule: str = "poly"
    depth: int = 3
    base_channels: int = 8
    elastic_sigma: Optional[float] = None
    elastic_magnitude: Optional[float] = None
    manifest: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = Ablation(**self.ablation)
        if isinstance(self.seeds, dict):
            self.seeds = Seeds(**self.seeds)
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be >= 1")
        for name in ("lr", "weight_decay", "dice_eps"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")
        if self.lr <= 0:
            raise InvalidConfig("lr must be positive")
        if self.lambda_max < 0:
            raise InvalidConfig("lambda_max must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidConfig("beta must be in [0, 1]")
        if not 0.0 <= self.alpha <= 0.5:
            raise InvalidConfig("alpha must be in [0, 0.5]")
        choices = {
            "consistency_reduction": ("sum", "mean"),
            "entropy_form": ("binary_full", "positive_only"),
            "entropy_target": ("student", "teacher"),
            "cgftda_mode": ("offline", "online"),
            "entropy_schedule": ("ramp", "constant"),
            "lr_schedule": ("poly", "constant"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise InvalidConfig(f"{name} must be one of {allowed}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    student: segnet.NetParams
    teacher: segnet.NetParams
    opt: segnet.AdamState
    step: int = 0
    progress: float = 0.0


@dataclass
class StepLosses:
    dice: float
    con: float
    ent: float
    lam: float

    @property
    def total(self) -> float:
        return self.dice + self.lam * self.con + self.ent


@dataclass
class TrainResult:
    state: TrainState
    log: list

    @property
    def student(self):
        return self.state.student

    @property
    def teacher(self):
        return self.state.teacher


def init_state(config: TrainConfig, input_size) -> TrainState:
    net_cfg = segnet.NetConfig(config.depth, config.base_channels, tuple(input_size))
    student = segnet.init_params(net_cfg, config.seeds.net)
    opt = segnet.AdamState(lr=config.lr, weight_decay=config.weight_decay)
    return TrainState(student, student.copy(), opt)


def epoch_progress(epoch: int, epochs: int) -> float:
    """Normalised progress so the first epoch sits at 0 and the last at 1."""
    if epochs <= 1:
        return 0.0
    return min(1.0, epoch / (epochs - 1))


def entropy_weight(progress: float, config: TrainConfig) -> float:
    """Weight of the entropy term: 1, or the consistency ramp shape rising to 1."""
    if config.entropy_schedule == "constant":
        return 1.0
    return lambda_schedule(progress, 1.0, config.ramp_coeff)


def learning_rate(step: int, total_steps: int, config: TrainConfig) -> float:
    if config.lr_schedule == "constant":
        return config.lr
    return config.lr * (1.0 - step / total_steps) ** 0.9


def _add(acc, grads, scale):
    for k, v in grads.tensors.items():
        acc[k] = acc[k] + scale * v if k in acc else scale * v


def student_objective(
    student: segnet.NetParams,
    teacher: segnet.NetParams,
    src_batch: Sequence[LabeledSlice],
    tgt_batch: Sequence[Slice],
    tau: elastic.DisplacementField,
    config: TrainConfig,
    progress: float,
    terms=("dice", "con", "ent"),
    with_grad: bool = True,
):
    """Batch-mean loss terms of the student and, optionally, their gradient.

    ``terms`` restricts which (enabled) terms enter the value and gradient.
    The teacher branch is evaluated but never differentiated.
    """
    ab = config.ablation
    lam = lambda_schedule(progress, config.lambda_max, config.ramp_coeff)
    w_ent = entropy_weight(progress, config)
    use_con = ab.use_consistency and "con" in terms
    use_ent = ab.use_entropy and "ent" in terms
    acc = {}
    dice_sum = con_sum = ent_sum = 0.0

    if "dice" in terms:
        for item in src_batch:
            prob, cache = segnet.forward(student, item.image)
            value, grad = dice_loss_and_grad(prob, item.mask, config.dice_eps)
            dice_sum += value
            if with_grad:
                _add(acc, segnet.backward(student, cache, grad), 1.0 / len(src_batch))

    if use_con or use_ent:
        for x_t in tgt_batch:
            prob_s, cache = segnet.forward(student, elastic.warp(x_t.pixels, tau))
            upstream = np.zeros_like(prob_s)
            if use_con:
                prob_t = segnet.predict(teacher, x_t)
                value, grad = consistency_loss_and_grad(
                    prob_s, elastic.warp(prob_t, tau), config.consistency_reduction
                )
                con_sum += value
                upstream += lam * grad
            if use_ent:
                if config.entropy_target == "student":
                    value, grad = entropy_loss_and_grad(prob_s, config.entropy_form)
                    upstream += w_ent * grad
                else:
                    value, _ = entropy_loss_and_grad(segnet.predict(teacher, x_t), config.entropy_form)
                ent_sum += w_ent * value
            if with_grad:
                _add(acc, segnet.backward(student, cache, upstream), 1.0 / len(tgt_batch))

    m = len(tgt_batch) or 1
    losses = StepLosses(dice_sum / max(len(src_batch), 1), con_sum / m, ent_sum / m, lam)
    if not with_grad:
        return losses, None
    for name, arr in student.tensors.items():
        acc.setdefault(name, np.zeros(arr.shape))
    return losses, segnet.NetParams(student.config, {k: acc[k] for k in student.tensors})


def train_step(
    state: TrainState,
    src_batch: Sequence[LabeledSlice],
    tgt_batch: Sequence[Slice],
    tau_params: elastic.ElasticParams,
    config: TrainConfig,
):
    """One optimiser step on the student and one EMA step on the teacher.

    Returns the new state and the batch-mean loss terms. The logged entropy
    term already includes its schedule weight, so ``total`` is the sum of the
    three logged terms with lambda applied to consistency.
    """
    h, w = state.student.config.input_size
    tau = elastic.make_displacement(h, w, tau_params)
    losses, grads = student_objective(
        state.student, state.teacher, src_batch, tgt_batch, tau, config, state.progress
    )
    components = dict(dice=losses.dice, con=losses.con, ent=losses.ent, lam=losses.lam)
    if not all(math.isfinite(v) for v in components.values()) or not math.isfinite(losses.total):
        raise NumericalFailure(f"non-finite loss at step {state.step}: {components}", state.step, components)

    new_student, new_opt = segnet.adam_step(state.student, grads, state.opt)
    new_teacher = segnet.ema_update(state.teacher, new_student, config.beta)
    new_state = TrainState(new_student, new_teacher, new_opt, state.step + 1, state.progress)
    return new_state, losses


def epoch_order(rng: np.random.Generator, n_source: int, n_target: int):
    """Shuffled source/target index sequences of length max(n_source, n_target)."""
    length = max(n_source, n_target)
    perm_s = rng.permutation(n_source)
    perm_t = rng.permutation(n_target)
    ar = np.arange(length)
    return perm_s[ar % n_source], perm_t[ar % n_target]


def _transferred(source_set, target_set, pairing, alpha):
    return [
        LabeledSlice(transfer_style(s.image, target_set[j], alpha), s.mask)
        for s, j in zip(source_set, pairing)
    ]


def training_view(config: TrainConfig, source_set, target_set):
    """Source pool as the student first sees it: style-transferred under offline CGFT-DA."""
    if not (config.ablation.use_cgftda and config.cgftda_mode == "offline"):
        return list(source_set)
    rng_pair = np.random.default_rng([config.seeds.data, 1])
    return _transferred(source_set, target_set, offline_pairing(len(source_set), len(target_set), rng_pair), config.alpha)


def train(
    config: TrainConfig,
    source_set: Sequence[LabeledSlice],
    target_set: Sequence[Slice],
    on_step: Optional[Callable[[TrainState, dict], None]] = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs and return final networks plus the per-step log."""
    if not source_set:
        raise InvalidConfig("source set is empty")
    if not target_set:
        raise InvalidConfig("target training set is empty")
    ab = config.ablation
    state = init_state(config, source_set[0].image.shape)
    h = state.student.config.input_size[0]

    rng_data = np.random.default_rng(config.seeds.data)
    rng_pair = np.random.default_rng([config.seeds.data, 1])
    rng_tau = np.random.default_rng(config.seeds.tau)

    pool = training_view(config, source_set, target_set)

    steps_per_epoch = -(-max(len(source_set), len(target_set)) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    rows = []
    for epoch in range(config.epochs):
        state.progress = epoch_progress(epoch, config.epochs)
        if ab.use_cgftda and config.cgftda_mode == "online":
            pool = _transferred(source_set, target_set, offline_pairing(len(source_set), len(target_set), rng_pair), config.alpha)
        s_idx, t_idx = epoch_order(rng_data, len(source_set), len(target_set))
        for start in range(0, len(s_idx), config.batch_size):
            src = [pool[i] for i in s_idx[start : start + config.batch_size]]
            tgt = [target_set[i] for i in t_idx[start : start + config.batch_size]]
            tau = elastic.random_params(rng_tau, h, config.elastic_sigma, config.elastic_magnitude)
            state.opt.lr = learning_rate(state.step, total_steps, config)
            state, losses = train_step(state, src, tgt, tau, config)
            row = {
                "step": state.step,
                "epoch": epoch,
                "loss_total": losses.total,
                "loss_dice": losses.dice,
                "loss_con": losses.con,
                "loss_ent": losses.ent,
                "lambda": losses.lam,
            }
            rows.append(row)
            if on_step is not None:
                on_step(state, row)
        last = rows[-1]
        log.info(
            "epoch %d/%d  dice %.4f  con %.5f  ent %.4f  lambda %.4f",
            epoch + 1, config.epochs, last["loss_dice"], last["loss_con"], last["loss_ent"], last["lambda"],
        )
    return TrainResult(state, rows)


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow([r["step"], r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[2:]])


def read_log(path):
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def save_run(result: TrainResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    segnet.save_checkpoint(out / "student.ckpt", result.student, result.state.step)
    segnet.save_checkpoint(out / "teacher.ckpt", result.teacher, result.state.step)
    write_log(out / "train_log.csv", result.log)
