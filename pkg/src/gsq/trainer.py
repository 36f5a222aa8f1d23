"""Reconstruction-driven optimization of the relaxed quantizers.

The loop per optimizer step: split the batch into micro-batches, draw fresh
Gumbel noise for every forward pass, average the gradients, optionally clamp
logit gradients, take one Lion step and advance the temperature / noise-scale
schedules. Hard reconstruction errors are always measured noise-free, with
float16-rounded scales, on held-out calibration rows.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from gsq import blocks
from gsq.autodiff import Tape, TapeError
from gsq.config import QuantConfig
from gsq.gumbel import LinearSchedule
from gsq.optim import ClipPolicy, LionState, accumulate, clip_logit_grads, lion_step
from gsq.pack import PackedTensor, pack_quantized, report_bpp, stored_weights
from gsq.quantizer import Grid, GroupScales, QuantizedWeights
from gsq.tensor import RngStream, as_matrix
from gsq.warmstart import CalibSet, gptq, init_grid_logits, init_ternary_logits, rtn

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at optimizer step {step}{': ' + detail if detail else ''}")
        self.step = step


@dataclass
class TrainReport:
    loss_trace: list[dict] = field(default_factory=list)
    init_mse: float = float("nan")
    final_mse: float = float("nan")
    code_flip_fraction: float = 0.0
    fell_back: bool = False
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "init_mse": self.init_mse,
            "final_mse": self.final_mse,
            "code_flip_fraction": self.code_flip_fraction,
            "fell_back": self.fell_back,
            "wall_clock": self.wall_clock,
            "loss_trace": self.loss_trace,
        }
        d.update(self.extra)
        return d


@dataclass
class _Split:
    train: np.ndarray
    held: np.ndarray


def split_calibration(x: np.ndarray, config: QuantConfig) -> _Split:
    """Last ``holdout_fraction`` of rows are held out; they never feed a gradient."""
    x = as_matrix(x, "calibration activations")
    limit = config.calib_row_limit
    if limit is not None:
        x = x[:limit]
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty calibration set")
    n_held = int(n * config.holdout_fraction)
    if n_held == 0 or n_held == n:
        return _Split(x, x)
    return _Split(x[: n - n_held], x[n - n_held :])


def grid_for(config: QuantConfig) -> Grid:
    return Grid.from_mode(config.bits)


def baseline_for(w, x_train, config: QuantConfig) -> QuantizedWeights:
    grid = grid_for(config)
    if config.init_method == "rtn":
        return rtn(w, grid, config.group_size)
    return gptq(w, CalibSet(x_train, damp=config.damp), grid, config.group_size)


def init_relaxation(base: QuantizedWeights, config: QuantConfig, rng: RngStream | None):
    if base.grid.ternary:
        return init_ternary_logits(base, config.effective_alpha, config.sigma_init, rng)
    return init_grid_logits(
        base,
        config.effective_alpha,
        config.sigma_init,
        rng,
        halfwidth=config.shift_halfwidth,
        parameterization=config.parameterization,
    )


def _hard_weights(qws: dict[str, QuantizedWeights]) -> dict[str, np.ndarray]:
    return {k: stored_weights(v) for k, v in qws.items()}


def hard_mse(model, x, qws: dict[str, QuantizedWeights], fixed: dict, reference) -> float:
    weights = dict(fixed)
    weights.update(_hard_weights(qws))
    return blocks.reconstruction_mse(model, x, weights, reference)


def steps_per_epoch(n_rows: int, batch_size: int) -> int:
    return -(-n_rows // batch_size)


def optimize(
    relax: dict,
    model,
    fixed: dict[str, np.ndarray],
    x: np.ndarray,
    y_ref: np.ndarray,
    config: QuantConfig,
    rng: RngStream,
    epochs: int,
) -> list[dict]:
    """Run ``epochs`` of relaxed training in place on ``relax``; return the step trace.

    ``relax`` maps layer name -> relaxation; ``fixed`` holds the other layers
    of ``model`` as plain weights.
    """
    n = x.shape[0]
    per_epoch = steps_per_epoch(n, config.batch_size)
    total = epochs * per_epoch
    if total == 0:
        return []
    tau_s = LinearSchedule(config.tau_start, config.tau_end, total - 1)
    kappa_s = LinearSchedule(config.kappa_start, config.kappa_end, total - 1)

    tape = Tape()
    tau, kappa = tape.input("tau"), tape.input("kappa")
    xin, yin = tape.input("x"), tape.input("y_ref")
    weights = {name: tape.input(name) for name in fixed}
    for name, r in relax.items():
        weights[name] = r.build(tape, tau, kappa, prefix=name + ".")
    y = model.apply(blocks.TapeOps(tape), xin, weights)
    loss = tape.hadamard(tape.frobenius_sq(tape.sub(y, yin)), tape.input("inv_count"))

    state = LionState.default(config.lr_logits, config.lr_scales, config.weight_decay, (config.beta1, config.beta2))
    clip = ClipPolicy(config.clip_target, config.clip_threshold)
    order_rng = rng.derive("order")
    noise_rng = rng.derive("noise")
    trace = []
    step = 0
    for _ in range(epochs):
        perm = np.argsort(order_rng.uniform(n), kind="stable")
        for b in range(per_epoch):
            rows = perm[b * config.batch_size : (b + 1) * config.batch_size]
            t_val, k_val = tau_s.value(step), kappa_s.value(step)
            grads, losses = [], []
            for mb in np.array_split(rows, min(config.micro_batches, len(rows))):
                binds = {"tau": t_val, "kappa": k_val, "x": x[mb], "y_ref": y_ref[mb]}
                binds["inv_count"] = 1.0 / (len(mb) * y_ref.shape[1])
                binds.update({k: v for k, v in fixed.items()})
                for name, r in relax.items():
                    binds.update(r.bindings(r.sample_noise(noise_rng), prefix=name + "."))
                try:
                    value = tape.forward(binds, output=loss)
                except TapeError as e:  # non-finite intermediate
                    raise TrainingDiverged(step, str(e)) from e
                losses.append(value)
                grads.append(tape.backward(loss))
            g = clip_logit_grads(accumulate(grads), clip)
            for name, r in relax.items():
                params = {f"{name}.{k}": v for k, v in r.trainables().items()}
                try:
                    new = lion_step(state, params, g)
                except FloatingPointError as e:
                    raise TrainingDiverged(step, str(e)) from e
                for full, value in new.items():
                    r.set_trainable(full.split(".", 1)[1], value)
            trace.append({"step": step, "tau": t_val, "kappa": k_val, "loss": float(np.mean(losses))})
            step += 1
    return trace


def _flip_fraction(base: dict, final: dict) -> float:
    total = sum(v.indices.size for v in base.values())
    if total == 0:
        return 0.0
    return sum(int(np.sum(base[k].indices != final[k].indices)) for k in base) / total


def _bpp_extra(packed: dict[str, PackedTensor]) -> dict:
    bits = sum(len(p.payload) * 8 + p.scales.size * 16 for p in packed.values())
    n = sum(p.rows * p.cols for p in packed.values())
    ent = sum(report_bpp(p)[1] * p.rows * p.cols for p in packed.values())
    return {"stored_bpp": bits / n if n else 0.0, "entropy_bpp": ent / n if n else 0.0}


def quantize_block(layers: dict, model, calib, config: QuantConfig, stages=None):
    """Quantize every layer of ``model`` jointly; returns ``(packed dict, TrainReport)``.

    ``stages`` is a list of ``(kind, epochs)`` with kind ``"layerwise"`` (each
    layer against its own full-precision inputs) or ``"joint"`` (model output).
    """
    start = time.perf_counter()
    calib_x = calib.activations if isinstance(calib, CalibSet) else calib
    split = split_calibration(calib_x, config)
    fp = {k: as_matrix(v, k) for k, v in layers.items()}
    if set(fp) != set(model.layer_names):
        raise ValueError(f"model expects layers {model.layer_names}, got {sorted(fp)}")
    for name, inputs in model.layer_inputs(split.train[:1], fp).items():
        if inputs.shape[1] != fp[name].shape[1]:
            raise ValueError(f"layer {name}: calibration width {inputs.shape[1]} != in-features {fp[name].shape[1]}")
    if stages is None:
        stages = [("joint", config.epochs)]
    rng = RngStream(config.seed)

    train_inputs = model.layer_inputs(split.train, fp)
    base = {k: baseline_for(fp[k], train_inputs[k], config) for k in model.layer_names}
    y_train = blocks.forward(model, split.train, fp)
    y_held = blocks.forward(model, split.held, fp)
    init_mse = hard_mse(model, split.held, base, {}, y_held)

    trace: list[dict] = []
    extra: dict = {"stages": []}
    if sum(e for _, e in stages) == 0:
        final = base
    else:
        relax = {k: init_relaxation(base[k], config, rng.derive("init." + k)) for k in model.layer_names}
        for i, (kind, epochs) in enumerate(stages):
            snapshot = copy.deepcopy(relax)
            before = {k: r.finalize() for k, r in relax.items()}
            mse_before = hard_mse(model, split.held, before, {}, y_held)
            if kind == "layerwise":
                for name in model.layer_names:
                    lin = blocks.Linear(name)
                    xi = train_inputs[name]
                    t = optimize({name: relax[name]}, lin, {}, xi, blocks.forward(lin, xi, fp),
                                 config, rng.derive(f"stage{i}.{name}"), epochs)
                    trace.extend(dict(r, stage=i, layer=name) for r in t)
            elif kind == "joint":
                t = optimize(relax, model, {}, split.train, y_train, config, rng.derive(f"stage{i}"), epochs)
                trace.extend(dict(r, stage=i) for r in t)
            else:
                raise ValueError(f"unknown stage kind {kind!r}")
            after = {k: r.finalize() for k, r in relax.items()}
            mse_after = hard_mse(model, split.held, after, {}, y_held)
            reverted = config.do_no_harm and mse_after > mse_before
            if reverted:
                relax, mse_after = snapshot, mse_before
            extra["stages"].append(
                {"kind": kind, "epochs": epochs, "start_block_mse": mse_before,
                 "end_block_mse": mse_after, "reverted": reverted}
            )
        final = {k: r.finalize() for k, r in relax.items()}

    final_mse = hard_mse(model, split.held, final, {}, y_held)
    fell_back = False
    if config.do_no_harm and final_mse > init_mse:
        log.info("optimization ended worse than warm start (%.6g > %.6g); keeping warm start", final_mse, init_mse)
        final, final_mse, fell_back = base, init_mse, True
    packed = {k: pack_quantized(final[k]) for k in model.layer_names}
    extra.update(_bpp_extra(packed))
    extra["bits"] = "t" if config.ternary else config.bits
    report = TrainReport(
        loss_trace=trace,
        init_mse=init_mse,
        final_mse=final_mse,
        code_flip_fraction=_flip_fraction(base, final),
        fell_back=fell_back,
        wall_clock=time.perf_counter() - start,
        extra=extra,
    )
    return packed, report


def _split_epochs(config: QuantConfig) -> tuple[int, int]:
    first = int(round(config.epochs * config.stage_split))
    return first, config.epochs - first


def quantize_layer(w, calib, config: QuantConfig, epoch_split: float | None = None):
    """Quantize one linear layer against ``x @ w.T``; returns ``(PackedTensor, TrainReport)``.

    With ``epoch_split`` the epoch budget runs as two consecutive phases, the
    same way :func:`quantize_ternary_staged` treats a one-layer block.
    """
    if epoch_split is None:
        stages = [("joint", config.epochs)]
    else:
        e1, e2 = _split_epochs(config.replace(stage_split=epoch_split))
        stages = [("layerwise", e1), ("joint", e2)]
    packed, report = quantize_block({"w": w}, blocks.Linear("w"), calib, config, stages)
    return packed["w"], report


def quantize_ternary_staged(layers: dict, model, calib, config: QuantConfig):
    """Layerwise warm-up of each layer, then joint optimization of the whole block output.

    The stage split follows ``config.stage_split``. If the joint stage ends
    with a worse block error than the warm-up, the warm-up result is kept.
    """
    e1, e2 = _split_epochs(config)
    if not config.ternary:
        log.info("staged schedule running at %s bits", config.bits)
    return quantize_block(layers, model, calib, config, [("layerwise", e1), ("joint", e2)])


def scale_only_finetune(packed: dict[str, PackedTensor], model, calib, fp_weights: dict, config: QuantConfig):
    """Refine group scales of a composed model with every code frozen.

    Minimizes the squared error between the quantized and full-precision model
    outputs for ``config.scale_epochs`` epochs. Returns ``(packed dict, report)``;
    the returned tensors carry the original codes bit-for-bit.
    """
    start = time.perf_counter()
    calib_x = calib.activations if isinstance(calib, CalibSet) else calib
    split = split_calibration(calib_x, config)
    fp = {k: as_matrix(v, k) for k, v in fp_weights.items()}
    qws = {k: packed[k].quantized() for k in model.layer_names}
    y_train = blocks.forward(model, split.train, fp)
    y_held = blocks.forward(model, split.held, fp)
    before = hard_mse(model, split.held, qws, {}, y_held)

    tape = Tape()
    xin, yin = tape.input("x"), tape.input("y_ref")
    weights = {}
    for name, q in qws.items():
        levels = q.grid.values(q.indices)
        weights[name] = tape.group_scale(tape.param(name + ".scales"), levels, q.scales.group_size)
    y = model.apply(blocks.TapeOps(tape), xin, weights)
    loss = tape.hadamard(tape.frobenius_sq(tape.sub(y, yin)), tape.input("inv_count"))
    state = LionState.default(config.lr_logits, config.lr_scales, config.weight_decay, (config.beta1, config.beta2))
    scales = {name + ".scales": q.scales.values.astype(np.float32) for name, q in qws.items()}

    rng = RngStream(config.seed).derive("scale-ft")
    n = split.train.shape[0]
    per_epoch = steps_per_epoch(n, config.batch_size)
    trace = []
    step = 0
    for _ in range(config.scale_epochs):
        perm = np.argsort(rng.uniform(n), kind="stable")
        for b in range(per_epoch):
            rows = perm[b * config.batch_size : (b + 1) * config.batch_size]
            binds = dict(scales, x=split.train[rows], y_ref=y_train[rows])
            binds["inv_count"] = 1.0 / (len(rows) * y_train.shape[1])
            try:
                value = tape.forward(binds, output=loss)
            except TapeError as e:
                raise TrainingDiverged(step, str(e)) from e
            try:
                scales = lion_step(state, scales, tape.backward(loss))
            except FloatingPointError as e:
                raise TrainingDiverged(step, str(e)) from e
            trace.append({"step": step, "loss": float(value)})
            step += 1

    tuned = {
        k: QuantizedWeights(q.indices, GroupScales(scales[k + ".scales"], q.scales.group_size), q.grid)
        for k, q in qws.items()
    }
    after = hard_mse(model, split.held, tuned, {}, y_held)
    fell_back = after > before
    if fell_back:
        tuned, after = qws, before
    out = {k: pack_quantized(v) for k, v in tuned.items()}
    for k in out:
        if out[k].payload != packed[k].payload:
            raise AssertionError(f"codes of {k} changed during scale-only fine-tuning")
    report = TrainReport(trace, before, after, 0.0, fell_back, time.perf_counter() - start)
    return out, report


def layer_sensitivity(w, calib, group_size: int = 128, low: int = 2, high: int = 3, damp: float = 0.01) -> float:
    """Per-parameter increase in layer reconstruction MSE going from ``high`` to ``low`` bits."""
    x = calib.activations if isinstance(calib, CalibSet) else as_matrix(calib)
    w = as_matrix(w, "weights")
    cs = CalibSet(x, damp=damp)
    ref = x.astype(np.float64) @ w.astype(np.float64).T
    errs = []
    for bits in (low, high):
        q = gptq(w, cs, Grid.for_bits(bits), group_size)
        d = x.astype(np.float64) @ stored_weights(q).astype(np.float64).T - ref
        errs.append(float(np.mean(d * d)))
    return (errs[0] - errs[1]) / w.size


def allocate_bits(
    layers: dict[str, int],
    sensitivity: dict[str, float],
    target_bpp: float,
    low: int = 2,
    high: int = 3,
    group_size: int = 128,
    scale_bits: int = 16,
) -> dict[str, int]:
    """Greedy per-layer bit-widths under a parameter-weighted average-rate budget.

    ``layers`` maps name -> parameter count (iteration order is the layer
    index used for tie-breaks). All layers start at ``low``; layers are
    visited by descending sensitivity and upgraded to ``high`` whenever the
    average rate stays within ``target_bpp``.
    """
    names = list(layers)
    total = sum(layers.values())
    if total == 0:
        raise ValueError("no parameters to allocate")
    rate = {b: b + scale_bits / group_size for b in (low, high)}
    lo_avg, hi_avg = rate[low], rate[high]
    eps = 1e-12
    if not lo_avg - eps <= target_bpp <= hi_avg + eps:
        raise ValueError(f"target {target_bpp} bpp outside achievable range [{lo_avg}, {hi_avg}]")
    bits = {n: low for n in names}
    used = lo_avg * total
    budget = target_bpp * total
    delta = rate[high] - rate[low]
    order = sorted(range(len(names)), key=lambda i: (-sensitivity[names[i]] / (high - low), i))
    for i in order:
        name = names[i]
        cost = delta * layers[name]
        if used + cost <= budget + eps * total:
            bits[name] = high
            used += cost
    return bits


def average_bpp(layers: dict[str, int], bits: dict[str, int], group_size: int = 128, scale_bits: int = 16) -> float:
    total = sum(layers.values())
    return sum((bits[n] + scale_bits / group_size) * c for n, c in layers.items()) / total
