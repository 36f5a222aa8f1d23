"""Invariant battery behind ``gsq selftest``.

Each check returns ``None`` on success or a short failure detail. Set
``GSQ_SELFTEST_FAULT=<check name>`` to perturb that check's computation,
which lets the harness itself be tested. Output carries no timings, so
repeated runs print identical summaries.
"""

from __future__ import annotations

import os
import sys

import numpy as np

from gsq import blocks, gumbel, pack, tensor
from gsq.config import QuantConfig
from gsq.gradcheck import check_gradients, layer_problem
from gsq.optim import LionState, lion_step
from gsq.quantizer import Grid, GroupScales, format_bpp
from gsq.tensor import RngStream
from gsq.trainer import init_relaxation, optimize
from gsq.warmstart import CalibSet, gptq, init_grid_logits, init_ternary_logits, rtn

FAULT_ENV = "GSQ_SELFTEST_FAULT"
GRAD_RTOL = 1e-3


def _toy(seed: int, rows: int = 4, cols: int = 8, n: int = 6):
    rng = RngStream(seed)
    w = rng.derive("w").gaussian((rows, cols))
    x = rng.derive("x").gaussian((n, cols))
    return w, x


def _gradcheck(bits: int, fault: bool):
    w, x = _toy(bits + 11)
    grid = Grid.from_mode(bits)
    base = rtn(w, grid, group_size=4)
    if grid.ternary:
        relax = init_ternary_logits(base, rng=RngStream(1))
    else:
        relax = init_grid_logits(base, rng=RngStream(1), parameterization="full" if bits == 2 else "shift")
    # spread logits so probabilities are not saturated at tau = kappa = 1
    for k, v in relax.trainables().items():
        if k.startswith("logits."):
            relax.set_trainable(k, v * 50.0)
    noise = relax.sample_noise(RngStream(2))
    y = x.astype(np.float64) @ w.T.astype(np.float64)
    tape, loss, binds = layer_problem(relax, x, y, noise)
    errs = check_gradients(tape, loss, binds)
    if fault:
        errs = {k: v + 1.0 for k, v in errs.items()}
    worst = max(float(e.max()) for e in errs.values())
    return None if worst <= GRAD_RTOL else f"max relative error {worst:.3g} > {GRAD_RTOL}"


def check_gradients_ternary(fault):
    return _gradcheck(0, fault)


def check_gradients_fullgrid(fault):
    return _gradcheck(2, fault)


def check_gradients_shift(fault):
    return _gradcheck(3, fault)


def check_gumbel_contracts(fault):
    rng = RngStream(3)
    logits = rng.derive("l").gaussian((200, 5))
    noise = rng.derive("g").gumbel((200, 5))
    p = gumbel.gumbel_probs(logits, noise, 0.7, 1.3)
    if fault:
        p = p * 1.001
    if np.max(np.abs(p.sum(-1) - 1.0)) > 1e-6:
        return "probabilities do not sum to one"
    q = gumbel.gumbel_probs(logits + 3.25, noise, 0.7, 1.3)
    if np.max(np.abs(p - q)) > 1e-6:
        return "logit shift changed probabilities"
    l1 = rng.derive("b").gaussian(1000)
    g = rng.derive("bg").gumbel((2, 1000))
    two = gumbel.gumbel_probs(np.stack([-l1, l1], -1), g.T, 0.5, 2.0)[:, 1]
    if np.max(np.abs(two - gumbel.binary_gumbel(l1, g[0], g[1], 0.5, 2.0))) > 1e-7:
        return "binary reduction disagrees with two-way softmax"
    cold = gumbel.gumbel_probs(logits, np.zeros_like(noise), 1e-4, 1.0)
    if not np.array_equal(np.argmax(cold, -1), gumbel.hard_argmax(logits)):
        return "low temperature does not collapse to argmax"
    return None


def check_schedule_endpoints(fault):
    w, x = _toy(5, rows=4, cols=8, n=16)
    cfg = QuantConfig(bits=2, group_size=8, epochs=3, batch_size=8, micro_batches=2)
    if fault:
        cfg = cfg.replace(tau_end=0.06)
    base = rtn(w, Grid.for_bits(2), 8)
    relax = {"w": init_relaxation(base, cfg, RngStream(0))}
    lin = blocks.Linear("w")
    trace = optimize(relax, lin, {}, x, blocks.forward(lin, x, {"w": w}), cfg, RngStream(0), cfg.epochs)
    first, last = trace[0], trace[-1]
    if (first["tau"], first["kappa"]) != (2.0, 100.0):
        return f"first step saw tau={first['tau']}, kappa={first['kappa']}"
    if abs(last["tau"] - 0.05) > 1e-12 or abs(last["kappa"] - 500.0) > 1e-9:
        return f"last step saw tau={last['tau']}, kappa={last['kappa']}"
    return None


def check_pack_roundtrip(fault):
    rng = np.random.default_rng(7)
    for mode in (0, 2, 3, 4, 5, 8):
        grid = Grid.from_mode(mode)
        rows, cols = int(rng.integers(1, 6)), int(rng.integers(1, 40))
        codes = rng.integers(grid.levels[0], grid.levels[-1] + 1, size=(rows, cols))
        scales = GroupScales(rng.uniform(0.1, 2.0, (rows, -(-cols // 16))).astype(np.float32), 16)
        blob = pack.pack(codes, scales, mode).to_bytes()
        if fault:
            blob = blob[:-5] + bytes([blob[-5] ^ 1]) + blob[-4:]
            try:
                pack.PackedTensor.from_bytes(blob)
            except pack.PackError:
                return f"mode {mode}: corrupted container rejected during roundtrip"
        back = pack.PackedTensor.from_bytes(blob)
        if not np.array_equal(back.codes(), codes):
            return f"mode {mode}: codes changed"
        if not np.array_equal(back.scales, scales.values.astype(np.float16)):
            return f"mode {mode}: scales changed"
    return None


def check_pack_rejects_corruption(fault):
    rng = np.random.default_rng(8)
    codes = rng.integers(-1, 2, size=(3, 17))
    blob = pack.pack(codes, GroupScales(np.ones((3, 2), np.float32), 16), 0).to_bytes()
    for i in range(len(blob)):
        bad = bytearray(blob)
        bad[i] ^= 0x40
        if fault and i == len(blob) // 2:
            continue
        try:
            pack.PackedTensor.from_bytes(bytes(bad))
        except pack.PackError:
            continue
        return f"flipped byte {i} accepted"
    if fault:
        return "fault injected: skipped a corrupted byte"
    return None


def check_tensor_roundtrip(fault):
    a = RngStream(9).gaussian((5, 3))
    buf = tensor.encode_tensor(a)
    if fault:
        buf = buf[:-4] + np.float32(1.5).tobytes()
    if not np.array_equal(tensor.decode_tensor(buf), a):
        return "GSQT roundtrip changed values"
    return None


def check_gptq_identity_equals_rtn(fault):
    w, _ = _toy(10, rows=6, cols=16)
    grid = Grid.for_bits(2)
    h = 2.0 * np.eye(16) + (0.5 if fault else 0.0)
    a = gptq(w, CalibSet(hessian=h), grid, 8)
    b = rtn(w, grid, 8)
    if not (np.array_equal(a.indices, b.indices) and np.array_equal(a.scales.values, b.scales.values)):
        return "identity-Hessian GPTQ differs from RTN"
    return None


def check_warm_start_fidelity(fault):
    w, x = _toy(12, rows=8, cols=16, n=32)
    cs = CalibSet(x)
    for mode in (0, 2, 3):
        base = gptq(w, cs, Grid.from_mode(mode), 8)
        relax = init_ternary_logits(base) if mode == 0 else init_grid_logits(base)
        if fault:
            k, v = next((k, v) for k, v in relax.trainables().items() if k.startswith("logits."))
            relax.set_trainable(k, -v)
        if not np.array_equal(relax.finalize().indices, base.indices):
            return f"mode {mode}: finalized init differs from baseline"
    return None


def check_lion_reference_step(fault):
    state = LionState.default(lr_logits=0.1, weight_decay=0.0)
    g = np.array([-2.0]) if fault else np.array([0.5])
    new = lion_step(state, {"logits.x": np.array([1.0], np.float32)}, {"logits.x": g})
    if abs(float(new["logits.x"][0]) - 0.9) > 1e-6:
        return f"p = {float(new['logits.x'][0])}, expected 0.9"
    return None


def check_bpp_accounting(fault):
    got = (
        pack.entropy_bpp(2, 128),
        format_bpp(pack.entropy_bpp(3, 128 if not fault else 64)),
        format_bpp(pack.entropy_bpp(0, 128)),
    )
    if got != (2.125, "3.13", "1.71"):
        return f"got {got}"
    return None


CHECKS = {
    "gradients.ternary": check_gradients_ternary,
    "gradients.fullgrid": check_gradients_fullgrid,
    "gradients.shift": check_gradients_shift,
    "gumbel.contracts": check_gumbel_contracts,
    "schedule.endpoints": check_schedule_endpoints,
    "pack.roundtrip": check_pack_roundtrip,
    "pack.rejects_corruption": check_pack_rejects_corruption,
    "tensor.roundtrip": check_tensor_roundtrip,
    "gptq.identity_equals_rtn": check_gptq_identity_equals_rtn,
    "warmstart.fidelity": check_warm_start_fidelity,
    "lion.reference_step": check_lion_reference_step,
    "bpp.accounting": check_bpp_accounting,
}


def run(out=None, fault: str | None = None) -> int:
    """Run every check, print one line each plus a summary; return the failure count."""
    out = out or sys.stdout
    if fault is None:
        fault = os.environ.get(FAULT_ENV) or None
    if fault is not None and fault not in CHECKS:
        raise ValueError(f"unknown selftest check {fault!r}")
    failures = 0
    for name, fn in CHECKS.items():
        try:
            detail = fn(fault == name)
        except Exception as e:  # a crash is a failure of that invariant
            detail = f"{type(e).__name__}: {e}"
        if detail is None:
            print(f"PASS {name}", file=out)
        else:
            failures += 1
            print(f"FAIL {name}: {detail}", file=out)
    print(f"selftest: {len(CHECKS) - failures}/{len(CHECKS)} passed", file=out)
    return failures
