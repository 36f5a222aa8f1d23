"""Central finite-difference checks for tape gradients (float64 replay)."""

from __future__ import annotations

import numpy as np

from gsq.autodiff import Node, Tape


def numeric_gradient(tape: Tape, loss: Node, bindings: dict, name: str, h: float = 1e-3) -> np.ndarray:
    base = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    p = base[name]
    out = np.zeros_like(p)
    flat = p.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = tape.forward(base, output=loss)
        flat[i] = orig - h
        down = tape.forward(base, output=loss)
        flat[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return out


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor_frac: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor is ``floor_frac`` of the largest |n|."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = max(floor_frac * float(np.max(np.abs(n), initial=0.0)), 1e-30)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(tape: Tape, loss: Node, bindings: dict, h: float = 1e-3) -> dict[str, np.ndarray]:
    """Relative error per coordinate for every parameter on ``tape``."""
    tape.forward(bindings, output=loss)
    analytic = tape.backward(loss)
    return {
        name: relative_errors(analytic[name], numeric_gradient(tape, loss, bindings, name, h))
        for name in tape.param_names
    }


def layer_problem(relax, x, y_ref, noise: dict, tau: float = 1.0, kappa: float = 1.0):
    """Tape for ``mean((x @ w_soft.T - y_ref)**2)`` with frozen noise; returns ``(tape, loss, bindings)``."""
    tape = Tape()
    t, k = tape.input("tau"), tape.input("kappa")
    w = relax.build(tape, t, k)
    xin, yin = tape.input("x"), tape.input("y_ref")
    resid = tape.sub(tape.matmul(xin, tape.transpose(w)), yin)
    loss = tape.hadamard(tape.frobenius_sq(resid), tape.input("inv_count"))
    binds = relax.bindings(noise)
    binds.update(tau=tau, kappa=kappa, x=np.asarray(x, np.float64), y_ref=np.asarray(y_ref, np.float64))
    binds["inv_count"] = 1.0 / np.size(y_ref)
    return tape, loss, binds
