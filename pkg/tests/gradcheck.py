"""Finite-difference oracles shared by the test modules."""

from __future__ import annotations

import numpy as np

from sdfenc.diffcore import ParamStore, backward


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      rel_tol: float = 1e-4, abs_tol: float = 1e-7,
                      small: float = 1e-3, label: str = "") -> None:
    """Relative comparison, absolute below the small-gradient threshold."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    denom = np.abs(numeric)
    use_abs = denom < small
    diff = np.abs(analytic - numeric)
    rel_ok = diff <= rel_tol * np.maximum(denom, 1e-300)
    abs_ok = diff <= abs_tol
    ok = np.where(use_abs, abs_ok | rel_ok, rel_ok | abs_ok)
    if not ok.all():
        idx = np.unravel_index(int(np.argmax(~ok)), ok.shape)
        raise AssertionError(
            f"gradient mismatch {label} at {idx}: analytic={analytic[idx]!r} "
            f"numeric={numeric[idx]!r}"
        )


def check_param_grads(store: ParamStore, loss_fn, h: float = 1e-5,
                      rel_tol: float = 1e-4) -> None:
    """Compare backward() gradients of loss_fn() against central differences.

    loss_fn must rebuild the loss from the store's current data each call.
    """
    store.zero_grad()
    loss = loss_fn()
    backward(loss)
    # leaves the loss does not reach keep grad=None; that means zero
    analytic = {
        n: (np.zeros(v.shape) if v.grad is None else np.array(v.grad, copy=True))
        for n, v in store.items()
    }

    for name, v in store.items():
        flat = v.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            num[i] = (fp - fm) / (2 * h)
        assert_grad_close(analytic[name].reshape(-1), num,
                          rel_tol=rel_tol, label=name)
    store.zero_grad()
