"""Limited-memory BFGS with a strong-Wolfe line search.

Works on a single torch tensor of any shape; the objective is a callable
returning a scalar tensor and gradients are taken with autograd.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import torch


@dataclass
class LBFGSResult:
    x: torch.Tensor
    value: float
    trace: list = field(default_factory=list)
    n_iter: int = 0
    n_evals: int = 0
    line_search_failed: bool = False


def _value_and_grad(fn, x):
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        f = fn(x)
        if f.requires_grad:
            (g,) = torch.autograd.grad(f, x, allow_unused=True)
        else:
            g = None
    if g is None:
        g = torch.zeros_like(x)
    return float(f.detach()), g.detach()


def _dot(a, b):
    return float((a * b).sum())


def _cubic_min(a1, f1, g1, a2, f2, g2, lo, hi):
    """Minimiser of the cubic through two points with slopes, clipped to ``[lo, hi]``."""
    d1 = g1 + g2 - 3.0 * (f1 - f2) / (a1 - a2)
    disc = d1 * d1 - g1 * g2
    if disc < 0:
        return 0.5 * (lo + hi)
    d2 = disc ** 0.5
    if a1 <= a2:
        a = a2 - (a2 - a1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
    else:
        a = a1 - (a1 - a2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
    if a != a:  # nan
        return 0.5 * (lo + hi)
    return min(max(a, lo), hi)


def _strong_wolfe(phi, f0, dphi0, a1, c1, c2, max_ls, tol_change):
    """Bracketing + zoom line search (Nocedal & Wright, Alg. 3.5/3.6).

    ``phi(a)`` returns ``(f, dphi, grad)``. Returns ``(a, f, grad, ok, evals)``;
    on failure ``a`` is the best sufficient-decrease point seen (0 if none).
    """
    evals = 0
    best = (0.0, f0, None)

    def note(a, f, g):
        nonlocal best
        if f < best[1] and f <= f0 + c1 * a * dphi0:
            best = (a, f, g)

    a_prev, f_prev, d_prev = 0.0, f0, dphi0
    a = a1
    lo = hi = None
    for i in range(max_ls):
        f, d, g = phi(a)
        evals += 1
        note(a, f, g)
        if f > f0 + c1 * a * dphi0 or (i > 0 and f >= f_prev):
            lo, hi = (a_prev, f_prev, d_prev), (a, f, d)
            break
        if abs(d) <= -c2 * dphi0:
            return a, f, g, True, evals
        if d >= 0:
            lo, hi = (a, f, d), (a_prev, f_prev, d_prev)
            break
        a_next = _cubic_min(a_prev, f_prev, d_prev, a, f, d, a + 0.01 * (a - a_prev), 10.0 * a)
        a_prev, f_prev, d_prev = a, f, d
        a = a_next
    else:
        return (*best, False, evals)

    while evals < max_ls:
        (al, fl, dl), (ah, fh, dh) = lo, hi
        if abs(ah - al) < tol_change:
            break
        left, right = min(al, ah), max(al, ah)
        a = _cubic_min(al, fl, dl, ah, fh, dh, left, right)
        # keep trial points away from the bracket ends
        margin = 0.1 * (right - left)
        if min(a - left, right - a) < margin:
            a = 0.5 * (left + right)
        f, d, g = phi(a)
        evals += 1
        note(a, f, g)
        if f > f0 + c1 * a * dphi0 or f >= fl:
            hi = (a, f, d)
        else:
            if abs(d) <= -c2 * dphi0:
                return a, f, g, True, evals
            if d * (ah - al) >= 0:
                hi = lo
            lo = (a, f, d)
    return (*best, False, evals)


def lbfgs_minimize(objective: Callable[[torch.Tensor], torch.Tensor], x0: torch.Tensor, steps: int = 5,
                   history: int = 10, c1: float = 1e-4, c2: float = 0.1, max_ls: int = 25,
                   tolerance_grad: float = 1e-12, tolerance_change: float = 1e-14) -> LBFGSResult:
    """Run at most ``steps`` outer L-BFGS iterations from ``x0``.

    Accepted iterates never increase the objective. If a line search fails the
    best point found so far is returned with ``line_search_failed=True``.
    """
    x = x0.detach().clone()
    f, g = _value_and_grad(objective, x)
    if not (math.isfinite(f) and bool(torch.isfinite(g).all())):
        raise ValueError(f"objective not finite at x0 (value {f})")
    res = LBFGSResult(x=x, value=f, trace=[f], n_evals=1)
    if steps <= 0 or float(g.abs().max()) <= tolerance_grad:
        return res

    s_hist, y_hist, rho_hist = deque(maxlen=history), deque(maxlen=history), deque(maxlen=history)
    for it in range(steps):
        # two-loop recursion
        q = -g
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * _dot(s, q)
            alphas.append(a)
            q = q - a * y
        if s_hist:
            gamma = _dot(s_hist[-1], y_hist[-1]) / _dot(y_hist[-1], y_hist[-1])
            q = q * gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * _dot(y, q)
            q = q + (a - b) * s
        d = q
        gtd = _dot(g, d)
        if gtd > -tolerance_change:
            break
        a0 = min(1.0, 1.0 / float(g.abs().sum())) if it == 0 else 1.0

        def phi(a, x=x, d=d):
            fa, ga = _value_and_grad(objective, x + a * d)
            return fa, _dot(ga, d), ga

        a, f_new, g_new, ok, evals = _strong_wolfe(phi, f, gtd, a0, c1, c2, max_ls, tolerance_change)
        res.n_evals += evals
        if a > 0 and g_new is not None and f_new <= f:
            s = a * d
            y = g_new - g
            sy = _dot(s, y)
            if sy > 1e-10:
                s_hist.append(s)
                y_hist.append(y)
                rho_hist.append(1.0 / sy)
            x = x + s
            f_prev, f, g = f, f_new, g_new
            res.trace.append(f)
            res.n_iter = it + 1
        else:
            ok = False
        if not ok:
            res.line_search_failed = True
            break
        if float(g.abs().max()) <= tolerance_grad or abs(f_prev - f) < tolerance_change:
            break
    res.x, res.value = x, f
    return res
