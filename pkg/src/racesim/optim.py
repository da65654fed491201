"""Limited-memory BFGS minimiser with a backtracking line search.

Written for smooth, nearly quadratic negative log-posteriors with a few
hundred to a few thousand parameters. A diagonal preconditioner (an estimate
of the Hessian diagonal) seeds the inverse-Hessian approximation.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str
    history: list[float] = field(default_factory=list)

    @property
    def grad_max_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0


def lbfgs(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    *,
    max_iter: int = 2000,
    rel_tol: float = 1e-8,
    grad_tol: float = 1e-5,
    memory: int = 20,
    precond: np.ndarray | None = None,
    max_halvings: int = 60,
) -> OptimizeResult:
    """Minimise ``fun`` (returning value and gradient) from ``x0``.

    Converged when the last relative decrease is below ``rel_tol`` *and* the
    gradient max-norm is below ``grad_tol``. Trial points with a non-finite
    objective are rejected and the step halved. Steps are accepted on the
    Armijo condition, or -- once the decrease is lost in floating-point noise
    -- on an approximate Wolfe test that only looks at the directional
    derivative.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizationError("objective is not finite at the starting point", {"x0": x.tolist()})
    d0 = np.ones_like(x) if precond is None else 1.0 / np.maximum(np.asarray(precond, dtype=float), 1e-12)
    S: deque = deque(maxlen=memory)
    Y: deque = deque(maxlen=memory)
    history = [f]
    rel = np.inf
    it = 0
    message = "max iterations reached"
    converged = False
    while it < max_iter:
        gmax = float(np.max(np.abs(g))) if g.size else 0.0
        if gmax < grad_tol and rel < rel_tol:
            converged, message = True, "converged"
            break
        if gmax == 0.0:
            converged, message = True, "zero gradient"
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if S:
            s, y = S[-1], Y[-1]
            gamma = (s @ y) / (y @ (d0 * y))
            r = gamma * d0 * q
        else:
            r = d0 * q
        for (s, y), a in zip(zip(S, Y), reversed(alphas)):
            rho = 1.0 / (y @ s)
            b = rho * (y @ r)
            r += s * (a - b)
        d = -r
        slope = g @ d
        if not slope < 0:
            S.clear()
            Y.clear()
            d = -d0 * g
            slope = g @ d

        step = 1.0
        noise = 1e-12 * max(abs(f), 1.0)
        accepted = False
        for _ in range(max_halvings):
            xn = x + step * d
            fn, gn = fun(xn)
            if np.isfinite(fn) and np.all(np.isfinite(gn)):
                if fn <= f + 1e-4 * step * slope:
                    accepted = True
                    break
                dn = gn @ d
                if fn <= f + noise and 0.9 * slope <= dn <= -0.1 * slope:
                    accepted = True
                    break
                if fn <= f + noise and abs(dn) <= 0.1 * abs(slope):
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            if gmax < grad_tol:
                converged, message = True, "converged (line search at noise floor)"
                break
            raise OptimizationError(
                "line search failed to find an acceptable step",
                {"iteration": it, "f": f, "grad_max_norm": gmax, "step": step},
            )
        s = xn - x
        y = gn - g
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            S.append(s)
            Y.append(y)
        rel = abs(f - fn) / max(abs(f), abs(fn), 1.0)
        x, f, g = xn, fn, gn
        history.append(f)
        it += 1
    else:
        gmax = float(np.max(np.abs(g))) if g.size else 0.0
        if gmax < grad_tol and rel < rel_tol:
            converged, message = True, "converged"
    if not converged:
        log.warning("L-BFGS stopped without convergence after %d iterations (|g|max=%.3g)", it, np.max(np.abs(g)))
    return OptimizeResult(x, float(f), g, it, converged, message, history)
