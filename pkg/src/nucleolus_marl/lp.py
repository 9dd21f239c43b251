"""Dense linear programming with dual values.

Thin wrapper around HiGHS (through :func:`scipy.optimize.linprog`) that
returns a status flag instead of raising, so callers such as the sequential
nucleolus scheme can decide what an infeasible or unbounded level means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL = "numerical"

_STATUS = {0: OPTIMAL, 1: NUMERICAL, 2: INFEASIBLE, 3: UNBOUNDED, 4: NUMERICAL}


@dataclass
class LPResult:
    """Outcome of :func:`solve_linear_program`.

    ``ineq_duals`` and ``eq_duals`` follow the textbook sign convention for a
    minimisation with ``A_ub x <= b_ub``: inequality duals are nonnegative and
    a positive value means the constraint binds at every optimum.
    """

    status: str
    x: np.ndarray | None = None
    fun: float | None = None
    ineq_duals: np.ndarray = field(default_factory=lambda: np.empty(0))
    eq_duals: np.ndarray = field(default_factory=lambda: np.empty(0))
    message: str = ""
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def solve_linear_program(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None) -> LPResult:
    """Minimise ``c @ x`` subject to ``A_ub x <= b_ub`` and ``A_eq x = b_eq``.

    Variables are free unless ``bounds`` says otherwise (note this differs
    from scipy's nonnegative default).
    """
    c = np.asarray(c, dtype=float)
    if bounds is None:
        bounds = [(None, None)] * c.size
    res = linprog(
        c,
        A_ub=None if A_ub is None or len(A_ub) == 0 else np.asarray(A_ub, dtype=float),
        b_ub=None if b_ub is None or len(b_ub) == 0 else np.asarray(b_ub, dtype=float),
        A_eq=None if A_eq is None or len(A_eq) == 0 else np.asarray(A_eq, dtype=float),
        b_eq=None if b_eq is None or len(b_eq) == 0 else np.asarray(b_eq, dtype=float),
        bounds=bounds,
        method="highs",
    )
    status = _STATUS.get(res.status, NUMERICAL)
    if status != OPTIMAL:
        return LPResult(status=status, message=res.message, iterations=int(getattr(res, "nit", 0)))

    # HiGHS marginals are d(obj)/d(rhs): <= 0 for binding "<=" rows of a min.
    ineq = getattr(res, "ineqlin", None)
    eq = getattr(res, "eqlin", None)
    return LPResult(
        status=status,
        x=np.asarray(res.x, dtype=float),
        fun=float(res.fun),
        ineq_duals=-np.asarray(ineq.marginals, dtype=float) if ineq is not None else np.empty(0),
        eq_duals=np.asarray(eq.marginals, dtype=float) if eq is not None else np.empty(0),
        message=res.message,
        iterations=int(res.nit),
    )
