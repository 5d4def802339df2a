"""作業集合の全列挙による参照解（検証用）.

小規模なQP（n_vars <= 6, n_cons <= 10 程度）専用。各作業集合について
鞍点系を直接解き、KKT条件を満たすものを探す。H が正定値なので
KKT点は一意で、それが最適解になる。
"""

import itertools
import logging
from typing import Optional

import numpy as np

from app.errors import Infeasible
from app.solver.qp_core import ParametricQp, QpSolution, WorkingSet, eval_bounds, eval_gradient

logger = logging.getLogger(__name__)

# 列挙解の実行可能性判定の許容誤差
ORACLE_TOL = 1e-9


def _solve_equality(H: np.ndarray, g: np.ndarray, G_A: np.ndarray, b_A: np.ndarray):
    """min 1/2 U^T H U + g^T U  s.t. G_A U = b_A を鞍点行列で直接解く."""
    n = H.shape[0]
    k = G_A.shape[0]
    if k and np.linalg.matrix_rank(G_A) < k:
        return None
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = H
    kkt[:n, n:] = -G_A.T
    kkt[n:, :n] = G_A
    rhs = np.concatenate([-g, b_A])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return None
    return sol[:n], sol[n:]


def brute_force_solve(qp: ParametricQp, x0, tol: float = ORACLE_TOL) -> QpSolution:
    """作業集合を小さい順に列挙し、最初に見つかったKKT点を返す.

    Raises:
        Infeasible: どの作業集合もKKT条件を満たさない場合.
    """
    x0 = np.asarray(x0, dtype=float)
    g = eval_gradient(qp, x0)
    b = eval_bounds(qp, x0)
    scale = max(1.0, float(np.max(np.abs(b), initial=0.0)))

    for size in range(min(qp.n_vars, qp.n_cons) + 1):
        for active in itertools.combinations(range(qp.n_cons), size):
            idx = list(active)
            solved = _solve_equality(qp.H, g, qp.G[idx], b[idx])
            if solved is None:
                continue
            primal, lam = solved
            if size and lam.min() < -tol * scale:
                continue
            if np.min(qp.G @ primal - b, initial=0.0) < -tol * scale:
                continue
            dual = np.zeros(qp.n_cons)
            dual[idx] = np.maximum(lam, 0.0)
            return QpSolution(
                primal=primal,
                dual=dual,
                working_set=WorkingSet(tuple(active), qp.n_cons),
                param=x0.copy(),
            )
    raise Infeasible("no working set satisfies the KKT conditions")


def objective_gap(qp: ParametricQp, x0, primal_a: np.ndarray, primal_b: np.ndarray) -> float:
    return abs(qp.objective(primal_a, x0) - qp.objective(primal_b, x0))


def compare_with_oracle(qp: ParametricQp, x0, primal: np.ndarray) -> Optional[float]:
    """primal と参照解の最大差（主変数と目的関数値の大きい方）を返す. 実行不能なら None."""
    try:
        ref = brute_force_solve(qp, x0)
    except Infeasible:
        return None
    return max(
        float(np.max(np.abs(primal - ref.primal), initial=0.0)),
        objective_gap(qp, x0, primal, ref.primal),
    )
