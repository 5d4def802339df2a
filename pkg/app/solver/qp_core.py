"""パラメトリックQPのデータモデルとKKT系の求解.

QP(x0):  min 1/2 U^T H U + U^T g(x0)   s.t.  G U >= b(x0)
         g(x0) = F x0 + g_c,  b(x0) = W + E x0

制約はすべて下界形式 (G U >= b) で扱う。ラグランジュ乗数は λ >= 0 で、
停留条件は H U + g - G^T λ = 0 となる。
"""

import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import scipy.linalg as linalg

from app.config import KKT_TOL, RANK_TOL, SYMMETRY_TOL
from app.errors import DimensionMismatch, NotPositiveDefinite, RankDeficient

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ParametricQp:
    """x0 にアフィンに依存するQPの族. build_qp で生成する.

    Attributes:
        H (np.ndarray): 目的関数の曲率 [n_vars x n_vars]. 正定値対称.
        F (np.ndarray): 勾配の感度 [n_vars x n_state].
        g_c (np.ndarray): 勾配の定数項 [n_vars].
        G (np.ndarray): 制約の法線 [n_cons x n_vars].
        W (np.ndarray): 制約の定数項 [n_cons].
        E (np.ndarray): 制約の感度 [n_cons x n_state].
    """

    H: np.ndarray
    F: np.ndarray
    g_c: np.ndarray
    G: np.ndarray
    W: np.ndarray
    E: np.ndarray
    # Hのコレスキー分解（構築時に一度だけ計算してホモトピー全体で使い回す）
    h_factor: Tuple[np.ndarray, bool] = field(repr=False)

    @property
    def n_vars(self) -> int:
        return self.H.shape[0]

    @property
    def n_cons(self) -> int:
        return self.G.shape[0]

    @property
    def n_state(self) -> int:
        return self.F.shape[1]

    def h_solve(self, rhs: np.ndarray) -> np.ndarray:
        """H^{-1} rhs をキャッシュ済みの分解で計算する."""
        return linalg.cho_solve(self.h_factor, rhs)

    def objective(self, primal: np.ndarray, x0: np.ndarray) -> float:
        return float(0.5 * primal @ self.H @ primal + primal @ eval_gradient(self, x0))


@dataclass(frozen=True)
class WorkingSet:
    """等式として扱う制約行の集合（作業集合）.

    active は追加順を保つ。inactive はその補集合を昇順で返す。
    """

    active: Tuple[int, ...]
    n_cons: int

    def __post_init__(self):
        if len(set(self.active)) != len(self.active):
            raise ValueError(f"duplicate indices in working set: {self.active}")
        for i in self.active:
            if not 0 <= i < self.n_cons:
                raise ValueError(f"constraint index {i} out of range [0, {self.n_cons})")

    @classmethod
    def empty(cls, n_cons: int) -> "WorkingSet":
        return cls((), n_cons)

    @property
    def inactive(self) -> Tuple[int, ...]:
        members = set(self.active)
        return tuple(i for i in range(self.n_cons) if i not in members)

    def add(self, index: int) -> "WorkingSet":
        return WorkingSet(self.active + (index,), self.n_cons)

    def remove(self, index: int) -> "WorkingSet":
        if index not in self.active:
            raise ValueError(f"constraint {index} is not active")
        return WorkingSet(tuple(i for i in self.active if i != index), self.n_cons)

    def exchange(self, leaving: int, entering: int) -> "WorkingSet":
        """leaving の位置に entering を入れる."""
        if leaving not in self.active:
            raise ValueError(f"constraint {leaving} is not active")
        return WorkingSet(
            tuple(entering if i == leaving else i for i in self.active), self.n_cons
        )

    def __contains__(self, index: int) -> bool:
        return index in self.active

    def __len__(self) -> int:
        return len(self.active)


@dataclass
class QpSolution:
    """パラメータ param におけるQPの主・双対解.

    Attributes:
        primal (np.ndarray): U* [n_vars].
        dual (np.ndarray): λ* [n_cons]. 非アクティブ制約では0.
        working_set (WorkingSet): 最適作業集合.
        param (np.ndarray): 解が最適となるパラメータ x0 [n_state].
    """

    primal: np.ndarray
    dual: np.ndarray
    working_set: WorkingSet
    param: np.ndarray

    def copy(self) -> "QpSolution":
        return QpSolution(
            primal=self.primal.copy(),
            dual=self.dual.copy(),
            working_set=self.working_set,
            param=self.param.copy(),
        )


@dataclass(frozen=True)
class KktReport:
    """KKT条件の最大違反量."""

    primal: float
    dual: float
    stationarity: float
    complementarity: float
    tol: float

    @property
    def ok(self) -> bool:
        return max(self.primal, self.dual, self.stationarity, self.complementarity) <= self.tol

    @property
    def worst(self) -> float:
        return max(self.primal, self.dual, self.stationarity, self.complementarity)


def _as_matrix(name: str, value, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise DimensionMismatch(f"{name} has {arr.shape[0]} rows, expected {rows}")
    if cols is not None and arr.shape[1] != cols:
        raise DimensionMismatch(f"{name} has {arr.shape[1]} columns, expected {cols}")
    return arr


def _as_vector(name: str, value, length: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape[0] != length:
        raise DimensionMismatch(f"{name} has length {arr.shape[0]}, expected {length}")
    return arr


def build_qp(H, F, g_c, G, W, E) -> ParametricQp:
    """次元と対称性を検証し、Hを分解してParametricQpを生成する.

    Raises:
        DimensionMismatch: 次元の不整合、またはHの非対称.
        NotPositiveDefinite: Hのコレスキー分解に失敗した場合.
    """
    H = _as_matrix("H", H)
    n_vars = H.shape[0]
    if H.shape[1] != n_vars:
        raise DimensionMismatch(f"H must be square, got shape {H.shape}")
    F = _as_matrix("F", F, rows=n_vars)
    n_state = F.shape[1]
    g_c = _as_vector("g_c", g_c, n_vars)
    G = _as_matrix("G", G, cols=n_vars)
    n_cons = G.shape[0]
    W = _as_vector("W", W, n_cons)
    E = _as_matrix("E", E, rows=n_cons, cols=n_state)

    asymmetry = float(np.max(np.abs(H - H.T))) if n_vars else 0.0
    if asymmetry > SYMMETRY_TOL:
        raise DimensionMismatch(f"H is not symmetric (max |H - H^T| = {asymmetry:.3e})")
    if not np.all(np.isfinite(H)):
        raise NotPositiveDefinite("H contains non-finite entries")
    try:
        h_factor = linalg.cho_factor(H)
    except linalg.LinAlgError as e:
        raise NotPositiveDefinite(f"Cholesky factorization of H failed: {e}") from e

    return ParametricQp(H=H, F=F, g_c=g_c, G=G, W=W, E=E, h_factor=h_factor)


def eval_gradient(qp: ParametricQp, x0) -> np.ndarray:
    """g(x0) = F x0 + g_c."""
    x0 = _as_vector("x0", x0, qp.n_state)
    return qp.F @ x0 + qp.g_c


def eval_bounds(qp: ParametricQp, x0) -> np.ndarray:
    """b(x0) = W + E x0."""
    x0 = _as_vector("x0", x0, qp.n_state)
    return qp.W + qp.E @ x0


def solve_kkt(
    qp: ParametricQp, ws: WorkingSet, rhs_grad, rhs_bounds
) -> Tuple[np.ndarray, np.ndarray]:
    """作業集合に対する鞍点系を解く.

    [[H, G_A^T], [G_A, 0]] [dU; -dλ_A] = [-rhs_grad; rhs_bounds]

    Hの分解とシューア補元 S = G_A H^{-1} G_A^T のコレスキー分解で解く。

    Args:
        qp: 対象のQP.
        ws: 作業集合.
        rhs_grad: 勾配側の右辺 [n_vars].
        rhs_bounds: アクティブ制約側の右辺 [len(ws)].

    Returns:
        Tuple[np.ndarray, np.ndarray]: (dU, dλ_A). dλ_A は ws.active の順.

    Raises:
        RankDeficient: アクティブ行が一次従属な場合.
    """
    rhs_grad = _as_vector("rhs_grad", rhs_grad, qp.n_vars)
    active = list(ws.active)
    rhs_bounds = _as_vector("rhs_bounds", rhs_bounds, len(active))

    h_inv_grad = qp.h_solve(rhs_grad)
    if not active:
        return -h_inv_grad, np.zeros(0)

    G_A = qp.G[active]
    h_inv_gt = qp.h_solve(G_A.T)
    schur = G_A @ h_inv_gt
    schur = 0.5 * (schur + schur.T)
    try:
        s_factor = linalg.cho_factor(schur)
    except linalg.LinAlgError as e:
        raise RankDeficient(f"active rows {active} are linearly dependent") from e
    pivots = np.diag(s_factor[0]) ** 2
    if pivots.min() <= RANK_TOL * pivots.max():
        raise RankDeficient(f"active rows {active} are linearly dependent")

    d_lambda = linalg.cho_solve(s_factor, rhs_bounds + G_A @ h_inv_grad)
    d_primal = h_inv_gt @ d_lambda - h_inv_grad
    return d_primal, d_lambda


def kkt_violations(
    qp: ParametricQp,
    primal: np.ndarray,
    dual: np.ndarray,
    ws: WorkingSet,
    grad: np.ndarray,
    bounds: np.ndarray,
    tol: float = KKT_TOL,
) -> KktReport:
    """任意の勾配・制約ベクトルに対するKKT違反量を計算する."""
    slack = qp.G @ primal - bounds
    active = list(ws.active)
    inactive = list(ws.inactive)

    primal_violation = float(np.max(-slack, initial=0.0))
    if active:
        primal_violation = max(primal_violation, float(np.max(np.abs(slack[active]))))
    dual_violation = float(np.max(-dual, initial=0.0))
    if inactive:
        dual_violation = max(dual_violation, float(np.max(np.abs(dual[inactive]))))
    residual = qp.H @ primal + grad - qp.G.T @ dual
    stationarity = float(np.max(np.abs(residual), initial=0.0))
    complementarity = float(np.max(np.abs(dual * slack), initial=0.0))

    return KktReport(
        primal=primal_violation,
        dual=dual_violation,
        stationarity=stationarity,
        complementarity=complementarity,
        tol=tol,
    )


def check_kkt(qp: ParametricQp, sol: QpSolution, tol: float = KKT_TOL) -> KktReport:
    """sol が QP(sol.param) の最適解かどうかを診断する."""
    return kkt_violations(
        qp,
        sol.primal,
        sol.dual,
        sol.working_set,
        eval_gradient(qp, sol.param),
        eval_bounds(qp, sol.param),
        tol,
    )


def cold_start(qp: ParametricQp, x0) -> QpSolution:
    """前回解なしで QP(x0) を解く（補助ホモトピー経由）."""
    from app.solver.oass import cold_solve

    solution, _ = cold_solve(qp, x0)
    return solution
