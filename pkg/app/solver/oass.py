"""オンラインアクティブセット法（OASS）.

解いたQP(x0)から QP(x0_new) へ、パラメータ空間の線分
x~0(τ) = x0 + τ Δx0 (0 <= τ <= 1) に沿って最適解を追跡する。
解は τ について区分線形で、区切り点ごとに作業集合を1つずつ更新する。
途中で打ち切っても、その時点の x~0(τ) に対する最適解が残る。
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np

from app.config import (
    COLD_START_SLACK,
    DEPENDENCY_TOL,
    ITERATION_FACTOR,
    KKT_TOL,
    TAU_TOL,
    ZERO_TOL,
)
from app.errors import Infeasible, IterationLimit, NotOptimalStart
from app.solver.qp_core import (
    KktReport,
    ParametricQp,
    QpSolution,
    WorkingSet,
    check_kkt,
    eval_bounds,
    eval_gradient,
    kkt_violations,
    solve_kkt,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HomotopyDelta:
    """線分全体にわたるデータの変化量.

    通常は dg = F dx0, db = E dx0。コールドスタートの補助ホモトピーでは
    dx0 = 0 で、dg / db は補助データから目標データへの差になる。
    """

    dx0: np.ndarray
    dg: np.ndarray
    db: np.ndarray


@dataclass
class HomotopyState:
    """ホモトピーの途中状態. 所有者は1つで、advance が直接更新する.

    Attributes:
        solution (QpSolution): τ における最適解. param は x~0(τ).
        tau (float): 線分上の進捗 [0, 1].
        target (np.ndarray): 目標パラメータ x0_new.
        changes (int): このホモトピーで行った作業集合の変更回数.
    """

    solution: QpSolution
    tau: float
    target: np.ndarray
    delta: HomotopyDelta
    origin_param: np.ndarray
    origin_grad: np.ndarray
    origin_bounds: np.ndarray
    changes: int = 0
    iterations: int = 0
    breakpoints: list = field(default_factory=list)

    def grad_at(self, tau: float) -> np.ndarray:
        return self.origin_grad + tau * self.delta.dg

    def bounds_at(self, tau: float) -> np.ndarray:
        return self.origin_bounds + tau * self.delta.db

    def param_at(self, tau: float) -> np.ndarray:
        return self.origin_param + tau * self.delta.dx0

    @property
    def finished(self) -> bool:
        return self.tau >= 1.0

    def kkt_report(self, qp: ParametricQp, tol: float = KKT_TOL) -> KktReport:
        """現在の τ における補間データ (g~(τ), b~(τ)) でのKKT違反量."""
        sol = self.solution
        return kkt_violations(
            qp,
            sol.primal,
            sol.dual,
            sol.working_set,
            self.grad_at(self.tau),
            self.bounds_at(self.tau),
            tol,
        )


class StepKind(str, Enum):
    REACHED = "reached"
    PRIMAL_BLOCK = "primal_block"
    DUAL_BLOCK = "dual_block"


@dataclass(frozen=True)
class StepOutcome:
    """1ステップの最大ステップ長と、それを決めた制約."""

    kind: StepKind
    tau_step: float
    index: Optional[int] = None


def begin_homotopy(prev: QpSolution, x0_new, qp: ParametricQp) -> HomotopyState:
    """prev から x0_new へのホモトピーを τ = 0 で開始する.

    Raises:
        NotOptimalStart: prev が QP(prev.param) のKKT条件を満たさない場合.
    """
    report = check_kkt(qp, prev, KKT_TOL)
    if not report.ok:
        raise NotOptimalStart(
            f"start point is not optimal (worst KKT violation {report.worst:.3e})"
        )
    target = np.asarray(x0_new, dtype=float).copy()
    origin = prev.param.copy()
    dx0 = target - origin
    delta = HomotopyDelta(dx0=dx0, dg=qp.F @ dx0, db=qp.E @ dx0)
    return HomotopyState(
        solution=prev.copy(),
        tau=0.0,
        target=target,
        delta=delta,
        origin_param=origin,
        origin_grad=eval_gradient(qp, origin),
        origin_bounds=eval_bounds(qp, origin),
    )


def step_directions(hs: HomotopyState, qp: ParametricQp) -> Tuple[np.ndarray, np.ndarray]:
    """現在の作業集合での主・双対の方向 (dU, dλ_A) を τ 単位で返す."""
    ws = hs.solution.working_set
    return solve_kkt(qp, ws, hs.delta.dg, hs.delta.db[list(ws.active)])


def max_step(
    hs: HomotopyState, directions: Tuple[np.ndarray, np.ndarray], qp: ParametricQp
) -> StepOutcome:
    """残り区間 1 - τ に対する最大ステップ長を求める.

    同じステップ長なら双対（制約の除去）を優先し、次に添字の小さい制約を選ぶ。
    区間の終端で（丸め誤差の範囲内で）阻止される場合は到達として扱う。
    """
    d_primal, d_lambda = directions
    sol = hs.solution
    remaining = 1.0 - hs.tau
    candidates = []

    # 主の阻止: 非アクティブ制約がタイトになる
    inactive = list(sol.working_set.inactive)
    if inactive:
        G_I = qp.G[inactive]
        db_I = hs.delta.db[inactive]
        slack = G_I @ sol.primal - hs.bounds_at(hs.tau)[inactive]
        rate = G_I @ d_primal - db_I
        rate_scale = np.maximum(np.abs(G_I) @ np.abs(d_primal) + np.abs(db_I), 1.0)
        for k, i in enumerate(inactive):
            if rate[k] < -ZERO_TOL * rate_scale[k]:
                candidates.append((max(slack[k], 0.0) / -rate[k], 1, i))

    # 双対の阻止: アクティブ制約の乗数が0になる
    for k, j in enumerate(sol.working_set.active):
        if d_lambda[k] < -ZERO_TOL:
            candidates.append((max(sol.dual[j], 0.0) / -d_lambda[k], 0, j))

    if candidates:
        t, kind, index = min(candidates)
        if t < remaining - ZERO_TOL * max(1.0, remaining):
            return StepOutcome(
                kind=StepKind.DUAL_BLOCK if kind == 0 else StepKind.PRIMAL_BLOCK,
                tau_step=float(t),
                index=index,
            )
    return StepOutcome(kind=StepKind.REACHED, tau_step=remaining)


def _dependency(qp: ParametricQp, ws: WorkingSet, index: int) -> Optional[np.ndarray]:
    """G_index がアクティブ行の一次結合なら係数 α を返す. 独立なら None."""
    if not len(ws):
        return None
    row = qp.G[index]
    G_A = qp.G[list(ws.active)]
    alpha, *_ = np.linalg.lstsq(G_A.T, row, rcond=None)
    residual = np.linalg.norm(G_A.T @ alpha - row)
    if residual <= DEPENDENCY_TOL * max(1.0, float(np.linalg.norm(row))):
        return alpha
    return None


def _refresh(hs: HomotopyState, qp: ParametricQp, fresh: Optional[int] = None) -> None:
    """現在の作業集合と τ での補間データからKKT系を解き直し、丸め誤差の蓄積を防ぐ."""
    sol = hs.solution
    ws = sol.working_set
    active = list(ws.active)
    primal, lam_active = solve_kkt(qp, ws, hs.grad_at(hs.tau), hs.bounds_at(hs.tau)[active])
    dual = np.zeros(qp.n_cons)
    dual[active] = np.maximum(lam_active, 0.0)
    if fresh is not None:
        dual[fresh] = 0.0
    sol.primal = primal
    sol.dual = dual
    sol.param = hs.param_at(hs.tau)


def _apply_block(hs: HomotopyState, qp: ParametricQp, outcome: StepOutcome) -> int:
    """阻止した制約で作業集合を更新し、変更回数を返す."""
    sol = hs.solution
    ws = sol.working_set
    index = outcome.index

    if outcome.kind == StepKind.DUAL_BLOCK:
        sol.working_set = ws.remove(index)
        sol.dual[index] = 0.0
        _refresh(hs, qp)
        logger.debug(f"tau={hs.tau:.6f}: removed constraint {index}")
        return 1

    alpha = _dependency(qp, ws, index)
    if alpha is None:
        sol.working_set = ws.add(index)
        _refresh(hs, qp, fresh=index)
        logger.debug(f"tau={hs.tau:.6f}: added constraint {index}")
        return 1

    # 一次従属: λ_j / α_j が最小のアクティブ制約 j と交換する
    active = list(ws.active)
    ratios = [
        (sol.dual[j] / alpha[k], j) for k, j in enumerate(active) if alpha[k] > ZERO_TOL
    ]
    if not ratios:
        # 終端で一次従属な行が重なっただけ（等式を不等式の対で書いた場合など）
        if 1.0 - hs.tau <= TAU_TOL:
            hs.tau = 1.0
            _refresh(hs, qp)
            logger.debug(f"constraint {index} becomes tight exactly at the target; kept inactive")
            return 0
        raise Infeasible(
            f"constraint {index} blocks the homotopy at tau={hs.tau:.6f} "
            f"and no active constraint can leave"
        )
    shift, leaving = min(ratios)
    shift = max(shift, 0.0)
    sol.dual[active] -= shift * alpha
    sol.dual[leaving] = 0.0
    sol.dual[index] = shift
    sol.working_set = ws.exchange(leaving, index)
    _refresh(hs, qp)
    logger.debug(f"tau={hs.tau:.6f}: exchanged constraint {leaving} for {index}")
    return 2


def advance(
    hs: HomotopyState,
    qp: ParametricQp,
    budget: Optional[int] = None,
    observer: Optional[Callable[[HomotopyState], None]] = None,
) -> Tuple[HomotopyState, bool]:
    """ホモトピーを目標まで、または変更回数の予算が尽きるまで進める.

    予算は作業集合を変更する前に確認する。予算が尽きても次の区切り点までは
    進めるので、返る状態はその τ で最適になっている。

    Args:
        hs: 進めるホモトピー状態（直接更新される）.
        qp: 対象のQP.
        budget: この呼び出しで許す作業集合の変更回数. None なら無制限.
        observer: 区切り点ごとに呼ばれるコールバック.

    Returns:
        Tuple[HomotopyState, bool]: (hs, 目標に到達したか).

    Raises:
        IterationLimit: 反復上限、または連続ゼロステップ上限を超えた場合.
        Infeasible: 目標パラメータのQPが実行不能な場合.
    """
    cap = ITERATION_FACTOR * (qp.n_cons + 1)
    used = 0
    zero_steps = 0

    while not hs.finished:
        hs.iterations += 1
        if hs.iterations > cap:
            raise IterationLimit(f"homotopy exceeded {cap} iterations at tau={hs.tau:.6f}")

        d_primal, d_lambda = step_directions(hs, qp)
        outcome = max_step(hs, (d_primal, d_lambda), qp)

        if outcome.kind == StepKind.REACHED:
            hs.tau = 1.0
            _refresh(hs, qp)
            hs.solution.param = hs.target.copy()
            if observer is not None:
                observer(hs)
            break

        t = outcome.tau_step
        if t <= ZERO_TOL:
            zero_steps += 1
            if zero_steps > qp.n_cons:
                raise IterationLimit(
                    f"{zero_steps} consecutive zero-length steps at tau={hs.tau:.6f}"
                )
        else:
            zero_steps = 0

        sol = hs.solution
        active = list(sol.working_set.active)
        hs.tau = min(hs.tau + t, 1.0)
        sol.primal = sol.primal + t * d_primal
        sol.dual[active] = sol.dual[active] + t * d_lambda
        sol.param = hs.param_at(hs.tau)

        if budget is not None and used >= budget:
            _refresh(hs, qp)
            if observer is not None:
                observer(hs)
            logger.debug(f"change budget {budget} exhausted at tau={hs.tau:.6f}")
            return hs, False

        cost = _apply_block(hs, qp, outcome)
        used += cost
        hs.changes += cost
        hs.breakpoints.append(hs.tau)
        if hs.finished:
            hs.solution.param = hs.target.copy()
        if observer is not None:
            observer(hs)

    return hs, True


def hot_solve(prev: QpSolution, x0_new, qp: ParametricQp) -> Tuple[QpSolution, int]:
    """prev から QP(x0_new) の最適解まで無制限にホモトピーを進める."""
    hs = begin_homotopy(prev, x0_new, qp)
    advance(hs, qp)
    return hs.solution, hs.changes


def cold_solve(qp: ParametricQp, x0) -> Tuple[QpSolution, int]:
    """補助QPから QP(x0) へのホモトピーで、前回解なしに解く.

    補助QPは同じ H, G を持ち、U0 = 0 を内点最適解とする
    （勾配 -H U0、全制約に COLD_START_SLACK の余裕を持たせた下界）。

    Returns:
        Tuple[QpSolution, int]: (最適解, 作業集合の変更回数).
    """
    x0 = np.asarray(x0, dtype=float).copy()
    target_grad = eval_gradient(qp, x0)
    target_bounds = eval_bounds(qp, x0)

    start = np.zeros(qp.n_vars)
    aux_grad = -qp.H @ start
    aux_bounds = qp.G @ start - COLD_START_SLACK
    hs = HomotopyState(
        solution=QpSolution(
            primal=start,
            dual=np.zeros(qp.n_cons),
            working_set=WorkingSet.empty(qp.n_cons),
            param=x0.copy(),
        ),
        tau=0.0,
        target=x0,
        delta=HomotopyDelta(
            dx0=np.zeros_like(x0),
            dg=target_grad - aux_grad,
            db=target_bounds - aux_bounds,
        ),
        origin_param=x0.copy(),
        origin_grad=aux_grad,
        origin_bounds=aux_bounds,
    )
    advance(hs, qp)
    logger.debug(f"cold start finished with {hs.changes} working-set changes")
    return hs.solution, hs.changes
