"""ローリングホライズンの信号制御器.

- classic_cycle: サイクル終了時に1回だけQPを解く（前回解からのホットスタート）.
- interval_tick: サイクルを n_itr 個のサンプル区間に分け、区間ごとにホモトピーの
  目標を最新の観測に付け替える. 最後の区間の解だけを実際に適用する.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.config import (
    DEFAULT_CYCLE_TIME,
    DEFAULT_G_MAX,
    DEFAULT_G_MIN,
    DEFAULT_HORIZON,
    DEFAULT_N_ITR,
    DEFAULT_R_WEIGHT,
    EMA_SMOOTHING,
    N_ITR_CEILING,
)
from app.errors import Infeasible, IterationLimit, NotOptimalStart, RankDeficient
from app.schemas.network import TrafficNetwork
from app.solver.oass import HomotopyState, advance, begin_homotopy, cold_solve, hot_solve
from app.solver.qp_core import ParametricQp, QpSolution
from app.traffic.sfm_model import StateSpace, condense, first_input, linearize

logger = logging.getLogger(__name__)

# 数値誤差によるプランの微小な制約違反を丸める幅 [s]
PLAN_REPAIR_TOL = 1e-6

# ホットスタートを諦めてコールドスタートに切り替える例外
_RESTART_ERRORS = (IterationLimit, NotOptimalStart, RankDeficient)


@dataclass(frozen=True)
class MpcConfig:
    """MPCの設定.

    Attributes:
        horizon (int): 予測ホライズン N [サイクル].
        cycle_time (float): サイクル長 T_c [s].
        n_itr (int): 1サイクルのサンプル区間数.
        u_min (float): 最小青時間 [s].
        u_max (float): 最大青時間 [s].
        weights: (Q, R, P). None なら default_weights と同じ規則で決める.
        r_weight (float): 既定の R の対角成分.
        x_min: 予測状態の下限. None なら下限制約なし.
        budget (int | None): 途中区間での作業集合変更回数の上限. None は無制限.
        n_itr_ceiling (int): choose_intervals の上限.
    """

    horizon: int = DEFAULT_HORIZON
    cycle_time: float = DEFAULT_CYCLE_TIME
    n_itr: int = DEFAULT_N_ITR
    u_min: float = DEFAULT_G_MIN
    u_max: float = DEFAULT_G_MAX
    weights: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None
    r_weight: float = DEFAULT_R_WEIGHT
    x_min: Optional[float] = None
    budget: Optional[int] = None
    n_itr_ceiling: int = N_ITR_CEILING

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {self.horizon}")
        if self.n_itr < 1:
            raise ValueError(f"n_itr must be at least 1, got {self.n_itr}")
        if self.cycle_time <= 0:
            raise ValueError(f"cycle time must be positive, got {self.cycle_time}")
        if self.u_min > self.u_max:
            raise ValueError(f"u_min {self.u_min} exceeds u_max {self.u_max}")
        if self.budget is not None and self.budget < 0:
            raise ValueError(f"budget must be non-negative, got {self.budget}")

    @property
    def sample_interval(self) -> Fraction:
        """T_s = T_c / n_itr（厳密な有理数）."""
        return Fraction(self.cycle_time) / self.n_itr


@dataclass
class ControllerState:
    """1つのネットワークを制御する制御器の状態. 所有者は1つ.

    Attributes:
        qp (ParametricQp): 縮約済みのQP.
        last_solution (QpSolution | None): 最後に最後まで解いた解.
        homotopy (HomotopyState | None): 予算で打ち切られた途中のホモトピー.
        interval_changes (List[int]): 現在のサイクルの区間ごとの変更回数.
        change_log (List[List[int]]): 完了したサイクルの区間ごとの変更回数.
    """

    net: TrafficNetwork
    cfg: MpcConfig
    ss: StateSpace
    qp: ParametricQp
    last_solution: Optional[QpSolution] = None
    homotopy: Optional[HomotopyState] = None
    interval_changes: List[int] = field(default_factory=list)
    change_log: List[List[int]] = field(default_factory=list)
    fallback_count: int = 0


def create_controller(net: TrafficNetwork, cfg: MpcConfig) -> ControllerState:
    if abs(net.cycle_time - cfg.cycle_time) > 1e-9:
        raise ValueError(
            f"network cycle time {net.cycle_time} differs from controller cycle time {cfg.cycle_time}"
        )
    ss = linearize(net)
    qp = condense(ss, cfg)
    logger.info(
        f"Controller ready: {qp.n_vars} variables, {qp.n_cons} constraints, "
        f"horizon {cfg.horizon}, n_itr {cfg.n_itr}"
    )
    return ControllerState(net=net, cfg=cfg, ss=ss, qp=qp)


def fallback_plan(net: TrafficNetwork, cfg: Optional[MpcConfig] = None) -> np.ndarray:
    """各交差点で (T_c - L_j) を全フェーズに均等配分し、[u_min, u_max] に収める.

    均等配分が u_min を下回る場合はサイクル制約を優先する.
    """
    u_min = DEFAULT_G_MIN if cfg is None else cfg.u_min
    u_max = DEFAULT_G_MAX if cfg is None else cfg.u_max
    plan = []
    for junction in net.junctions:
        share = (net.cycle_time - junction.lost_time) / len(junction.phases)
        if share < u_min:
            logger.warning(
                f"junction {junction.id}: equal split {share:.2f} s is below u_min {u_min} s"
            )
        plan += [min(share, u_max)] * len(junction.phases)
    return np.array(plan)


def _repair_plan(ctrl: ControllerState, u: np.ndarray) -> np.ndarray:
    """数値誤差による微小な違反を取り除き、上下限とサイクル制約を厳密に満たす."""
    cfg = ctrl.cfg
    u = np.clip(u, cfg.u_min, cfg.u_max)
    for j, phases in enumerate(ctrl.ss.junction_phases):
        idx = list(phases)
        excess = u[idx].sum() + ctrl.ss.lost_time[j] - ctrl.ss.cycle_time
        if excess > 0:
            if excess > PLAN_REPAIR_TOL:
                logger.warning(f"plan exceeds the cycle at junction {j} by {excess:.3e} s")
            largest = idx[int(np.argmax(u[idx]))]
            u[largest] -= excess
    return u


def _apply_fallback(ctrl: ControllerState, reason: Exception) -> np.ndarray:
    logger.warning(f"QP infeasible, applying equal-split plan: {reason}")
    ctrl.last_solution = None
    ctrl.homotopy = None
    ctrl.fallback_count += 1
    return fallback_plan(ctrl.net, ctrl.cfg)


def classic_cycle(ctrl: ControllerState, x_measured, warm: bool = True) -> Tuple[np.ndarray, int]:
    """サイクル終了時の観測 x_measured でQPを解き、次サイクルの青時間を返す.

    Args:
        ctrl: 制御器.
        x_measured: 観測した待ち行列台数.
        warm: False なら毎回コールドスタートする.

    Returns:
        Tuple[np.ndarray, int]: (適用する青時間, 作業集合の変更回数).
    """
    x = np.asarray(x_measured, dtype=float)
    try:
        if warm and ctrl.last_solution is not None:
            try:
                solution, changes = hot_solve(ctrl.last_solution, x, ctrl.qp)
            except _RESTART_ERRORS as e:
                logger.warning(f"hot start failed, restarting cold: {e}")
                solution, changes = cold_solve(ctrl.qp, x)
        else:
            solution, changes = cold_solve(ctrl.qp, x)
    except Infeasible as e:
        return _apply_fallback(ctrl, e), 0

    ctrl.last_solution = solution
    ctrl.homotopy = None
    ctrl.change_log.append([changes])
    return _repair_plan(ctrl, first_input(ctrl.ss, solution.primal)), changes


def interval_tick(ctrl: ControllerState, x_sampled, interval_index: int) -> Optional[np.ndarray]:
    """サンプル区間 interval_index (1..n_itr) の観測でホモトピーを付け替えて進める.

    途中の区間は設定した予算で打ち切る. 最後の区間では無制限に解き切り、
    その解の最初のサイクル分を返す. それ以外の区間では None を返す.
    """
    n_itr = ctrl.cfg.n_itr
    if not 1 <= interval_index <= n_itr:
        raise ValueError(f"interval index {interval_index} outside 1..{n_itr}")
    if interval_index == 1:
        ctrl.interval_changes = []
    last = interval_index == n_itr
    budget = None if last else ctrl.cfg.budget
    x = np.asarray(x_sampled, dtype=float)

    changes = 0
    try:
        start = ctrl.homotopy.solution if ctrl.homotopy is not None else ctrl.last_solution
        if start is None:
            ctrl.last_solution, changes = cold_solve(ctrl.qp, x)
            ctrl.homotopy = None
        else:
            try:
                hs = begin_homotopy(start, x, ctrl.qp)
                _, finished = advance(hs, ctrl.qp, budget=budget)
            except _RESTART_ERRORS as e:
                logger.warning(f"interval {interval_index}: homotopy failed, restarting cold: {e}")
                ctrl.last_solution, changes = cold_solve(ctrl.qp, x)
                ctrl.homotopy = None
            else:
                changes = hs.changes
                if finished:
                    ctrl.last_solution = hs.solution
                    ctrl.homotopy = None
                else:
                    ctrl.homotopy = hs
    except Infeasible as e:
        ctrl.interval_changes.append(changes)
        if last:
            ctrl.change_log.append(list(ctrl.interval_changes))
            return _apply_fallback(ctrl, e)
        logger.warning(f"interval {interval_index}: sampled state gives an infeasible QP: {e}")
        ctrl.homotopy = None
        return None

    ctrl.interval_changes.append(changes)
    if not last:
        return None
    ctrl.change_log.append(list(ctrl.interval_changes))
    return _repair_plan(ctrl, first_input(ctrl.ss, ctrl.last_solution.primal))


def choose_intervals(
    observed_changes: Sequence[int],
    smoothing: float = EMA_SMOOTHING,
    ceiling: int = N_ITR_CEILING,
) -> int:
    """観測した1サイクルあたりの変更回数から区間数 n_itr = n_a + 1 を決める.

    n_a は変更回数の指数移動平均を四捨五入した値.
    """
    if not observed_changes:
        raise ValueError("change history must not be empty")
    ema = float(observed_changes[0])
    for count in observed_changes[1:]:
        ema = smoothing * float(count) + (1.0 - smoothing) * ema
    n_a = math.floor(ema + 0.5)
    return max(1, min(n_a + 1, ceiling))
