"""閉ループシミュレーション.

プラントは SFM モデルそのもの（シナリオの流入と [0, x_max] のクランプ付き）.
3つの制御方式を比較する:
    cold: 毎サイクル コールドスタート (MPC)
    oass: 前サイクルの解からホットスタート (MPC-oass)
    ours: サイクル内の n_itr 区間でホモトピーを付け替える (MPC-ours)
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from app.control.mpc import (
    ControllerState,
    MpcConfig,
    classic_cycle,
    create_controller,
    interval_tick,
)
from app.errors import LengthMismatch, SimulationError
from app.schemas.experiment import Scenario, Strategy
from app.schemas.metrics import CycleRecord, RhoBuckets, RunMetrics
from app.schemas.network import TrafficNetwork
from app.traffic.sfm_model import sample_state, step_dynamics

logger = logging.getLogger(__name__)

# ρ の区間境界
RHO_EDGES = (0.5, 1.0, 1.5)
# 計測時間の下限 [µs]（0除算の回避）
MIN_TIME_US = 1e-3


@dataclass
class ClosedLoopResult:
    """メトリクスと軌道.

    Attributes:
        metrics (RunMetrics): サイクルごとの記録.
        states (np.ndarray): [cycles + 1, n_links] 各サイクル開始時の待ち行列.
        plans (np.ndarray): [cycles, n_phases] 適用した青時間.
    """

    metrics: RunMetrics
    states: np.ndarray
    plans: np.ndarray
    inflows: List[float] = field(default_factory=list)


def demand_draw(scenario: Scenario, cycle_index: int, rng: Optional[np.random.Generator]) -> float:
    """サイクル cycle_index の流入口への流入 [veh/h]. サイクル中は一定."""
    if scenario.kind == "constant":
        return scenario.rate
    if rng is None:
        raise ValueError("random scenario needs a seeded generator")
    return float(rng.uniform(scenario.low, scenario.high))


def compute_tts(trajectory, T: float) -> float:
    """総旅行時間 Σ_k Σ_z T x_z(k) [veh·s]."""
    trajectory = np.asarray(trajectory, dtype=float)
    if trajectory.size == 0:
        return 0.0
    return float(T * trajectory.sum())


def _timed(fn, *args, **kwargs):
    start = time.perf_counter_ns()
    result = fn(*args, **kwargs)
    elapsed_us = (time.perf_counter_ns() - start) / 1000.0
    return result, max(elapsed_us, MIN_TIME_US)


def _distributed_cycle(
    ctrl: ControllerState,
    net: TrafficNetwork,
    x_prev: np.ndarray,
    u_prev: np.ndarray,
    inflow_prev: float,
    x_now: np.ndarray,
    stationary: bool,
):
    """前サイクルの実行中に取った n_itr 個のサンプルで計画を作る.

    サンプル i は実行中の計画のもとで i/n_itr だけ経過した時点のプラント状態.
    最後のサンプルはサイクル終了時の観測 x_now と一致する.
    """
    n_itr = ctrl.cfg.n_itr
    total_us = 0.0
    last_us = 0.0
    plan = None
    for i in range(1, n_itr + 1):
        if stationary or i == n_itr:
            x_sample = x_now
        else:
            x_sample = sample_state(net, x_prev, u_prev, i / n_itr, inflow_prev)
        plan, elapsed = _timed(interval_tick, ctrl, x_sample, i)
        total_us += elapsed
        last_us = elapsed
    changes = list(ctrl.interval_changes)
    return plan, changes, last_us, total_us


def run_closed_loop(
    net: TrafficNetwork,
    scenario: Scenario,
    strategy: Strategy,
    cfg: MpcConfig,
    x_init: Optional[Sequence[float]] = None,
    stationary: bool = False,
) -> ClosedLoopResult:
    """scenario.horizon_cycles サイクルの閉ループを実行する.

    Args:
        net: ネットワーク（プランと予測モデルの両方に使う）.
        scenario: 流入シナリオ.
        strategy: cold / oass / ours.
        cfg: MPC設定.
        x_init: 初期待ち行列. None なら全リンク0.
        stationary: ours で全サンプルにサイクル終了時の観測を使う.

    Raises:
        SimulationError: 制御器またはプラントの失敗. 失敗したサイクル番号を持つ.
    """
    n_links = len(net.links)
    x = np.zeros(n_links) if x_init is None else np.asarray(x_init, dtype=float).copy()
    rng = np.random.default_rng(scenario.seed)
    ctrl = create_controller(net, cfg)

    metrics = RunMetrics(strategy=strategy, scenario=scenario.kind)
    states = [x.copy()]
    plans: List[np.ndarray] = []
    inflows: List[float] = []
    tts = 0.0

    for t in range(scenario.horizon_cycles):
        try:
            fallbacks_before = ctrl.fallback_count
            if strategy == "ours" and plans:
                plan, interval_changes, solve_us, total_us = _distributed_cycle(
                    ctrl, net, states[-2], plans[-1], inflows[-1], x, stationary
                )
                changes_total = sum(interval_changes)
                changes_last = interval_changes[-1]
            else:
                (plan, changes), solve_us = _timed(
                    classic_cycle, ctrl, x, warm=strategy != "cold"
                )
                total_us = solve_us
                interval_changes = [changes]
                changes_total = changes_last = changes

            inflow = demand_draw(scenario, t, rng)
            x = step_dynamics(net, x, plan, inflow, cfg.u_min, cfg.u_max)
        except Exception as e:
            logger.error(f"{strategy}/{scenario.kind}: cycle {t} failed: {e}")
            raise SimulationError(t, e) from e

        tts += compute_tts(x, net.cycle_time)
        plans.append(plan)
        inflows.append(inflow)
        states.append(x.copy())
        metrics.interval_changes.append(interval_changes)
        metrics.records.append(
            CycleRecord(
                cycle=t,
                strategy=strategy,
                changes_total=changes_total,
                changes_last_interval=changes_last,
                solve_time_us=solve_us,
                total_time_us=total_us,
                tts_cum=tts,
                inflow=inflow,
                fallback=ctrl.fallback_count > fallbacks_before,
            )
        )
        logger.debug(
            f"{strategy}/{scenario.kind} cycle {t}: changes {changes_total} "
            f"(last {changes_last}), queue total {x.sum():.1f}"
        )

    logger.info(
        f"{strategy}/{scenario.kind}: {scenario.horizon_cycles} cycles, "
        f"TTS {tts:.0f} veh*s, fallbacks {ctrl.fallback_count}"
    )
    n_phases = net.n_phases
    return ClosedLoopResult(
        metrics=metrics,
        states=np.array(states),
        plans=np.array(plans) if plans else np.zeros((0, n_phases)),
        inflows=inflows,
    )


def compare_rho(metrics_ours: RunMetrics, metrics_oass: RunMetrics) -> RhoBuckets:
    """サイクルごとの ρ = 時間(ours 最後の区間) / 時間(oass) を4区間に振り分ける.

    Raises:
        LengthMismatch: サイクル数が異なる場合.
    """
    ours = metrics_ours.records
    oass = metrics_oass.records
    if len(ours) != len(oass):
        raise LengthMismatch(f"cycle counts differ: {len(ours)} vs {len(oass)}")
    if not ours:
        return RhoBuckets()

    counts = [0, 0, 0, 0]
    for a, b in zip(ours, oass):
        rho = a.solve_time_us / max(b.solve_time_us, MIN_TIME_US)
        bucket = sum(rho > edge for edge in RHO_EDGES)
        counts[bucket] += 1
    n = len(ours)
    return RhoBuckets(
        much_better=counts[0] / n,
        better=counts[1] / n,
        worse=counts[2] / n,
        much_worse=counts[3] / n,
        count=n,
    )
