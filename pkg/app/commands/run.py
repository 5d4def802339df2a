import asyncio
import logging
from typing import Dict, List, Tuple

import numpy as np

from app.control.mpc import MpcConfig
from app.errors import SimulationError, SolverError, TrafficModelError
from app.schemas.experiment import STRATEGY_LABELS, ExperimentSpec
from app.schemas.metrics import RhoBuckets
from app.schemas.network import TrafficNetwork
from app.services.experiment_runner import RunJob, run_experiments
from app.services.result_store import ResultStore
from app.sim.closed_loop import ClosedLoopResult, compare_rho
from app.traffic.sfm_model import load_network

logger = logging.getLogger(__name__)


def build_mpc_config(spec: ExperimentSpec, net: TrafficNetwork, **overrides) -> MpcConfig:
    """[mpc] セクションとネットワークのサイクル長から MpcConfig を作る."""
    section = spec.mpc
    values = dict(
        horizon=section.horizon,
        cycle_time=net.cycle_time,
        n_itr=section.n_itr,
        u_min=section.g_min,
        u_max=section.g_max,
        r_weight=section.r_weight,
        x_min=section.x_min,
        budget=section.budget,
        n_itr_ceiling=section.n_itr_ceiling,
    )
    values.update(overrides)
    return MpcConfig(**values)


def initial_state(spec: ExperimentSpec, net: TrafficNetwork) -> np.ndarray:
    return np.full(len(net.links), spec.scenario.initial_queue)


def print_summary(results: List[Tuple[RunJob, ClosedLoopResult]]) -> None:
    """計算時間と変更回数のサマリー表を出力する."""
    print()
    print(
        f"{'Method':<10} {'Scenario':<9} {'Max [ms]':>9} {'Avg [ms]':>9} "
        f"{'Avg changes':>12} {'Avg last':>9} {'TTS [veh*h]':>12}"
    )
    print("-" * 76)
    for job, result in results:
        m = result.metrics
        changes = m.per_cycle_changes
        last = m.last_interval_changes
        print(
            f"{STRATEGY_LABELS[job.strategy]:<10} {job.scenario.kind:<9} "
            f"{m.max_solve_time_us / 1000:>9.3f} {m.avg_solve_time_us / 1000:>9.3f} "
            f"{(sum(changes) / len(changes) if changes else 0.0):>12.2f} "
            f"{(sum(last) / len(last) if last else 0.0):>9.2f} "
            f"{m.tts / 3600:>12.1f}"
        )


def print_rho(buckets: Dict[str, RhoBuckets]) -> None:
    print()
    print(f"{'Scenario':<9} {'rho<=.5':>8} {'.5<rho<=1':>10} {'1<rho<=1.5':>11} {'rho>1.5':>8}")
    print("-" * 50)
    for scenario, b in buckets.items():
        print(
            f"{scenario:<9} {b.much_better:>8.1%} {b.better:>10.1%} "
            f"{b.worse:>11.1%} {b.much_worse:>8.1%}"
        )


def cmd_run(spec: ExperimentSpec) -> int:
    """シナリオ×制御方式のすべてを実行し、メトリクスと軌道を書き出す.

    Returns:
        int: 終了コード（成功なら0）.
    """
    try:
        net = load_network(spec.network.file)
        cfg = build_mpc_config(spec, net)
    except FileNotFoundError as e:
        logger.error(f"{e}")
        return 1
    except ValueError as e:
        logger.error(f"Invalid network or configuration in {spec.network.file}: {e}")
        return 1

    x_init = initial_state(spec, net)
    jobs = [
        RunJob(
            net=net,
            scenario=scenario,
            strategy=strategy,
            cfg=cfg,
            x_init=x_init,
            stationary=spec.run.stationary,
        )
        for scenario in spec.scenarios()
        for strategy in spec.run.strategies
    ]

    try:
        results = asyncio.run(run_experiments(jobs, spec.run.jobs))
    except (SimulationError, SolverError, TrafficModelError) as e:
        logger.error(f"Experiment failed: {e}")
        return 1

    store = ResultStore(spec.run.out)
    try:
        for job, result in zip(jobs, results):
            store.save_metrics(result.metrics)
            store.save_trajectory(
                net, job.strategy, job.scenario.kind, result.states, result.plans
            )
    except OSError:
        return 1

    paired = list(zip(jobs, results))
    print_summary(paired)

    by_key = {(job.strategy, job.scenario.kind): result for job, result in paired}
    buckets = {}
    for scenario in spec.scenario.kinds:
        ours = by_key.get(("ours", scenario))
        oass = by_key.get(("oass", scenario))
        if ours is not None and oass is not None:
            buckets[scenario] = compare_rho(ours.metrics, oass.metrics)
    if buckets:
        print_rho(buckets)

    logger.info(f"Wrote {len(store.written)} files to {spec.run.out}")
    return 0
