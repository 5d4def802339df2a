import asyncio
import logging
from typing import List, Optional, Tuple

from app.commands.run import build_mpc_config, initial_state
from app.config import SWEEP_OPERATING_POINT
from app.control.mpc import choose_intervals
from app.errors import SimulationError, SolverError, TrafficModelError
from app.schemas.experiment import ExperimentSpec
from app.schemas.metrics import SweepRow
from app.services.experiment_runner import RunJob, run_experiments
from app.services.result_store import ResultStore
from app.traffic.sfm_model import load_network

logger = logging.getLogger(__name__)


def parse_range(text: str) -> Tuple[int, int]:
    """"LO:HI" を (LO, HI) に変換する."""
    try:
        lo_text, hi_text = text.split(":")
        lo, hi = int(lo_text), int(hi_text)
    except ValueError as e:
        raise ValueError(f"sweep range must look like LO:HI, got {text!r}") from e
    if not 1 <= lo <= hi:
        raise ValueError(f"sweep range needs 1 <= LO <= HI, got {lo}:{hi}")
    return lo, hi


def _mean(values: List[int]) -> float:
    return sum(values) / len(values) if values else 0.0


def sweep_rows(spec: ExperimentSpec, lo: int, hi: int) -> List[SweepRow]:
    """n_itr = lo..hi のそれぞれで MPC-ours を実行し、区間あたりの変更回数を集計する.

    最初のサイクルはコールドスタートなので平均から除く. 各シナリオで MPC-oass も
    1回実行し、その変更回数から choose_intervals が選ぶ n_itr に印を付ける.
    """
    net = load_network(spec.network.file)
    x_init = initial_state(spec, net)
    base_cfg = build_mpc_config(spec, net)

    jobs = []
    for scenario in spec.scenarios():
        jobs.append(RunJob(net, scenario, "oass", base_cfg, x_init))
        for n_itr in range(lo, hi + 1):
            cfg = build_mpc_config(spec, net, n_itr=n_itr)
            jobs.append(RunJob(net, scenario, "ours", cfg, x_init, spec.run.stationary))
    results = asyncio.run(run_experiments(jobs, spec.run.jobs))

    rows: List[SweepRow] = []
    chosen: Optional[int] = None
    for job, result in zip(jobs, results):
        if job.strategy == "oass":
            history = result.metrics.per_cycle_changes[1:] or result.metrics.per_cycle_changes
            chosen = choose_intervals(history, ceiling=base_cfg.n_itr_ceiling) if history else None
            continue
        metrics = result.metrics
        rows.append(
            SweepRow(
                n_itr=job.cfg.n_itr,
                scenario=job.scenario.kind,
                avg_last_interval=_mean(metrics.last_interval_changes[1:]),
                avg_total=_mean(metrics.per_cycle_changes[1:]),
                operating_point=job.cfg.n_itr == SWEEP_OPERATING_POINT,
                chosen=job.cfg.n_itr == chosen,
            )
        )
    return rows


def cmd_sweep(spec: ExperimentSpec, n_itr_range: Tuple[int, int]) -> int:
    """区間数スイープを実行して sweep.csv を書き出す."""
    lo, hi = n_itr_range
    try:
        rows = sweep_rows(spec, lo, hi)
    except FileNotFoundError as e:
        logger.error(f"{e}")
        return 1
    except (SimulationError, SolverError, TrafficModelError, ValueError) as e:
        logger.error(f"Sweep failed: {e}")
        return 1

    try:
        ResultStore(spec.run.out).save_sweep(rows)
    except OSError:
        return 1

    print()
    print(f"{'n_itr':>5} {'Scenario':<9} {'Avg last':>9} {'Avg total':>10}")
    print("-" * 36)
    for row in rows:
        marks = ("  <- operating point" if row.operating_point else "") + (
            "  <- sizing rule" if row.chosen else ""
        )
        print(
            f"{row.n_itr:>5} {row.scenario:<9} {row.avg_last_interval:>9.3f} "
            f"{row.avg_total:>10.3f}{marks}"
        )
    return 0
