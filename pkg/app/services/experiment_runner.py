import asyncio
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

from app.control.mpc import MpcConfig
from app.schemas.experiment import Scenario, Strategy
from app.schemas.network import TrafficNetwork
from app.sim.closed_loop import ClosedLoopResult, run_closed_loop

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunJob:
    """1回分の閉ループ実行の指定."""

    net: TrafficNetwork
    scenario: Scenario
    strategy: Strategy
    cfg: MpcConfig
    x_init: Optional[Sequence[float]] = None
    stationary: bool = False

    @property
    def label(self) -> str:
        return f"{self.strategy}/{self.scenario.kind}/n_itr={self.cfg.n_itr}"


async def _run_one(job: RunJob, semaphore: asyncio.Semaphore) -> ClosedLoopResult:
    async with semaphore:
        logger.info(f"Starting run {job.label}")
        # シミュレーション本体は同期処理なのでスレッドで実行する
        return await asyncio.to_thread(
            run_closed_loop,
            job.net,
            job.scenario,
            job.strategy,
            job.cfg,
            job.x_init,
            job.stationary,
        )


async def run_experiments(jobs: Sequence[RunJob], max_jobs: int = 1) -> List[ClosedLoopResult]:
    """最大 max_jobs 本を並列に実行し、jobs と同じ順で結果を返す.

    いずれかの実行が失敗した場合は最初の例外を送出する.
    """
    if max_jobs < 1:
        raise ValueError(f"max_jobs must be at least 1, got {max_jobs}")
    semaphore = asyncio.Semaphore(max_jobs)
    tasks = [_run_one(job, semaphore) for job in jobs]
    results = await asyncio.gather(*tasks)
    logger.info(f"Finished {len(results)} runs")
    return list(results)
