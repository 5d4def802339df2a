import csv
import logging
from pathlib import Path
from typing import Iterable, List

from app.schemas.metrics import RunMetrics, SweepRow
from app.schemas.network import TrafficNetwork
from app.traffic.sfm_model import green_time_of_link

logger = logging.getLogger(__name__)

# ファイル形式のバージョン（先頭行に書く）
METRICS_HEADER = "# oass-traffic metrics v1"
TRAJECTORY_HEADER = "# oass-traffic trajectory v1"
SWEEP_HEADER = "# oass-traffic sweep v1"

METRICS_COLUMNS = [
    "cycle",
    "strategy",
    "changes_total",
    "changes_last_interval",
    "solve_time_us",
    "tts_cum",
]
TRAJECTORY_COLUMNS = ["cycle", "link", "queue", "green"]
SWEEP_COLUMNS = [
    "n_itr",
    "scenario",
    "avg_last_interval",
    "avg_total",
    "operating_point",
    "chosen",
]


class ResultStore:
    """実験結果をCSVとして出力ディレクトリに書き出す.

    書き込みはこのクラスだけが行う（並列実行の結果もここに集約する）.
    """

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.written: List[Path] = []

    def _open(self, name: str, header: str, columns: List[str]):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        f = path.open("w", newline="", encoding="utf-8")
        f.write(header + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        self.written.append(path)
        return path, f, writer

    @staticmethod
    def metrics_name(strategy: str, scenario: str) -> str:
        return f"metrics_{scenario}_{strategy}.csv"

    @staticmethod
    def trajectory_name(strategy: str, scenario: str) -> str:
        return f"trajectory_{scenario}_{strategy}.csv"

    def save_metrics(self, metrics: RunMetrics) -> Path:
        """1行1サイクルのメトリクスを書く."""
        try:
            path, f, writer = self._open(
                self.metrics_name(metrics.strategy, metrics.scenario), METRICS_HEADER, METRICS_COLUMNS
            )
            with f:
                for r in metrics.records:
                    writer.writerow(
                        [
                            r.cycle,
                            r.strategy,
                            r.changes_total,
                            r.changes_last_interval,
                            f"{r.solve_time_us:.1f}",
                            f"{r.tts_cum:.6f}",
                        ]
                    )
            logger.info(f"Metrics saved to {path}")
            return path
        except OSError as e:
            logger.error(f"Failed to save metrics for {metrics.strategy}/{metrics.scenario}: {e}")
            raise e

    def save_trajectory(
        self, net: TrafficNetwork, strategy: str, scenario: str, states, plans
    ) -> Path:
        """サイクルごと・リンクごとの待ち行列と青時間を書く.

        queue はサイクル開始時の台数、green はそのサイクルにリンクが受けた青時間.
        """
        try:
            path, f, writer = self._open(
                self.trajectory_name(strategy, scenario), TRAJECTORY_HEADER, TRAJECTORY_COLUMNS
            )
            with f:
                for cycle, plan in enumerate(plans):
                    for k, link in enumerate(net.links):
                        green = green_time_of_link(net, link.downstream, link.id, plan)
                        writer.writerow(
                            [cycle, link.id, f"{states[cycle][k]:.6f}", f"{green:.6f}"]
                        )
            logger.info(f"Trajectory saved to {path}")
            return path
        except OSError as e:
            logger.error(f"Failed to save trajectory for {strategy}/{scenario}: {e}")
            raise e

    def save_sweep(self, rows: Iterable[SweepRow], name: str = "sweep.csv") -> Path:
        try:
            path, f, writer = self._open(name, SWEEP_HEADER, SWEEP_COLUMNS)
            with f:
                for row in rows:
                    writer.writerow(
                        [
                            row.n_itr,
                            row.scenario,
                            f"{row.avg_last_interval:.6f}",
                            f"{row.avg_total:.6f}",
                            int(row.operating_point),
                            int(row.chosen),
                        ]
                    )
            logger.info(f"Sweep saved to {path}")
            return path
        except OSError as e:
            logger.error(f"Failed to save sweep: {e}")
            raise e
