# app/schemas/metrics.py
from pydantic import BaseModel, Field, model_validator
from typing import List

# ρ の区間の合計の許容誤差
BUCKET_SUM_TOL = 1e-9


class CycleRecord(BaseModel):
    """1サイクル分の記録.

    Attributes:
        cycle (int): サイクル番号.
        strategy (str): cold / oass / ours.
        changes_total (int): このサイクルの計画に要した作業集合の変更回数の合計.
        changes_last_interval (int): 最後の区間の変更回数（cold / oass では changes_total と同じ）.
        solve_time_us (float): 適用した計画を出した求解の時間 [µs].
        total_time_us (float): このサイクルの全区間の求解時間の合計 [µs].
        tts_cum (float): 累積の総旅行時間 [veh·s].
        inflow (float): このサイクルのシナリオ流入 [veh/h].
        fallback (bool): 均等配分プランを適用したか.
    """

    cycle: int
    strategy: str
    changes_total: int = Field(..., ge=0)
    changes_last_interval: int = Field(..., ge=0)
    solve_time_us: float = Field(..., ge=0)
    total_time_us: float = Field(..., ge=0)
    tts_cum: float = Field(..., ge=0)
    inflow: float = 0.0
    fallback: bool = False


class RunMetrics(BaseModel):
    """1回の閉ループ実行のメトリクス."""

    strategy: str
    scenario: str
    records: List[CycleRecord] = Field(default_factory=list)
    interval_changes: List[List[int]] = Field(
        default_factory=list, description="サイクルごとの区間別変更回数"
    )

    @property
    def per_cycle_changes(self) -> List[int]:
        return [r.changes_total for r in self.records]

    @property
    def last_interval_changes(self) -> List[int]:
        return [r.changes_last_interval for r in self.records]

    @property
    def max_solve_time_us(self) -> float:
        return max((r.solve_time_us for r in self.records), default=0.0)

    @property
    def avg_solve_time_us(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.solve_time_us for r in self.records) / len(self.records)

    @property
    def tts(self) -> float:
        return self.records[-1].tts_cum if self.records else 0.0


class RhoBuckets(BaseModel):
    """ρ = 時間(ours 最後の区間) / 時間(oass) の分布."""

    much_better: float = Field(0.0, ge=0, description="ρ <= 0.5")
    better: float = Field(0.0, ge=0, description="0.5 < ρ <= 1")
    worse: float = Field(0.0, ge=0, description="1 < ρ <= 1.5")
    much_worse: float = Field(0.0, ge=0, description="ρ > 1.5")
    count: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_sum(self) -> "RhoBuckets":
        total = self.much_better + self.better + self.worse + self.much_worse
        if self.count and abs(total - 1.0) > BUCKET_SUM_TOL:
            raise ValueError(f"bucket fractions sum to {total}")
        return self


class SweepRow(BaseModel):
    """区間数スイープの1行."""

    n_itr: int
    scenario: str
    avg_last_interval: float
    avg_total: float
    operating_point: bool = False
    chosen: bool = False


class CheckResult(BaseModel):
    name: str
    passed: bool
    instances: int = 0
    detail: str = ""


class VerifyReport(BaseModel):
    checks: List[CheckResult] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)
