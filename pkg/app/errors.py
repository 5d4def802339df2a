"""ソルバー・交通モデル・実験で送出される例外."""


class SolverError(Exception):
    """数値コア（QP / OASS）の例外の基底クラス."""


class DimensionMismatch(SolverError, ValueError):
    """行列・ベクトルの次元が整合しない、またはHが非対称."""


class NotPositiveDefinite(SolverError):
    """Hのコレスキー分解に失敗した."""


class RankDeficient(SolverError):
    """作業集合の制約行が一次従属."""


class Infeasible(SolverError):
    """目標パラメータのQPが実行不能."""


class IterationLimit(SolverError):
    """反復上限、または連続ゼロステップ上限を超えた."""


class NotOptimalStart(SolverError):
    """ホモトピーの開始解がKKT条件を満たさない."""


class TrafficModelError(ValueError):
    """交通ネットワークモデルの例外の基底クラス."""


class UnknownLink(TrafficModelError):
    """存在しないリンクIDが参照された."""


class ConstraintViolation(TrafficModelError):
    """青時間プランが上下限またはサイクル制約に違反している."""


class LengthMismatch(ValueError):
    """比較対象のメトリクスのサイクル数が異なる."""


class SimulationError(RuntimeError):
    """閉ループシミュレーション中の失敗. 失敗したサイクル番号を保持する."""

    def __init__(self, cycle: int, cause: Exception):
        self.cycle = cycle
        self.cause = cause
        super().__init__(f"simulation aborted at cycle {cycle}: {cause}")
