# app/schemas/experiment.py
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Type

from pydantic import BaseModel, Field, model_validator
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)

from app.config import (
    CONSTANT_INFLOW,
    DEFAULT_G_MAX,
    DEFAULT_G_MIN,
    DEFAULT_HORIZON,
    DEFAULT_HORIZON_CYCLES,
    DEFAULT_N_ITR,
    DEFAULT_NETWORK_FILE,
    DEFAULT_R_WEIGHT,
    N_ITR_CEILING,
    RANDOM_INFLOW_HIGH,
    RANDOM_INFLOW_LOW,
)

Strategy = Literal["cold", "oass", "ours"]
ScenarioKind = Literal["constant", "random"]

# サマリー表での表示名
STRATEGY_LABELS = {"cold": "MPC", "oass": "MPC-oass", "ours": "MPC-ours"}


class Scenario(BaseModel):
    """流入シナリオ.

    Attributes:
        kind (ScenarioKind): constant は一定、random はサイクルごとに一様乱数.
        rate (float): constant の流入 [veh/h].
        low (float): random の下限 [veh/h].
        high (float): random の上限 [veh/h].
        seed (int): 乱数シード.
        horizon_cycles (int): シミュレーションするサイクル数.
    """

    kind: ScenarioKind = "constant"
    rate: float = Field(CONSTANT_INFLOW, gt=0)
    low: float = Field(RANDOM_INFLOW_LOW, ge=0)
    high: float = Field(RANDOM_INFLOW_HIGH, gt=0)
    seed: int = 0
    horizon_cycles: int = Field(DEFAULT_HORIZON_CYCLES, ge=0)

    @model_validator(mode="after")
    def check_range(self) -> "Scenario":
        if self.kind == "random" and not self.low < self.high:
            raise ValueError(f"random inflow needs low < high, got {self.low} >= {self.high}")
        return self


class NetworkSection(BaseModel):
    file: Path = Field(DEFAULT_NETWORK_FILE, description="ネットワーク定義ファイル")


class ScenarioSection(BaseModel):
    kinds: List[ScenarioKind] = Field(default_factory=lambda: ["constant", "random"], min_length=1)
    constant_rate: float = Field(CONSTANT_INFLOW, gt=0)
    random_low: float = Field(RANDOM_INFLOW_LOW, ge=0)
    random_high: float = Field(RANDOM_INFLOW_HIGH, gt=0)
    horizon_cycles: int = Field(DEFAULT_HORIZON_CYCLES, ge=0)
    initial_queue: float = Field(0.0, ge=0, description="全リンク共通の初期待ち行列 [veh]")


class MpcSection(BaseModel):
    horizon: int = Field(DEFAULT_HORIZON, ge=1)
    n_itr: int = Field(DEFAULT_N_ITR, ge=1)
    g_min: float = Field(DEFAULT_G_MIN, ge=0)
    g_max: float = Field(DEFAULT_G_MAX, gt=0)
    r_weight: float = Field(DEFAULT_R_WEIGHT, gt=0)
    x_min: Optional[float] = Field(None, description="予測状態の下限. 省略時は制約なし")
    budget: Optional[int] = Field(None, ge=0, description="途中区間の変更回数上限")
    n_itr_ceiling: int = Field(N_ITR_CEILING, ge=1)


class RunSection(BaseModel):
    strategies: List[Strategy] = Field(
        default_factory=lambda: ["cold", "oass", "ours"], min_length=1
    )
    seed: int = 0
    out: Path = Path("results")
    jobs: int = Field(1, ge=1)
    stationary: bool = Field(False, description="ours の全区間でサイクル終了時の観測を使う")
    sweep: Optional[str] = Field(None, description="区間数スイープの範囲 \"LO:HI\"")
    verify: bool = Field(False, description="検証スイートを実行する")


class ExperimentSpec(BaseSettings):
    """実験設定. 優先順位は 引数（CLIフラグ） > TOMLファイル > 既定値.

    環境変数からは読み込まない.
    """

    model_config = SettingsConfigDict(extra="ignore")

    network: NetworkSection = NetworkSection()
    scenario: ScenarioSection = ScenarioSection()
    mpc: MpcSection = MpcSection()
    run: RunSection = RunSection()

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings, TomlConfigSettingsSource(settings_cls))

    def scenarios(self) -> List[Scenario]:
        """[scenario] セクションから kinds ごとの Scenario を作る."""
        section = self.scenario
        return [
            Scenario(
                kind=kind,
                rate=section.constant_rate,
                low=section.random_low,
                high=section.random_high,
                seed=self.run.seed,
                horizon_cycles=section.horizon_cycles,
            )
            for kind in section.kinds
        ]


def load_experiment(path: Optional[Path] = None, **overrides) -> ExperimentSpec:
    """TOMLファイルと上書き値（ネストした dict）から ExperimentSpec を作る.

    ファイル中の相対パスのネットワーク定義はファイルの場所から解決する.

    Raises:
        FileNotFoundError: 設定ファイルが存在しない場合.
    """
    if path is None:
        return ExperimentSpec(**overrides)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"experiment spec not found: {path}")

    class FileExperimentSpec(ExperimentSpec):
        model_config = SettingsConfigDict(toml_file=path, extra="ignore")

    spec = FileExperimentSpec(**overrides)
    network_file = spec.network.file
    if not network_file.is_absolute() and not network_file.exists():
        candidate = path.parent / network_file
        if candidate.exists():
            spec = spec.model_copy(
                update={"network": spec.network.model_copy(update={"file": candidate})}
            )
    return spec
