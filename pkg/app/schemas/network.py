# app/schemas/network.py
from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Dict, List

# 旋回率の合計の許容誤差
TURNING_SUM_TOL = 1e-9


class Link(BaseModel):
    """一方通行のリンク（待ち行列）.

    ファイル上の流量はすべて veh/h で記述し、モデル内部で veh/s に換算する.

    Attributes:
        id (str): リンクID.
        capacity (float): 収容台数 x_max [veh].
        saturation_flow (float): 飽和交通流率 [veh/h].
        upstream (str): 上流ノード（交差点または流入口）のID.
        downstream (str): 下流の信号交差点ID.
        demand (float): 公称の外部流入 [veh/h]. 予測モデルとプラントの両方に入る.
        exit_flow (float): 公称のリンク内流出 [veh/h].
        source (bool): シナリオの流入を受け取るリンクか.
        source_share (float): シナリオ流入のうちこのリンクに入る割合.
    """

    model_config = ConfigDict(extra="ignore", frozen=True)

    id: str
    capacity: float = Field(..., gt=0, description="収容台数 [veh]")
    saturation_flow: float = Field(..., gt=0, description="飽和交通流率 [veh/h]")
    upstream: str = Field("", description="上流ノードID")
    downstream: str = Field(..., description="下流の信号交差点ID")
    demand: float = Field(0.0, ge=0, description="公称の外部流入 [veh/h]")
    exit_flow: float = Field(0.0, ge=0, description="公称のリンク内流出 [veh/h]")
    source: bool = Field(False, description="シナリオ流入を受け取るか")
    source_share: float = Field(0.0, ge=0, le=1, description="シナリオ流入の配分率")


class Junction(BaseModel):
    """信号交差点. phases の各要素は青になるリンクIDの集合."""

    model_config = ConfigDict(extra="ignore", frozen=True)

    id: str
    phases: List[List[str]] = Field(..., min_length=1, description="フェーズごとの青リンク")
    lost_time: float = Field(0.0, ge=0, description="全赤時間 L_j [s]")


class TurningRate(BaseModel):
    """リンク from から リンク to への旋回率."""

    model_config = ConfigDict(extra="ignore", frozen=True, populate_by_name=True)

    from_link: str = Field(..., alias="from")
    to_link: str = Field(..., alias="to")
    rate: float = Field(..., ge=0, le=1)


class TrafficNetwork(BaseModel):
    """信号制御される道路ネットワーク.

    フェーズは junctions の順、各交差点内では phases の順に並べたものを
    青時間ベクトル u の添字とする.
    """

    model_config = ConfigDict(extra="ignore", frozen=True)

    name: str = ""
    cycle_time: float = Field(..., gt=0, description="サイクル長 T = C [s]")
    links: List[Link] = Field(..., min_length=1)
    junctions: List[Junction] = Field(..., min_length=1)
    turning: List[TurningRate] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_references(self) -> "TrafficNetwork":
        links = {link.id: link for link in self.links}
        if len(links) != len(self.links):
            raise ValueError("duplicate link ids")
        junctions = {j.id: j for j in self.junctions}
        if len(junctions) != len(self.junctions):
            raise ValueError("duplicate junction ids")

        for link in self.links:
            if link.downstream not in junctions:
                raise ValueError(
                    f"link {link.id}: downstream junction {link.downstream} does not exist"
                )
        for junction in self.junctions:
            if junction.lost_time >= self.cycle_time:
                raise ValueError(
                    f"junction {junction.id}: lost time {junction.lost_time} "
                    f"must be below the cycle time {self.cycle_time}"
                )
            for phase in junction.phases:
                if not phase:
                    raise ValueError(f"junction {junction.id}: empty phase")
                for link_id in phase:
                    if link_id not in links:
                        raise ValueError(f"junction {junction.id}: unknown link {link_id}")
                    if links[link_id].downstream != junction.id:
                        raise ValueError(
                            f"junction {junction.id}: link {link_id} does not end here"
                        )

        totals: Dict[str, float] = {}
        for t in self.turning:
            for link_id in (t.from_link, t.to_link):
                if link_id not in links:
                    raise ValueError(f"turning rate references unknown link {link_id}")
            if links[t.from_link].downstream != links[t.to_link].upstream:
                raise ValueError(
                    f"turning {t.from_link}->{t.to_link}: links are not connected"
                )
            totals[t.from_link] = totals.get(t.from_link, 0.0) + t.rate
        for link_id, total in totals.items():
            if total > 1.0 + TURNING_SUM_TOL:
                raise ValueError(f"turning rates out of link {link_id} sum to {total}")
        return self

    @property
    def link_ids(self) -> List[str]:
        return [link.id for link in self.links]

    def link_index(self, link_id: str) -> int:
        return self.link_ids.index(link_id)

    @property
    def n_phases(self) -> int:
        return sum(len(j.phases) for j in self.junctions)
