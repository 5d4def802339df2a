"""ストア・アンド・フォワード（SFM）交通モデル.

リンクの待ち行列台数 x [veh] をサイクル単位で更新する。
    x_z(k+1) = x_z(k) + T (q_in - q_out + d_z - exit_z)
    q_out_z  = s_z G_z / T
    q_in_z   = Σ_w τ_{w,z} q_out_w
状態空間形 x(k+1) = A x(k) + B u(k) + e では A = I となる。
"""

import logging
import tomllib
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np
import scipy.linalg as linalg

from app.errors import ConstraintViolation, DimensionMismatch, UnknownLink
from app.schemas.network import Link, TrafficNetwork
from app.solver.qp_core import ParametricQp, build_qp

if TYPE_CHECKING:
    from app.control.mpc import MpcConfig

logger = logging.getLogger(__name__)

SECONDS_PER_HOUR = 3600.0
# 青時間プランの検証に使う許容誤差 [s]
PLAN_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class StateSpace:
    """x(k+1) = A x(k) + B u(k) + e. 出力は状態そのもの.

    Attributes:
        A (np.ndarray): [n x n] 単位行列.
        B (np.ndarray): [n x p] 青時間1秒あたりの台数変化.
        e (np.ndarray): [n] 1サイクルあたりの公称流入 - 流出.
        capacity (np.ndarray): [n] リンク収容台数.
        junction_phases (Tuple[Tuple[int, ...], ...]): 交差点ごとのuの添字.
        lost_time (np.ndarray): 交差点ごとの全赤時間.
        cycle_time (float): サイクル長 [s].
    """

    A: np.ndarray
    B: np.ndarray
    e: np.ndarray
    capacity: np.ndarray
    junction_phases: Tuple[Tuple[int, ...], ...]
    lost_time: np.ndarray
    cycle_time: float

    @property
    def n_state(self) -> int:
        return self.A.shape[0]

    @property
    def n_input(self) -> int:
        return self.B.shape[1]


def load_network(path) -> TrafficNetwork:
    """TOML形式のネットワーク定義を読み込む. 未知のキーは無視する."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"network file not found: {path}")
    with path.open("rb") as f:
        data = tomllib.load(f)
    network = TrafficNetwork.model_validate(data)
    logger.info(
        f"Loaded network '{network.name or path.stem}': "
        f"{len(network.links)} links, {len(network.junctions)} junctions, "
        f"{network.n_phases} phases"
    )
    return network


def _find_link(net: TrafficNetwork, link_id: str) -> Link:
    for link in net.links:
        if link.id == link_id:
            return link
    raise UnknownLink(f"unknown link: {link_id}")


def _phase_membership(net: TrafficNetwork) -> np.ndarray:
    """M[z, p] = 1 ならフェーズ p はリンク z を青にする."""
    index = {link.id: k for k, link in enumerate(net.links)}
    membership = np.zeros((len(net.links), net.n_phases))
    p = 0
    for junction in net.junctions:
        for phase in junction.phases:
            for link_id in phase:
                membership[index[link_id], p] = 1.0
            p += 1
    return membership


def _turning_matrix(net: TrafficNetwork) -> np.ndarray:
    """T[w, z] = τ_{w,z}."""
    index = {link.id: k for k, link in enumerate(net.links)}
    turning = np.zeros((len(net.links), len(net.links)))
    for t in net.turning:
        turning[index[t.from_link], index[t.to_link]] += t.rate
    return turning


def green_time_of_link(net: TrafficNetwork, junction_id: str, link_id: str, u) -> float:
    """交差点 junction_id でリンク link_id を青にするフェーズの青時間の合計 G_z.

    Raises:
        UnknownLink: リンクまたは交差点が存在しない場合.
    """
    link = _find_link(net, link_id)
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != net.n_phases:
        raise DimensionMismatch(f"plan has {u.shape[0]} entries, expected {net.n_phases}")
    if junction_id not in {j.id for j in net.junctions}:
        raise UnknownLink(f"unknown junction: {junction_id}")
    if link.downstream != junction_id:
        return 0.0
    green = 0.0
    p = 0
    for junction in net.junctions:
        for phase in junction.phases:
            if junction.id == junction_id and link_id in phase:
                green += u[p]
            p += 1
    return float(green)


def outflow(link: Link, green: float, T: float) -> float:
    """1ステップ（長さ T）の流出台数 s_z G_z."""
    return link.saturation_flow / SECONDS_PER_HOUR * green


def validate_plan(
    net: TrafficNetwork,
    u,
    u_min: Optional[float] = None,
    u_max: Optional[float] = None,
) -> np.ndarray:
    """青時間プランの上下限とサイクル制約 Σu + L <= T を検証する.

    Raises:
        ConstraintViolation: いずれかに違反する場合.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != net.n_phases:
        raise DimensionMismatch(f"plan has {u.shape[0]} entries, expected {net.n_phases}")
    low = 0.0 if u_min is None else u_min
    if np.any(u < low - PLAN_TOL):
        raise ConstraintViolation(f"green time below {low}: {u}")
    if u_max is not None and np.any(u > u_max + PLAN_TOL):
        raise ConstraintViolation(f"green time above {u_max}: {u}")
    p = 0
    for junction in net.junctions:
        k = len(junction.phases)
        total = float(u[p : p + k].sum()) + junction.lost_time
        if total > net.cycle_time + PLAN_TOL:
            raise ConstraintViolation(
                f"junction {junction.id}: green {total - junction.lost_time:.3f} s "
                f"+ lost time {junction.lost_time} s exceeds cycle {net.cycle_time} s"
            )
        p += k
    return u


def _increment(
    net: TrafficNetwork, u: np.ndarray, source_inflow: Optional[float]
) -> np.ndarray:
    """1サイクル分の台数変化（クランプ前）をリンクごとに式から直接計算する."""
    T = net.cycle_time
    served = {}
    for link in net.links:
        green = green_time_of_link(net, link.downstream, link.id, u)
        served[link.id] = outflow(link, green, T)

    delta = np.zeros(len(net.links))
    for k, link in enumerate(net.links):
        arriving = sum(t.rate * served[t.from_link] for t in net.turning if t.to_link == link.id)
        demand = link.demand
        if link.source and source_inflow is not None:
            demand += source_inflow * link.source_share
        external = T * (demand - link.exit_flow) / SECONDS_PER_HOUR
        delta[k] = arriving - served[link.id] + external
    return delta


def step_dynamics(
    net: TrafficNetwork,
    x,
    u,
    source_inflow: Optional[float] = None,
    u_min: Optional[float] = None,
    u_max: Optional[float] = None,
) -> np.ndarray:
    """プラントを1サイクル進める. 結果は [0, x_max] にクランプする.

    Args:
        net: ネットワーク.
        x: 現在の待ち行列台数 [veh].
        u: 青時間プラン [s].
        source_inflow: 流入口リンクへのシナリオ流入 [veh/h]. None なら公称値のみ.
        u_min: 青時間の下限. 指定時のみ検証する.
        u_max: 青時間の上限. 指定時のみ検証する.

    Raises:
        ConstraintViolation: プランが制約に違反する場合.
    """
    return sample_state(net, x, u, 1.0, source_inflow, u_min, u_max)


def sample_state(
    net: TrafficNetwork,
    x,
    u,
    fraction: float,
    source_inflow: Optional[float] = None,
    u_min: Optional[float] = None,
    u_max: Optional[float] = None,
) -> np.ndarray:
    """実行中のプランのもとで、サイクルの fraction だけ経過した時点のプラント状態.

    流量を経過時間に比例させる. fraction = 1 のとき step_dynamics と一致する.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != len(net.links):
        raise DimensionMismatch(f"state has {x.shape[0]} entries, expected {len(net.links)}")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    u = validate_plan(net, u, u_min, u_max)
    capacity = np.array([link.capacity for link in net.links])
    return np.clip(x + fraction * _increment(net, u, source_inflow), 0.0, capacity)


def linearize(net: TrafficNetwork) -> StateSpace:
    """ネットワークから状態空間 (A, B, e) を組み立てる.

    B = (T^T - I) diag(s) M  （M はリンク×フェーズの青割当）
    e = C (d - exit)  は公称値のみ. シナリオ流入は含めない.
    """
    n = len(net.links)
    saturation = np.array([link.saturation_flow for link in net.links]) / SECONDS_PER_HOUR
    served = np.diag(saturation) @ _phase_membership(net)
    B = (_turning_matrix(net).T - np.eye(n)) @ served
    e = np.array(
        [net.cycle_time * (link.demand - link.exit_flow) / SECONDS_PER_HOUR for link in net.links]
    )

    junction_phases = []
    p = 0
    for junction in net.junctions:
        k = len(junction.phases)
        junction_phases.append(tuple(range(p, p + k)))
        p += k

    return StateSpace(
        A=np.eye(n),
        B=B,
        e=e,
        capacity=np.array([link.capacity for link in net.links]),
        junction_phases=tuple(junction_phases),
        lost_time=np.array([j.lost_time for j in net.junctions]),
        cycle_time=net.cycle_time,
    )


def weights_from_capacity(capacity: np.ndarray, n_input: int, r_weight: float):
    Q = np.diag(1.0 / np.asarray(capacity, dtype=float))
    R = r_weight * np.eye(n_input)
    return Q, R, Q.copy()


def default_weights(net: TrafficNetwork, cfg: "MpcConfig"):
    """Q = diag(1 / x_max), R = r_weight I, P = Q."""
    capacity = np.array([link.capacity for link in net.links])
    return weights_from_capacity(capacity, net.n_phases, cfg.r_weight)


def _broadcast(value, length: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), (length,)).copy()


def prediction_matrices(ss: StateSpace, horizon: int):
    """x_k = A^k x0 + Σ_{j<k} A^{k-1-j} B u_j + Σ_{j<k} A^j e  (k = 1..N) の係数.

    Returns:
        Tuple[np.ndarray, np.ndarray, np.ndarray]: (Sx [nN x n], Su [nN x mN], c [nN]).
    """
    n, m = ss.n_state, ss.n_input
    powers = [np.eye(n)]
    for _ in range(horizon):
        powers.append(ss.A @ powers[-1])

    Sx = np.zeros((n * horizon, n))
    Su = np.zeros((n * horizon, m * horizon))
    c = np.zeros(n * horizon)
    offset = np.zeros(n)
    for k in range(1, horizon + 1):
        rows = slice((k - 1) * n, k * n)
        Sx[rows] = powers[k]
        for j in range(k):
            Su[rows, j * m : (j + 1) * m] = powers[k - 1 - j] @ ss.B
        offset = offset + powers[k - 1] @ ss.e
        c[rows] = offset
    return Sx, Su, c


def condense(ss: StateSpace, cfg: "MpcConfig") -> ParametricQp:
    """N ステップのMPC問題を U = [u_0; ...; u_{N-1}] のQPに縮約する.

    目的関数 Σ_{k=1}^{N} x_k^T Q_k x_k + Σ_k u_k^T R u_k（Q_N = P）を
    1/2 U^T H U + U^T g(x0) + 定数 の形に直す. 制約はすべて G U >= b(x0).

    行の並び:
        各 k について u_k >= u_min, -u_k >= -u_max, 交差点ごとに -Σu >= L_j - T
        続いて各予測状態 k = 1..N について（x_min があれば）下限行, 上限行.
    """
    N = cfg.horizon
    if N < 1:
        raise DimensionMismatch(f"horizon must be at least 1, got {N}")
    n, m = ss.n_state, ss.n_input
    Q, R, P = cfg.weights if cfg.weights is not None else weights_from_capacity(
        ss.capacity, m, cfg.r_weight
    )
    Q, R, P = (np.asarray(w, dtype=float) for w in (Q, R, P))
    if Q.shape != (n, n) or P.shape != (n, n) or R.shape != (m, m):
        raise DimensionMismatch(
            f"weights must be {n}x{n} (Q, P) and {m}x{m} (R), "
            f"got {Q.shape}, {R.shape}, {P.shape}"
        )

    Sx, Su, c = prediction_matrices(ss, N)
    Q_bar = linalg.block_diag(*([Q] * (N - 1) + [P]))
    R_bar = linalg.block_diag(*([R] * N))
    weighted = Su.T @ Q_bar
    H = 2.0 * (weighted @ Su + R_bar)
    H = 0.5 * (H + H.T)
    F = 2.0 * weighted @ Sx
    g_c = 2.0 * weighted @ c

    u_min = _broadcast(cfg.u_min, m)
    u_max = _broadcast(cfg.u_max, m)
    G_rows, W_rows, E_rows = [], [], []

    for k in range(N):
        cols = slice(k * m, (k + 1) * m)
        block = np.zeros((m, m * N))
        block[:, cols] = np.eye(m)
        G_rows += [block, -block]
        W_rows += [u_min, -u_max]
        E_rows += [np.zeros((m, n)), np.zeros((m, n))]
        coupling = np.zeros((len(ss.junction_phases), m * N))
        for j, phases in enumerate(ss.junction_phases):
            for p in phases:
                coupling[j, k * m + p] = -1.0
        G_rows.append(coupling)
        W_rows.append(ss.lost_time - ss.cycle_time)
        E_rows.append(np.zeros((len(ss.junction_phases), n)))

    x_max = ss.capacity
    for k in range(N):
        rows = slice(k * n, (k + 1) * n)
        if cfg.x_min is not None:
            x_min = _broadcast(cfg.x_min, n)
            G_rows.append(Su[rows])
            W_rows.append(x_min - c[rows])
            E_rows.append(-Sx[rows])
        G_rows.append(-Su[rows])
        W_rows.append(c[rows] - x_max)
        E_rows.append(Sx[rows])

    return build_qp(
        H, F, g_c, np.vstack(G_rows), np.concatenate(W_rows), np.vstack(E_rows)
    )


def first_input(ss: StateSpace, primal: np.ndarray) -> np.ndarray:
    """U から最初のサイクルの青時間 u_0 を取り出す."""
    return np.asarray(primal[: ss.n_input], dtype=float).copy()
