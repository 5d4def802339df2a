"""縮約前（状態と入力を両方変数とする）MPC問題の評価.

縮約QPの検証に使う. 予測軌道を漸化式で直接計算し、
段ごとのコスト・制約値・随伴変数を使った結合KKT残差を求める.
joint_qp は同じ問題を状態も変数に含むQPとして組み立て、縮約QPとは独立に解けるようにする.
"""

from typing import TYPE_CHECKING, List

import numpy as np
import scipy.linalg as linalg

from app.solver.qp_core import ParametricQp, QpSolution, build_qp
from app.traffic.sfm_model import StateSpace, weights_from_capacity

if TYPE_CHECKING:
    from app.control.mpc import MpcConfig


def _weights(ss: StateSpace, cfg: "MpcConfig"):
    if cfg.weights is not None:
        return tuple(np.asarray(w, dtype=float) for w in cfg.weights)
    return weights_from_capacity(ss.capacity, ss.n_input, cfg.r_weight)


def _inputs(ss: StateSpace, cfg: "MpcConfig", primal: np.ndarray) -> List[np.ndarray]:
    m = ss.n_input
    return [primal[k * m : (k + 1) * m] for k in range(cfg.horizon)]


def predict(ss: StateSpace, x0, inputs: List[np.ndarray]) -> List[np.ndarray]:
    """x_{k+1} = A x_k + B u_k + e を順に計算し、x_1..x_N を返す（クランプなし）."""
    x = np.asarray(x0, dtype=float)
    trajectory = []
    for u in inputs:
        x = ss.A @ x + ss.B @ u + ss.e
        trajectory.append(x)
    return trajectory


def stage_cost(ss: StateSpace, cfg: "MpcConfig", x0, primal: np.ndarray) -> float:
    """Σ_{k=1}^{N} x_k^T Q_k x_k + Σ_k u_k^T R u_k（Q_N = P）."""
    Q, R, P = _weights(ss, cfg)
    inputs = _inputs(ss, cfg, primal)
    states = predict(ss, x0, inputs)
    cost = sum(float(u @ R @ u) for u in inputs)
    for k, x in enumerate(states):
        weight = P if k == len(states) - 1 else Q
        cost += float(x @ weight @ x)
    return cost


def constraint_values(ss: StateSpace, cfg: "MpcConfig", x0, primal: np.ndarray) -> np.ndarray:
    """各制約の G U - b(x0) を予測軌道から直接計算する（縮約QPと同じ行順）."""
    m = ss.n_input
    u_min = np.broadcast_to(np.asarray(cfg.u_min, dtype=float), (m,))
    u_max = np.broadcast_to(np.asarray(cfg.u_max, dtype=float), (m,))
    inputs = _inputs(ss, cfg, primal)
    values = []
    for u in inputs:
        values.append(u - u_min)
        values.append(u_max - u)
        values.append(
            np.array(
                [
                    ss.cycle_time - ss.lost_time[j] - u[list(phases)].sum()
                    for j, phases in enumerate(ss.junction_phases)
                ]
            )
        )
    for x in predict(ss, x0, inputs):
        if cfg.x_min is not None:
            values.append(x - np.broadcast_to(np.asarray(cfg.x_min, dtype=float), x.shape))
        values.append(ss.capacity - x)
    return np.concatenate(values)


def joint_kkt_residual(
    ss: StateSpace, cfg: "MpcConfig", qp: ParametricQp, sol: QpSolution
) -> float:
    """縮約前の問題のKKT条件の最大違反量.

    ダイナミクスの乗数 ν を後ろ向きに
        ν_k = A^T ν_{k+1} - 2 Q_k x_k + μ_low,k - μ_up,k   (ν_{N+1} = 0)
    で求め、入力についての停留条件
        2 R u_k - B^T ν_{k+1} - (入力制約の乗数の寄与) = 0
    の残差を見る. 状態制約と入力制約の乗数は縮約QPの λ をそのまま使い、
    予測軌道から直接求めた制約値で実行可能性・乗数の符号・相補性も確認する.
    """
    Q, R, P = _weights(ss, cfg)
    n, m, N = ss.n_state, ss.n_input, cfg.horizon
    n_junctions = len(ss.junction_phases)
    per_stage = 2 * m + n_junctions
    inputs = _inputs(ss, cfg, sol.primal)
    states = predict(ss, sol.param, inputs)
    lam = sol.dual

    state_rows = 2 * n if cfg.x_min is not None else n
    state_base = per_stage * N

    nu_next = np.zeros(n)
    residual = 0.0
    for k in range(N, 0, -1):
        x = states[k - 1]
        weight = P if k == N else Q
        base = state_base + (k - 1) * state_rows
        if cfg.x_min is not None:
            mu_low = lam[base : base + n]
            mu_up = lam[base + n : base + 2 * n]
        else:
            mu_low = np.zeros(n)
            mu_up = lam[base : base + n]

        # 入力 u_{k-1} の停留条件（ν_k が u_{k-1} に掛かる）
        nu_k = ss.A.T @ nu_next - 2.0 * weight @ x + mu_low - mu_up
        u = inputs[k - 1]
        row = (k - 1) * per_stage
        lam_low = lam[row : row + m]
        lam_up = lam[row + m : row + 2 * m]
        lam_cycle = lam[row + 2 * m : row + per_stage]
        input_term = lam_low - lam_up
        for j, phases in enumerate(ss.junction_phases):
            input_term[list(phases)] -= lam_cycle[j]
        stationarity = 2.0 * R @ u - ss.B.T @ nu_k - input_term
        residual = max(residual, float(np.max(np.abs(stationarity), initial=0.0)))
        nu_next = nu_k

    values = constraint_values(ss, cfg, sol.param, sol.primal)
    residual = max(
        residual,
        float(np.max(-values, initial=0.0)),
        float(np.max(-lam, initial=0.0)),
        float(np.max(np.abs(lam * values), initial=0.0)),
    )
    return residual


def joint_qp(ss: StateSpace, cfg: "MpcConfig") -> ParametricQp:
    """状態と入力をともに変数とするQP（縮約前の形）を組み立てる.

    変数は z = [u_0; ...; u_{N-1}; x_1; ...; x_N]、パラメータは x_0.
    ダイナミクス x_k = A x_{k-1} + B u_{k-1} + e は向きが逆の不等式の対で表す.
    目的関数 1/2 z^T H z は stage_cost と同じ値になる.
    """
    Q, R, P = _weights(ss, cfg)
    n, m, N = ss.n_state, ss.n_input, cfg.horizon
    n_junctions = len(ss.junction_phases)
    n_u = N * m
    n_z = n_u + N * n
    u_min = np.broadcast_to(np.asarray(cfg.u_min, dtype=float), (m,))
    u_max = np.broadcast_to(np.asarray(cfg.u_max, dtype=float), (m,))

    def u_cols(k: int) -> slice:
        return slice(k * m, (k + 1) * m)

    def x_cols(k: int) -> slice:
        return slice(n_u + (k - 1) * n, n_u + k * n)

    G_rows, W_rows, E_rows = [], [], []
    for k in range(N):
        block = np.zeros((m, n_z))
        block[:, u_cols(k)] = np.eye(m)
        G_rows += [block, -block]
        W_rows += [u_min, -u_max]
        E_rows += [np.zeros((m, n)), np.zeros((m, n))]
        coupling = np.zeros((n_junctions, n_z))
        for j, phases in enumerate(ss.junction_phases):
            coupling[j, [k * m + p for p in phases]] = -1.0
        G_rows.append(coupling)
        W_rows.append(ss.lost_time - ss.cycle_time)
        E_rows.append(np.zeros((n_junctions, n)))

    for k in range(1, N + 1):
        dynamics = np.zeros((n, n_z))
        dynamics[:, x_cols(k)] = np.eye(n)
        dynamics[:, u_cols(k - 1)] = -ss.B
        if k > 1:
            dynamics[:, x_cols(k - 1)] = -ss.A
        sensitivity = ss.A if k == 1 else np.zeros((n, n))
        G_rows += [dynamics, -dynamics]
        W_rows += [ss.e, -ss.e]
        E_rows += [sensitivity, -sensitivity]

        select = np.zeros((n, n_z))
        select[:, x_cols(k)] = np.eye(n)
        if cfg.x_min is not None:
            G_rows.append(select)
            W_rows.append(np.broadcast_to(np.asarray(cfg.x_min, dtype=float), (n,)))
            E_rows.append(np.zeros((n, n)))
        G_rows.append(-select)
        W_rows.append(-ss.capacity)
        E_rows.append(np.zeros((n, n)))

    H = 2.0 * linalg.block_diag(*([R] * N + [Q] * (N - 1) + [P]))
    return build_qp(
        H,
        np.zeros((n_z, n)),
        np.zeros(n_z),
        np.vstack(G_rows),
        np.concatenate(W_rows),
        np.vstack(E_rows),
    )
