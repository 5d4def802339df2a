"""検証用のランダムなQPとネットワークの生成."""

from typing import Tuple

import numpy as np

from app.schemas.network import TrafficNetwork
from app.solver.qp_core import ParametricQp, build_qp


def random_feasible_qp(
    rng: np.random.Generator,
    n_vars: int,
    n_cons: int,
    n_state: int = 2,
) -> ParametricQp:
    """すべての x0 で実行可能なQPを作る.

    U_f(x0) = u0 + K x0 が常に実行可能になるよう b(x0) = G U_f(x0) - slack とする
    （W = G u0 - slack, E = G K）.
    """
    M = rng.normal(size=(n_vars, n_vars))
    H = M.T @ M + 0.1 * np.eye(n_vars)
    H = 0.5 * (H + H.T)
    F = rng.normal(size=(n_vars, n_state))
    g_c = rng.normal(size=n_vars)
    G = rng.normal(size=(n_cons, n_vars))
    u0 = rng.normal(size=n_vars)
    K = rng.normal(scale=0.5, size=(n_vars, n_state))
    slack = rng.uniform(0.0, 1.0, size=n_cons)
    W = G @ u0 - slack
    E = G @ K
    return build_qp(H, F, g_c, G, W, E)


def random_degenerate_qp(
    rng: np.random.Generator,
    n_vars: int,
    n_cons: int,
    n_state: int = 2,
) -> ParametricQp:
    """random_feasible_qp と同じく常に実行可能だが、縮退した行を含むQPを作る.

    基本行の一部はスラック0（U_f(x0) 上でタイト）で、残りの行は基本行の
    定数倍の複製. 負の倍数の複製はスラック0の行にだけ付け、等式を向きが逆の
    不等式の対で書いた形にする. 倍数は2のべきなので複製は丸めなしで厳密に一致する.
    """
    n_base = max(1, (n_cons + 1) // 2)
    M = rng.normal(size=(n_vars, n_vars))
    H = M.T @ M + 0.1 * np.eye(n_vars)
    H = 0.5 * (H + H.T)
    F = rng.normal(size=(n_vars, n_state))
    g_c = rng.normal(size=n_vars)
    G = rng.normal(size=(n_base, n_vars))
    u0 = rng.normal(size=n_vars)
    K = rng.normal(scale=0.5, size=(n_vars, n_state))

    slack = rng.uniform(0.0, 1.0, size=n_base)
    # 異なるタイトな超平面が n_vars 本を超えると U_f が縮退した頂点になる
    n_tight = int(rng.integers(0, min(n_base, n_vars) + 1))
    tight = rng.choice(n_base, size=n_tight, replace=False)
    slack[tight] = 0.0
    W = G @ u0 - slack
    E = G @ K

    rows, offsets, sens = [G], [W], [E]
    for _ in range(n_cons - n_base):
        j = int(rng.integers(n_base))
        scale = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
        if slack[j] == 0.0 and rng.random() < 0.5:
            scale = -scale
        rows.append(scale * G[j : j + 1])
        offsets.append(scale * W[j : j + 1])
        sens.append(scale * E[j : j + 1])
    return build_qp(H, F, g_c, np.vstack(rows), np.concatenate(offsets), np.vstack(sens))


def random_qp_dims(rng: np.random.Generator, max_vars: int = 6, max_cons: int = 10) -> Tuple[int, int]:
    return int(rng.integers(1, max_vars + 1)), int(rng.integers(1, max_cons + 1))


def random_network(rng: np.random.Generator, max_links: int = 4) -> TrafficNetwork:
    """1〜2交差点、リンク数 max_links 以下の小さなネットワーク.

    収容台数を大きく、公称流入を小さくとるので、縮約QPは小さな初期状態で実行可能になる.
    """
    n_links = int(rng.integers(1, max_links + 1))
    n_junctions = int(rng.integers(1, min(2, n_links) + 1))
    junction_ids = [f"J{k}" for k in range(n_junctions)]

    # 各交差点に少なくとも1本のリンクが入るようにする
    downstream = junction_ids + [
        junction_ids[int(rng.integers(n_junctions))] for _ in range(n_links - n_junctions)
    ]
    rng.shuffle(downstream)
    links = []
    for k in range(n_links):
        upstream = ["O"] + [j for j in junction_ids if j != downstream[k]]
        links.append(
            {
                "id": f"L{k}",
                "capacity": float(rng.uniform(300.0, 500.0)),
                "saturation_flow": float(rng.uniform(1200.0, 2400.0)),
                "upstream": upstream[int(rng.integers(len(upstream)))],
                "downstream": downstream[k],
                "demand": float(rng.uniform(0.0, 300.0)),
            }
        )

    junctions = []
    for j in junction_ids:
        incoming = [link["id"] for link in links if link["downstream"] == j]
        if len(incoming) > 1 and rng.random() < 0.5:
            cut = int(rng.integers(1, len(incoming)))
            phases = [incoming[:cut], incoming[cut:]]
        else:
            phases = [incoming]
        junctions.append({"id": j, "phases": phases, "lost_time": float(rng.uniform(0.0, 5.0))})

    turning = []
    for w in links:
        targets = [z for z in links if z["upstream"] == w["downstream"]]
        if not targets:
            continue
        rates = rng.dirichlet(np.ones(len(targets) + 1))[:-1]
        for z, rate in zip(targets, rates):
            turning.append({"from": w["id"], "to": z["id"], "rate": float(rate)})

    return TrafficNetwork.model_validate(
        {"name": "random", "cycle_time": 60.0, "links": links, "junctions": junctions, "turning": turning}
    )
