"""組み込みの検証スイート.

ランダムQPでの全列挙オラクルとの一致、ホモトピー経路上の最適性、
縮約の正しさ、2道路の例題、区間数の決定規則を確認する.
"""

import logging
import time
from typing import Callable, List, Optional

import numpy as np

from app.config import (
    KKT_TOL,
    TWO_ROAD_NETWORK_FILE,
    VERIFY_CONDENSE_INSTANCES,
    VERIFY_ORACLE_INSTANCES,
)
from app.control.mpc import MpcConfig, choose_intervals, create_controller
from app.errors import SolverError
from app.schemas.experiment import Scenario
from app.schemas.metrics import CheckResult, VerifyReport
from app.sim.closed_loop import run_closed_loop
from app.solver.oass import advance, begin_homotopy, cold_solve
from app.solver.oracle import brute_force_solve, compare_with_oracle
from app.solver.qp_core import build_qp, eval_bounds
from app.traffic.sfm_model import condense, linearize, load_network, step_dynamics
from app.traffic.sparse_form import constraint_values, joint_kkt_residual, joint_qp, stage_cost
from app.utils.instances import random_feasible_qp, random_network, random_qp_dims

logger = logging.getLogger(__name__)

# オラクルとの一致の許容誤差
ORACLE_MATCH_TOL = 1e-7
# 2道路の例題の設定
TWO_ROAD_CONFIG = dict(horizon=1, cycle_time=60.0, n_itr=5, u_min=5.0, u_max=55.0, x_min=0.0)
TWO_ROAD_CYCLES = 4
# 縮約前のQPを全列挙でも解くインスタンスの大きさの上限
JOINT_ORACLE_MAX_VARS = 4
JOINT_ORACLE_MAX_CONS = 12

# 検証対象のQPを改変するフック（テスト用）
FaultHook = Callable[[np.ndarray], np.ndarray]


def check_oracle_equivalence(instances: int, seed: int) -> List[CheckResult]:
    """コールド・ホットの両方を全列挙オラクルと比べ、区切り点ごとのKKTも確認する."""
    rng = np.random.default_rng(seed)
    worst = {"cold": 0.0, "hot": 0.0}
    failures = {"cold": 0, "hot": 0}
    path_checks = 0
    path_violations = 0

    def observe(hs):
        nonlocal path_checks, path_violations
        path_checks += 1
        if not hs.kkt_report(qp, KKT_TOL).ok:
            path_violations += 1

    for _ in range(instances):
        n_vars, n_cons = random_qp_dims(rng)
        qp = random_feasible_qp(rng, n_vars, n_cons)
        x_a = rng.normal(size=qp.n_state)
        x_b = x_a + rng.normal(scale=0.5, size=qp.n_state)
        try:
            start, _ = cold_solve(qp, x_a)
            hs = begin_homotopy(start, x_b, qp)
            advance(hs, qp, observer=observe)
            hot = hs.solution
            cold, _ = cold_solve(qp, x_b)
        except SolverError as e:
            logger.warning(f"solver failed on a random instance: {e}")
            failures["cold"] += 1
            continue
        for name, primal in (("cold", cold.primal), ("hot", hot.primal)):
            gap = compare_with_oracle(qp, x_b, primal)
            if gap is None or gap > ORACLE_MATCH_TOL:
                failures[name] += 1
            else:
                worst[name] = max(worst[name], gap)

    return [
        CheckResult(
            name=f"oracle_equivalence_{name}",
            passed=failures[name] == 0,
            instances=instances,
            detail=f"{failures[name]} mismatches, worst gap {worst[name]:.2e}",
        )
        for name in ("cold", "hot")
    ] + [
        CheckResult(
            name="path_optimality",
            passed=path_violations == 0,
            instances=path_checks,
            detail=f"{path_violations} breakpoints violate KKT at tol {KKT_TOL:g}",
        )
    ]


def check_condensation(instances: int, seed: int) -> CheckResult:
    """縮約QPの目的関数・制約・最適解を縮約前の形と突き合わせる.

    小さなインスタンスでは、状態も変数とする縮約前のQPを全列挙で独立に解いて比べる.
    """
    rng = np.random.default_rng(seed)
    failures = 0
    worst = 0.0
    oracle_checked = 0
    for _ in range(instances):
        net = random_network(rng)
        cfg = MpcConfig(
            horizon=int(rng.integers(1, 4)),
            cycle_time=net.cycle_time,
            u_min=2.0,
            u_max=40.0,
        )
        ss = linearize(net)
        qp = condense(ss, cfg)
        x0 = rng.uniform(0.0, 10.0, size=ss.n_state)
        U = rng.uniform(cfg.u_min, cfg.u_max, size=qp.n_vars)

        offset = stage_cost(ss, cfg, x0, np.zeros(qp.n_vars)) - qp.objective(np.zeros(qp.n_vars), x0)
        gaps = [
            abs(qp.objective(U, x0) + offset - stage_cost(ss, cfg, x0, U)),
            float(np.max(np.abs(qp.G @ U - eval_bounds(qp, x0) - constraint_values(ss, cfg, x0, U)))),
        ]
        try:
            sol, _ = cold_solve(qp, x0)
            gaps.append(joint_kkt_residual(ss, cfg, qp, sol))
            joint = joint_qp(ss, cfg)
            if joint.n_vars <= JOINT_ORACLE_MAX_VARS and joint.n_cons <= JOINT_ORACLE_MAX_CONS:
                ref = brute_force_solve(joint, x0)
                gaps.append(float(np.max(np.abs(ref.primal[: qp.n_vars] - sol.primal))))
                gaps.append(abs(joint.objective(ref.primal, x0) - stage_cost(ss, cfg, x0, sol.primal)))
                oracle_checked += 1
        except SolverError as e:
            logger.warning(f"condensed QP of a random network failed: {e}")
            failures += 1
            continue
        gap = max(gaps)
        worst = max(worst, gap)
        if gap > ORACLE_MATCH_TOL:
            failures += 1
    return CheckResult(
        name="condensation",
        passed=failures == 0,
        instances=instances,
        detail=f"{failures} mismatches, worst gap {worst:.2e}, {oracle_checked} solved in joint form",
    )


def check_two_road(fault: Optional[FaultHook] = None) -> List[CheckResult]:
    """2道路の例題: 制約数, 既知の最適解, プラントの1ステップ, 変更回数の関係."""
    net = load_network(TWO_ROAD_NETWORK_FILE)
    cfg = MpcConfig(**TWO_ROAD_CONFIG)
    ss = linearize(net)
    results = []

    try:
        qp = condense(ss, cfg)
        H = qp.H if fault is None else fault(qp.H.copy())
        qp = build_qp(H, qp.F, qp.g_c, qp.G, qp.W, qp.E)
    except (SolverError, ValueError) as e:
        return [CheckResult(name="two_road_qp_construction", passed=False, detail=str(e))]
    results.append(
        CheckResult(
            name="two_road_qp_construction",
            passed=qp.n_vars == 2 and qp.n_cons == 9,
            detail=f"n_vars={qp.n_vars}, n_cons={qp.n_cons}",
        )
    )

    sol, _ = cold_solve(qp, [100.0, 90.0])
    expected = np.array([22.5, 37.5])
    results.append(
        CheckResult(
            name="two_road_optimum",
            passed=bool(np.allclose(sol.primal, expected, atol=1e-7)),
            detail=f"u*={np.round(sol.primal, 9).tolist()}",
        )
    )

    x_next = step_dynamics(net, [50.0, 50.0], [30.0, 30.0])
    results.append(
        CheckResult(
            name="two_road_plant_step",
            passed=bool(np.allclose(x_next, [73.6, 73.6], atol=1e-12)),
            detail=f"x_next={x_next.tolist()}",
        )
    )

    scenario = Scenario(kind="constant", rate=1.0, horizon_cycles=TWO_ROAD_CYCLES)
    runs = {s: run_closed_loop(net, scenario, s, cfg) for s in ("cold", "oass", "ours")}
    cold = runs["cold"].metrics.per_cycle_changes
    hot = runs["oass"].metrics.per_cycle_changes
    last = runs["ours"].metrics.last_interval_changes
    same_plans = all(
        np.allclose(runs["cold"].plans, runs[s].plans, atol=1e-6) for s in ("oass", "ours")
    )
    results.append(
        CheckResult(
            name="two_road_change_counts",
            passed=sum(cold[1:]) >= sum(hot[1:]) and max(last[1:], default=0) <= 2 and same_plans,
            instances=TWO_ROAD_CYCLES,
            detail=f"cold={cold}, hot={hot}, last interval={last}, same plans={same_plans}",
        )
    )
    return results


def check_sizing_rule() -> CheckResult:
    cases = {(0, 0, 0): 1, (29,): 30, (4,): 5, (100,): 60}
    wrong = [h for h, n in cases.items() if choose_intervals(list(h)) != n]
    return CheckResult(
        name="sizing_rule",
        passed=not wrong,
        instances=len(cases),
        detail=f"wrong for {wrong}" if wrong else "n_itr = n_a + 1 on all histories",
    )


def run_verification(
    oracle_instances: int = VERIFY_ORACLE_INSTANCES,
    condense_instances: int = VERIFY_CONDENSE_INSTANCES,
    seed: int = 0,
    fault: Optional[FaultHook] = None,
) -> VerifyReport:
    report = VerifyReport()
    report.checks += check_oracle_equivalence(oracle_instances, seed)
    report.checks.append(check_condensation(condense_instances, seed + 1))
    report.checks += check_two_road(fault)
    report.checks.append(check_sizing_rule())
    return report


def asymmetry_fault(H: np.ndarray) -> np.ndarray:
    """H[0, 1] を 1e-3 だけずらす."""
    H[0, 1] += 1e-3
    return H


def cmd_verify(fault: Optional[FaultHook] = None, seed: int = 0) -> int:
    """検証スイートを実行して結果を表示する. 1つでも失敗すれば1を返す."""
    started = time.perf_counter()
    report = run_verification(seed=seed, fault=fault)
    print()
    for check in report.checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"[{status}] {check.name:<28} instances={check.instances:<6} {check.detail}")
    print(f"\n{sum(c.passed for c in report.checks)}/{len(report.checks)} checks passed "
          f"in {time.perf_counter() - started:.1f} s")
    if not report.passed:
        logger.error(f"Verification failed: {[c.name for c in report.checks if not c.passed]}")
        return 1
    return 0
