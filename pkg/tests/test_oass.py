import numpy as np
import pytest

from app.errors import Infeasible, NotOptimalStart
from app.solver.oass import (
    StepKind,
    advance,
    begin_homotopy,
    cold_solve,
    hot_solve,
    max_step,
    step_directions,
)
from app.solver.oracle import brute_force_solve
from app.solver.qp_core import QpSolution, WorkingSet, build_qp, check_kkt
from app.traffic.sfm_model import condense, linearize
from app.utils.instances import random_feasible_qp


def box_qp():
    """U >= x（成分ごと）で勾配0. 最適解は max(x, 0)."""
    return build_qp(np.eye(2), np.zeros((2, 2)), np.zeros(2), np.eye(2), np.zeros(2), np.eye(2))


def unconstrained_qp():
    return build_qp(2 * np.eye(2), np.eye(2), np.zeros(2), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)))


def scaled_copy_qp():
    """min 1/2 U^2 + U  s.t. U >= x (行0), 2U >= 3x - 0.6 (行1).

    行1は行0の2倍の法線を持つ. x = 0 では行0がアクティブ（λ0 = 1）で、
    x を 1 へ動かすと x = 0.6 で行1がタイトになり、行0と交換される.
    """
    return build_qp([[1.0]], [[0.0]], [1.0], [[1.0], [2.0]], [0.0, -0.6], [[1.0], [3.0]])


def paired_equality_qp(scale: float, g_c: float):
    """U = 0.3 + 0.2 x を U >= b と -scale U >= -scale b の対で表したQP."""
    return build_qp(
        [[1.0]],
        [[0.0]],
        [g_c],
        [[1.0], [-scale]],
        [0.3, -0.3 * scale],
        [[0.2], [-0.2 * scale]],
    )


# --- begin_homotopy ---


def test_zero_homotopy_reaches_immediately():
    """同じパラメータへのホモトピーは変更なしで即座に到達するか"""
    # 1. 解いた点から同じ点へのホモトピーを開始
    qp = box_qp()
    prev, _ = cold_solve(qp, [0.5, -1.0])
    hs = begin_homotopy(prev, prev.param, qp)

    # 2. 検証: データの変化量は0で、最初のステップで到達する
    assert hs.tau == 0.0
    np.testing.assert_array_equal(hs.delta.dg, 0.0)
    np.testing.assert_array_equal(hs.delta.db, 0.0)
    outcome = max_step(hs, step_directions(hs, qp), qp)
    assert outcome.kind == StepKind.REACHED
    assert outcome.tau_step == 1.0
    _, finished = advance(hs, qp)
    assert finished
    assert hs.changes == 0
    assert hs.breakpoints == []


def test_begin_homotopy_two_road(two_road_net, two_road_cfg):
    """2道路の例題で変化量 dx0, dg, db が F, E から正しく作られるか"""
    qp = condense(linearize(two_road_net), two_road_cfg)
    prev, _ = cold_solve(qp, [100.0, 90.0])
    hs = begin_homotopy(prev, [73.6, 73.6], qp)
    assert hs.tau == 0.0
    np.testing.assert_allclose(hs.delta.dx0, [-26.4, -16.4])
    np.testing.assert_allclose(hs.delta.dg, qp.F @ hs.delta.dx0)
    np.testing.assert_allclose(hs.delta.db, qp.E @ hs.delta.dx0)


def test_begin_homotopy_rejects_wrong_dual_sign():
    """乗数の符号が逆の開始点は NotOptimalStart になるか"""
    qp = build_qp(np.eye(2), np.zeros((2, 1)), [-3.0, 0.0], [[-1.0, 0.0]], [-1.0], np.zeros((1, 1)))
    prev, _ = cold_solve(qp, [0.0])
    bad = prev.copy()
    bad.dual[0] = -bad.dual[0]
    with pytest.raises(NotOptimalStart):
        begin_homotopy(bad, [0.0], qp)


# --- step_directions ---


def test_step_directions_unconstrained():
    """制約なしのQPで方向が -H^{-1} dg になるか"""
    qp = unconstrained_qp()
    prev = QpSolution(np.zeros(2), np.zeros(0), WorkingSet.empty(0), np.zeros(2))
    hs = begin_homotopy(prev, np.zeros(2), qp)
    d_primal, d_lambda = step_directions(hs, qp)
    np.testing.assert_allclose(d_primal, [0.0, 0.0])
    hs = begin_homotopy(prev, [2.0, 0.0], qp)
    d_primal, d_lambda = step_directions(hs, qp)
    np.testing.assert_allclose(d_primal, [-1.0, 0.0])
    assert d_lambda.size == 0


def test_step_directions_with_active_bound(two_road_net, two_road_cfg):
    """アクティブ制約がある場合の方向が鞍点系の直接解と一致するか"""
    # 1. 2道路の例題でホモトピーを開始
    qp = condense(linearize(two_road_net), two_road_cfg)
    prev, _ = cold_solve(qp, [100.0, 90.0])
    hs = begin_homotopy(prev, [73.6, 73.6], qp)
    d_primal, d_lambda = step_directions(hs, qp)

    # 2. 鞍点系をそのまま組み立てて解いた結果と比べる
    active = list(prev.working_set.active)
    G_A = qp.G[active]
    n, k = qp.n_vars, len(active)
    kkt = np.block([[qp.H, G_A.T], [G_A, np.zeros((k, k))]])
    rhs = np.concatenate([-hs.delta.dg, hs.delta.db[active]])
    expected = np.linalg.solve(kkt, rhs)
    np.testing.assert_allclose(d_primal, expected[:n], atol=1e-12)
    np.testing.assert_allclose(d_lambda, -expected[n:], atol=1e-12)


# --- max_step ---


def test_max_step_primal_block():
    """非アクティブ制約のスラックが0になる τ を主の阻止として返すか"""
    # U >= x - 0.4, 勾配0. x: 0 -> 1 でスラック0.4が0になる
    qp = build_qp([[1.0]], [[0.0]], [0.0], [[1.0]], [-0.4], [[1.0]])
    prev, _ = cold_solve(qp, [0.0])
    hs = begin_homotopy(prev, [1.0], qp)
    outcome = max_step(hs, step_directions(hs, qp), qp)
    assert outcome.kind == StepKind.PRIMAL_BLOCK
    assert outcome.index == 0
    assert outcome.tau_step == pytest.approx(0.4)


def test_max_step_dual_block():
    """アクティブ制約の乗数が0になる τ を双対の阻止として返すか"""
    # U >= 0 がアクティブで λ = g = 0.2 - 0.5 x
    qp = build_qp([[1.0]], [[-0.5]], [0.2], [[1.0]], [0.0], [[0.0]])
    prev, _ = cold_solve(qp, [0.0])
    assert prev.working_set.active == (0,)
    assert prev.dual[0] == pytest.approx(0.2)
    hs = begin_homotopy(prev, [1.0], qp)
    d_primal, d_lambda = step_directions(hs, qp)
    assert d_lambda[0] == pytest.approx(-0.5)
    outcome = max_step(hs, (d_primal, d_lambda), qp)
    assert outcome.kind == StepKind.DUAL_BLOCK
    assert outcome.index == 0
    assert outcome.tau_step == pytest.approx(0.4)


def test_max_step_reached_without_blocking():
    """阻止する制約がなければ残り区間をそのまま返すか"""
    qp = box_qp()
    prev, _ = cold_solve(qp, [-2.0, -2.0])
    hs = begin_homotopy(prev, [-1.0, -1.5], qp)
    outcome = max_step(hs, step_directions(hs, qp), qp)
    assert outcome.kind == StepKind.REACHED
    assert outcome.tau_step == pytest.approx(1.0)


def test_max_step_block_at_segment_end_counts_as_reached():
    """区間の終端でちょうどタイトになる制約は阻止ではなく到達として扱うか"""
    # U >= x - 1 は x = 1 で初めてタイトになる
    qp = build_qp([[1.0]], [[0.0]], [0.0], [[1.0]], [-1.0], [[1.0]])
    prev, _ = cold_solve(qp, [0.0])
    hs = begin_homotopy(prev, [1.0], qp)
    outcome = max_step(hs, step_directions(hs, qp), qp)
    assert outcome.kind == StepKind.REACHED


# --- advance ---


def test_advance_budget_interrupts_at_optimal_point():
    """予算で打ち切っても、その τ で最適な状態が残り、続きから解き切れるか"""
    # 1. 予算1で途中まで進める
    qp = box_qp()
    prev, _ = cold_solve(qp, [-1.0, -1.0])
    hs = begin_homotopy(prev, [1.0, 2.0], qp)
    hs, finished = advance(hs, qp, budget=1)

    # 2. 打ち切った点 x~0(τ) で最適か
    assert not finished
    assert hs.changes == 1
    assert 0.0 < hs.tau < 1.0
    assert hs.kkt_report(qp).ok
    assert check_kkt(qp, hs.solution).ok
    np.testing.assert_allclose(hs.solution.param, hs.param_at(hs.tau))
    assert hs.breakpoints == [pytest.approx(1.0 / 3.0)]

    # 3. 残りを解き切る
    hs, finished = advance(hs, qp)
    assert finished
    assert hs.changes == 2
    np.testing.assert_allclose(hs.solution.primal, [1.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(hs.solution.param, [1.0, 2.0])
    assert hs.breakpoints == [pytest.approx(1.0 / 3.0), pytest.approx(0.5)]


def test_advance_path_optimality_on_random_instances(rng):
    """ランダムなQPで、すべての区切り点においてKKT条件が満たされるか"""
    violations = []
    observed = 0

    for _ in range(200):
        # 1. インスタンスと開始点
        n_vars = int(rng.integers(1, 7))
        n_cons = int(rng.integers(1, 11))
        qp = random_feasible_qp(rng, n_vars, n_cons)
        x_a = rng.normal(size=qp.n_state)
        x_b = x_a + rng.normal(size=qp.n_state)
        prev, _ = cold_solve(qp, x_a)
        taus = []

        def observe(hs):
            nonlocal observed
            observed += 1
            taus.append(hs.tau)
            report = hs.kkt_report(qp, 1e-8)
            if not report.ok:
                violations.append(report)

        # 2. 区切り点ごとに観測しながら進める
        hs = begin_homotopy(prev, x_b, qp)
        advance(hs, qp, observer=observe)

        # 3. 区切り点は単調で、最後の観測が終端
        assert hs.finished
        assert hs.breakpoints == sorted(hs.breakpoints)
        assert all(0.0 <= t <= 1.0 for t in hs.breakpoints)
        assert taus[-1] == 1.0
    assert observed > 0
    assert violations == []


def test_advance_raises_on_infeasible_target():
    """目標パラメータが実行不能なら Infeasible になるか"""
    # U >= x と U <= 1. x = 2 は実行不能
    qp = build_qp([[1.0]], [[0.0]], [-0.5], [[1.0], [-1.0]], [0.0, -1.0], [[1.0], [0.0]])
    prev, _ = cold_solve(qp, [0.0])
    with pytest.raises(Infeasible):
        hot_solve(prev, [2.0], qp)


def test_advance_exchanges_linearly_dependent_constraint():
    """一次従属な制約が阻止したとき、交換で2回分の変更になり最適性が保たれるか"""
    # 1. x = 0 の解は行0だけがアクティブ
    qp = scaled_copy_qp()
    prev, _ = cold_solve(qp, [0.0])
    assert prev.working_set.active == (0,)
    assert prev.dual[0] == pytest.approx(1.0)

    # 2. 最初の区切り点で止めて中身を見る
    hs = begin_homotopy(prev, [1.0], qp)
    snapshots = []
    advance(hs, qp, observer=lambda s: snapshots.append((s.tau, s.changes, s.solution.copy(), s.kkt_report(qp).ok)))

    # 3. τ = 0.6 で行0と行1が交換され、乗数は λ0 = 1.6 から λ1 = 0.8 へ移る
    tau, changes, sol, ok = snapshots[0]
    assert tau == pytest.approx(0.6)
    assert changes == 2
    assert sol.working_set.active == (1,)
    assert sol.dual[0] == 0.0
    assert sol.dual[1] == pytest.approx(0.8)
    np.testing.assert_allclose(sol.primal, [0.6])
    assert ok

    # 4. 目標では U = (3 - 0.6) / 2
    assert hs.finished
    assert hs.changes == 2
    assert hs.breakpoints == [pytest.approx(0.6)]
    np.testing.assert_allclose(hs.solution.primal, [1.2], atol=1e-12)
    assert hs.solution.dual[1] == pytest.approx(1.1)
    assert check_kkt(qp, hs.solution).ok
    np.testing.assert_allclose(hs.solution.primal, brute_force_solve(qp, [1.0]).primal, atol=1e-12)


@pytest.mark.parametrize("scale", [1.0, 2.0, 3.0, 0.7])
@pytest.mark.parametrize("g_c", [0.0, -1.0])
def test_paired_inequalities_act_as_equality(scale, g_c):
    """等式を向きが逆の不等式の対で書いたQPを、コールド・ホットの両方で解けるか"""
    # 1. コールドスタート: 補助QPの許容区間が τ = 1 でちょうど1点につぶれる
    qp = paired_equality_qp(scale, g_c)
    cold, _ = cold_solve(qp, [0.0])
    np.testing.assert_allclose(cold.primal, [0.3], atol=1e-9)
    np.testing.assert_allclose(cold.primal, brute_force_solve(qp, [0.0]).primal, atol=1e-9)
    assert check_kkt(qp, cold).ok

    # 2. ホットスタート: 対の片方がアクティブなまま等式に沿って動く
    hot, _ = hot_solve(cold, [1.0], qp)
    np.testing.assert_allclose(hot.primal, [0.5], atol=1e-9)
    np.testing.assert_allclose(hot.primal, brute_force_solve(qp, [1.0]).primal, atol=1e-9)
    assert check_kkt(qp, hot).ok


# --- hot_solve ---


def test_hot_solve_identity_target():
    """同じパラメータへのホットスタートは変更0で同じ解を返すか"""
    qp = box_qp()
    prev, _ = cold_solve(qp, [0.5, -1.0])
    sol, changes = hot_solve(prev, prev.param, qp)
    assert changes == 0
    np.testing.assert_allclose(sol.primal, prev.primal)
    assert sol.working_set == prev.working_set


def test_hot_solve_matches_cold_start(rng):
    """ホットスタートの解がコールドスタート・全列挙と一致するか"""
    for _ in range(200):
        qp = random_feasible_qp(rng, 5, int(rng.integers(1, 11)))
        x_a = rng.normal(size=qp.n_state)
        x_b = rng.normal(size=qp.n_state)
        prev, _ = cold_solve(qp, x_a)
        hot, _ = hot_solve(prev, x_b, qp)
        cold, _ = cold_solve(qp, x_b)
        np.testing.assert_allclose(hot.primal, cold.primal, atol=1e-7)
        ref = brute_force_solve(qp, x_b)
        np.testing.assert_allclose(hot.primal, ref.primal, atol=1e-7)


def test_hot_start_needs_fewer_changes_for_small_steps(rng):
    """小さなパラメータ変化では、ほとんどの場合ホットスタートの変更回数がコールド以下か"""
    not_worse = 0
    trials = 200
    for _ in range(trials):
        qp = random_feasible_qp(rng, int(rng.integers(2, 7)), int(rng.integers(2, 11)))
        x_a = rng.normal(size=qp.n_state)
        x_b = x_a + rng.normal(scale=0.05, size=qp.n_state)
        prev, _ = cold_solve(qp, x_a)
        _, hot_changes = hot_solve(prev, x_b, qp)
        _, cold_changes = cold_solve(qp, x_b)
        not_worse += hot_changes <= cold_changes
    assert not_worse >= 0.9 * trials
