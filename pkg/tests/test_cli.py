import csv

import pytest

import app.commands.verify as verify
from app.commands.sweep import parse_range
from app.config import DEFAULT_EXPERIMENT_FILE, DEFAULT_NETWORK_FILE, TWO_ROAD_NETWORK_FILE
from app.control.mpc import MpcConfig
from app.main import build_parser, main, overrides_from_args
from app.schemas.experiment import Scenario, load_experiment
from app.services.experiment_runner import RunJob, run_experiments
from app.services.result_store import METRICS_HEADER, ResultStore


def write_spec(tmp_path, cycles=3, extra_mpc=""):
    """2道路の例題を数サイクルだけ回す実験設定を書く."""
    path = tmp_path / "experiment.toml"
    path.write_text(
        f"""
[network]
file = "{TWO_ROAD_NETWORK_FILE.as_posix()}"

[scenario]
kinds = ["constant"]
horizon_cycles = {cycles}

[mpc]
horizon = 1
n_itr = 3
x_min = 0.0
{extra_mpc}

[run]
strategies = ["cold", "oass", "ours"]
out = "{(tmp_path / 'out').as_posix()}"
""",
        encoding="utf-8",
    )
    return path


def read_rows(path):
    with path.open(encoding="utf-8") as f:
        header = f.readline().strip()
        rows = list(csv.DictReader(f))
    return header, rows


# --- 引数と設定 ---


def test_overrides_only_include_given_flags():
    """指定したフラグだけが上書き設定に入るか"""
    args = build_parser().parse_args(["--strategy", "oass", "--seed", "3", "--n-itr", "5"])
    assert overrides_from_args(args) == {
        "run": {"strategies": ["oass"], "seed": 3},
        "mpc": {"n_itr": 5},
    }
    assert overrides_from_args(build_parser().parse_args([])) == {}


def test_default_experiment_resolves_network():
    """既定の実験設定から同梱ネットワークのパスが解決されるか"""
    spec = load_experiment(DEFAULT_EXPERIMENT_FILE)
    assert spec.network.file == DEFAULT_NETWORK_FILE
    assert spec.mpc.horizon == 3
    assert spec.mpc.n_itr == 30
    assert [s.kind for s in spec.scenarios()] == ["constant", "random"]


def test_overrides_merge_with_file():
    """フラグの上書きがファイルの設定と深くマージされるか"""
    spec = load_experiment(DEFAULT_EXPERIMENT_FILE, run={"seed": 9}, mpc={"n_itr": 12})
    assert spec.run.seed == 9
    assert spec.run.strategies == ["cold", "oass", "ours"]
    assert spec.mpc.n_itr == 12
    assert spec.mpc.horizon == 3
    assert all(s.seed == 9 for s in spec.scenarios())


def test_missing_experiment_file(tmp_path):
    """存在しない実験設定ファイルを指定するとエラーになるか"""
    with pytest.raises(FileNotFoundError):
        load_experiment(tmp_path / "none.toml")
    assert main(["--spec", str(tmp_path / "none.toml")]) == 1


def test_invalid_experiment_file(tmp_path):
    """範囲外の値を含む実験設定では終了コード1で終わるか"""
    path = write_spec(tmp_path, extra_mpc="g_min = -1.0")
    assert main(["--spec", str(path)]) == 1


def test_parse_range():
    """区間数スイープの範囲指定を正しく解釈するか"""
    assert parse_range("1:60") == (1, 60)
    for bad in ("5", "a:b", "3:1", "0:4"):
        with pytest.raises(ValueError):
            parse_range(bad)


# --- run ---


def test_run_writes_metrics_and_trajectories(tmp_path, capsys):
    """run でメトリクスと軌道のCSVが書き出され、要約が表示されるか"""
    # 1. 実行
    path = write_spec(tmp_path)
    assert main(["--spec", str(path)]) == 0

    # 2. 方式ごとのCSVを検証
    out = tmp_path / "out"
    for strategy in ("cold", "oass", "ours"):
        header, rows = read_rows(out / f"metrics_constant_{strategy}.csv")
        assert header == METRICS_HEADER
        assert [int(r["cycle"]) for r in rows] == [0, 1, 2]
        assert {r["strategy"] for r in rows} == {strategy}
        _, trajectory = read_rows(out / f"trajectory_constant_{strategy}.csv")
        assert len(trajectory) == 3 * 2
        assert {r["link"] for r in trajectory} == {"L1", "L2"}

    # 3. 要約の表示を検証
    printed = capsys.readouterr().out
    assert "MPC-oass" in printed
    assert "rho<=.5" in printed


def test_run_flags_select_strategy(tmp_path):
    """--strategy / --scenario で実行する組み合わせを絞れるか"""
    path = write_spec(tmp_path)
    out = tmp_path / "only_oass"
    assert main(["--spec", str(path), "--strategy", "oass", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "metrics_constant_oass.csv",
        "trajectory_constant_oass.csv",
    ]


def test_run_missing_network(tmp_path):
    """ネットワークファイルがなければ終了コード1で終わるか"""
    path = tmp_path / "experiment.toml"
    path.write_text('[network]\nfile = "nowhere.toml"\n', encoding="utf-8")
    assert main(["--spec", str(path)]) == 1


# --- sweep ---


def test_sweep_writes_rows(tmp_path):
    """sweep で区間数ごとの行が書き出されるか"""
    path = write_spec(tmp_path, cycles=3)
    assert main(["--spec", str(path), "--sweep", "1:3"]) == 0
    _, rows = read_rows(tmp_path / "out" / "sweep.csv")
    assert [int(r["n_itr"]) for r in rows] == [1, 2, 3]
    assert all(float(r["avg_last_interval"]) <= float(r["avg_total"]) for r in rows)
    assert sum(int(r["chosen"]) for r in rows) <= 1


def test_sweep_rejects_bad_range(tmp_path):
    """不正なスイープ範囲は終了コード1になるか"""
    path = write_spec(tmp_path)
    assert main(["--spec", str(path), "--sweep", "4:2"]) == 1


# --- verify ---


@pytest.fixture
def small_verification(monkeypatch):
    original = verify.run_verification

    def small(seed=0, fault=None):
        return original(oracle_instances=20, condense_instances=5, seed=seed, fault=fault)

    monkeypatch.setattr(verify, "run_verification", small)


def test_verify_passes(small_verification, capsys):
    """縮小した検証スイートがすべて通り、終了コード0になるか"""
    assert main(["--verify"]) == 0
    printed = capsys.readouterr().out
    assert "[PASS] oracle_equivalence_hot" in printed
    assert "FAIL" not in printed


def test_verify_detects_asymmetric_hessian(small_verification, capsys):
    """Hを非対称に改変すると検証が失敗を報告するか"""
    assert main(["--fault-asymmetry"]) == 1
    assert "[FAIL] two_road_qp_construction" in capsys.readouterr().out


def test_verification_report_names():
    """検証レポートに全チェックの名前が並ぶか"""
    report = verify.run_verification(oracle_instances=5, condense_instances=2, seed=4)
    names = [c.name for c in report.checks]
    assert names[:3] == ["oracle_equivalence_cold", "oracle_equivalence_hot", "path_optimality"]
    assert "condensation" in names
    assert "two_road_optimum" in names
    assert "sizing_rule" in names


# --- 並列実行と書き出し ---


@pytest.mark.asyncio
async def test_run_experiments_keeps_job_order(two_road_net, two_road_cfg):
    """並列実行でも結果がジョブの順に返るか"""
    jobs = [
        RunJob(two_road_net, Scenario(horizon_cycles=n), "oass", two_road_cfg)
        for n in (3, 1, 2)
    ]
    results = await run_experiments(jobs, max_jobs=2)
    assert [len(r.metrics.records) for r in results] == [3, 1, 2]


@pytest.mark.asyncio
async def test_run_experiments_rejects_zero_jobs(two_road_net, two_road_cfg):
    """並列数0は ValueError になるか"""
    with pytest.raises(ValueError):
        await run_experiments([RunJob(two_road_net, Scenario(horizon_cycles=1), "oass", two_road_cfg)], 0)


def test_result_store_trajectory_greens(tmp_path, two_road_net):
    """軌道CSVに各サイクルの青時間が書かれるか"""
    store = ResultStore(tmp_path)
    path = store.save_trajectory(
        two_road_net, "oass", "constant", [[1.0, 2.0], [3.0, 4.0]], [[20.0, 40.0]]
    )
    _, rows = read_rows(path)
    assert [(r["link"], float(r["queue"]), float(r["green"])) for r in rows] == [
        ("L1", 1.0, 20.0),
        ("L2", 2.0, 40.0),
    ]
    assert store.written == [path]


def test_mpc_config_is_built_from_spec(tmp_path):
    """実験設定の [mpc] セクションから MpcConfig が作られるか"""
    from app.commands.run import build_mpc_config
    from app.traffic.sfm_model import load_network

    spec = load_experiment(write_spec(tmp_path))
    cfg = build_mpc_config(spec, load_network(spec.network.file), n_itr=7)
    assert cfg == MpcConfig(horizon=1, cycle_time=60.0, n_itr=7, u_min=5.0, u_max=55.0, x_min=0.0)
