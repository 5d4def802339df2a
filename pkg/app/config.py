import os
from pathlib import Path
from dotenv import load_dotenv

# .envファイルを読み込む
load_dotenv()

# システム設定
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

# 同梱データ（ネットワーク定義・既定の実験設定）
DATA_DIR = Path(__file__).parent / "data"
DEFAULT_NETWORK_FILE = DATA_DIR / "toy_network.toml"
TWO_ROAD_NETWORK_FILE = DATA_DIR / "two_road.toml"
DEFAULT_EXPERIMENT_FILE = DATA_DIR / "toy_experiment.toml"

# --- ソルバー許容誤差 ---
# ステップ比の分母がこれ以下なら0とみなす（主の阻止では変化率の大きさに対する相対値）
ZERO_TOL = 1e-12
# τ が 1 からこの距離以内なら目標に到達したとみなす（一次従属な阻止制約の扱い）
TAU_TOL = 1e-9
# Hの対称性チェック
SYMMETRY_TOL = 1e-10
# 開始点・経路上のKKTチェック
KKT_TOL = 1e-8
# シューア補元のコレスキー分解で、ピボット²/最大ピボット² がこれ以下なら階数落ち
RANK_TOL = 1e-12
# 一次従属判定（最小二乗残差 / max(1, ‖G_i‖)）
DEPENDENCY_TOL = 1e-9
# 1回の求解の反復上限 = ITERATION_FACTOR * (n_cons + 1)
ITERATION_FACTOR = 10
# コールドスタート補助問題で全制約に持たせる余裕
COLD_START_SLACK = 1.0

# --- 交通モデル・実験の既定値 ---
DEFAULT_CYCLE_TIME = 55.0  # 秒
DEFAULT_HORIZON = 3  # サイクル数
DEFAULT_G_MIN = 5.0  # 秒
DEFAULT_G_MAX = 55.0  # 秒
DEFAULT_R_WEIGHT = 0.01
DEFAULT_N_ITR = 30
N_ITR_CEILING = 60
# 区間数推定のEMA平滑化係数
EMA_SMOOTHING = 0.3
CONSTANT_INFLOW = 1200.0  # veh/h
RANDOM_INFLOW_LOW = 200.0  # veh/h
RANDOM_INFLOW_HIGH = 2400.0  # veh/h
DEFAULT_HORIZON_CYCLES = 100
# 区間数スイープで「良い動作点」として印を付ける目安
SWEEP_OPERATING_POINT = 30

# オラクル検証のインスタンス数
VERIFY_ORACLE_INSTANCES = 1000
VERIFY_CONDENSE_INSTANCES = 100
