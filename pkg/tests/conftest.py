import numpy as np
import pytest

from app.config import DEFAULT_NETWORK_FILE, TWO_ROAD_NETWORK_FILE
from app.control.mpc import MpcConfig
from app.schemas.network import TrafficNetwork
from app.traffic.sfm_model import load_network


def make_network(junctions, links, turning=(), cycle_time=60.0) -> TrafficNetwork:
    """テスト用の小さなネットワークを dict から作る."""
    return TrafficNetwork.model_validate(
        {
            "cycle_time": cycle_time,
            "links": list(links),
            "junctions": list(junctions),
            "turning": list(turning),
        }
    )


def simple_link(link_id, downstream, upstream="O", capacity=100.0, saturation_flow=1800.0, **extra):
    return {
        "id": link_id,
        "capacity": capacity,
        "saturation_flow": saturation_flow,
        "upstream": upstream,
        "downstream": downstream,
        **extra,
    }


@pytest.fixture
def two_road_net() -> TrafficNetwork:
    return load_network(TWO_ROAD_NETWORK_FILE)


@pytest.fixture
def two_road_cfg() -> MpcConfig:
    return MpcConfig(horizon=1, cycle_time=60.0, n_itr=5, u_min=5.0, u_max=55.0, x_min=0.0)


@pytest.fixture
def toy_net() -> TrafficNetwork:
    return load_network(DEFAULT_NETWORK_FILE)


@pytest.fixture
def toy_cfg() -> MpcConfig:
    return MpcConfig(horizon=3, cycle_time=55.0, n_itr=30, u_min=5.0, u_max=55.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
