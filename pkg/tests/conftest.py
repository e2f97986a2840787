import pytest

from src.schemas import LinkConfig, RunConfig
from src.simcam import CameraIntrinsics
from src.world import load_scenario, load_scenario_file

SINGLE_TAG_DOC = """
[[tag]]
id = 0
center = [3.0, 0.0, 1.0]
normal = [-1.0, 0.0, 0.0]
"""


@pytest.fixture
def intr():
    return CameraIntrinsics()


@pytest.fixture(scope="session")
def gate_scene():
    return load_scenario_file("paper_fig3")


@pytest.fixture
def single_tag_scene():
    return load_scenario(SINGLE_TAG_DOC)


@pytest.fixture
def loopback_link():
    """Port 0 on both channels so parallel runs never collide."""
    return LinkConfig(frame_addr="127.0.0.1:0", command_addr="127.0.0.1:0", reply_timeout=10.0)


@pytest.fixture
def run_config(loopback_link):
    return RunConfig(link=loopback_link)
