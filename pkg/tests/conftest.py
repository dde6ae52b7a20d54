import re

import numpy as np
import pytest
import torch

from latentvad.data import Video
from latentvad.model import AnomalyNet, ModelConfig

torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(input_size=(16, 16), k=4, encoder_blocks=2, base_channels=4, latent_channels=8, t_offset=2)


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return AnomalyNet(tiny_cfg).eval()


def random_video(n=20, size=(16, 16), seed=0, video_id="v", labels=None):
    rng = np.random.default_rng(seed)
    frames = rng.uniform(0, 1, (n, *size, 3)).astype(np.float32)
    return Video(video_id, frames, labels=labels)


# one PASS/FAIL line per acceptance criterion, printed after the run
_CRITERIA = {}
_CRITERION_TEST = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    m = _CRITERION_TEST.search(report.nodeid)
    if not m or not (report.when == "call" or report.failed):
        return
    detail = dict(report.user_properties).get("detail", "")
    _CRITERIA[int(m.group(1))] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
