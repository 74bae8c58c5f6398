import sys

import pytest
import torch

from magsd.backbone import BackboneConfig


@pytest.fixture
def micro_backbone():
    return BackboneConfig(stage_channels=(3, 4, 5), stem_channels=2, blocks_per_stage=(1, 1, 1), input_size=32)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
