import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from crossres.model import ModelConfig  # noqa: E402
from crossres.synth import write_dataset  # noqa: E402
from crossres.train import TrainConfig  # noqa: E402

TINY_STUDENT = ModelConfig(patch_size=8, embed_dim=16, num_layers=2, num_heads=2, search_resolution=32,
                           head_channels=8)
TINY_TEACHER = TINY_STUDENT.with_resolution(48)
TINY_TRAIN = TrainConfig(epochs=1, steps_per_epoch=3, batch_size=2, log_every=1)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    write_dataset(root / "train", 21, 4, 5, height=64, width=64)
    write_dataset(root / "eval", 22, 3, 5, height=64, width=64)
    return root


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} [{name}]: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
