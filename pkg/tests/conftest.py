from dataclasses import replace

import pytest

from cmsc.config import Config


def tiny_config(**train) -> Config:
    """A few-second configuration for plumbing tests."""
    cfg = Config()
    steps = dict(pretrain_steps=2, stage1_steps=2, stage2_steps=2, stage3_steps=2, upper_steps=2, batch_size=2)
    steps.update(train)
    return replace(cfg, scene=replace(cfg.scene, height=16, width=16, channels=4, cav_min_distance=4.0,
                                     cav_max_distance=6.0, sensing_range=7.0),
                   train=replace(cfg.train, **steps),
                   experiment=replace(cfg.experiment, scenes=4, eval_batch=2, snr_list=[0.0, 20.0]))


@pytest.fixture
def tiny_cfg() -> Config:
    return tiny_config()


# one "criterion N PASS/FAIL: detail" line per acceptance criterion, echoed in the summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
