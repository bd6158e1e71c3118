import pytest
import torch

from videotok.fixtures import make_corpus
from videotok.model import RunConfig


@pytest.fixture(scope="session")
def small_config() -> RunConfig:
    return RunConfig(height=16, width=16, steps=0, n_clips=8)


@pytest.fixture(scope="session")
def small_corpus(small_config):
    c = small_config
    return make_corpus(c.n_clips, (c.frames, c.height, c.width), seed=c.data_seed, levels=c.levels)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_acceptance(number: int, title: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (title, bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} {detail}".rstrip())
