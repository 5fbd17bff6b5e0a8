import pytest
import torch

from voxsep import synth
from voxsep.synth import SynthSpec

torch.set_num_threads(1)

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Recorder for one pass/fail line per acceptance criterion; the lines
    are replayed in a terminal summary section after the run."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Shared miniature corpus; 4 s songs keep the training tests quick.

    12 labeled ids -> 11 labeled + 1 validation, plus 6 unlabeled songs
    with cross-leakage.
    """
    root = tmp_path_factory.mktemp("corpus")
    spec = SynthSpec(n_labeled=12, n_unlabeled=6, song_seconds=4.0, seed=3)
    return synth.synth_corpus(spec, root)
