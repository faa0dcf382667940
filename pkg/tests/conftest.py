import numpy as np
import pytest

from avalign.core import AUDIO, VISUAL, Dataset, ModalSequence, VideoSample
from avalign.datagen import GenConfig, generate_dataset, make_family


def make_sample(id, audio_labels, visual_labels, D=3, seed=0):
    rng = np.random.default_rng(seed)
    T = len(audio_labels)
    return VideoSample(
        id=id,
        audio=ModalSequence(AUDIO, rng.standard_normal((T, D))),
        visual=ModalSequence(VISUAL, rng.standard_normal((T, D))),
        seg_labels_audio=tuple(frozenset(s) for s in audio_labels),
        seg_labels_visual=tuple(frozenset(s) for s in visual_labels),
        video_labels=frozenset().union(*audio_labels, *visual_labels),
    )


@pytest.fixture
def tiny_gen():
    return GenConfig(videos=12, T=5, C=3, L=4, D_audio=8, D_visual=8, density_audio=0.5, density_visual=0.5, seed=3)


@pytest.fixture
def tiny_dataset(tiny_gen) -> Dataset:
    return generate_dataset(tiny_gen, make_family("a", 8, 4, 1), make_family("v", 8, 4, 2))


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """Report one acceptance line, then fail the test if the criterion failed."""

    def report(number: int, name: str, passed: bool, detail: str):
        line = f"criterion {number} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
        request.config.stash.setdefault(ACCEPTANCE_LINES, []).append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert passed, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
