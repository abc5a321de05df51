import numpy as np
import pytest
import torch
from hypothesis import settings

from countocc.scene import AnnotatedScene, BoxAnnotation

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)


def scene_from_centers(centers, width=64, height=64, half=1.0, image_id=0):
    """Scene whose boxes are small squares around the given (x, y) points."""
    boxes = [BoxAnnotation(max(0.0, x - half), max(0.0, y - half), min(width, x + half), min(height, y + half))
             for x, y in centers]
    return AnnotatedScene(image_id=image_id, width=width, height=height, boxes=boxes)


@pytest.fixture
def make_scene():
    return scene_from_centers


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
