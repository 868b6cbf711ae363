import numpy as np
import pytest

from odesplat.render import Camera, look_at


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_camera(width=16, height=16, f=20.0, eye=(0.0, -3.0, 0.5), target=(0.0, 0.0, 0.0)):
    return Camera(look_at(np.array(eye), np.array(target)), f, f, width / 2, height / 2, width, height)


@pytest.fixture
def camera():
    return make_camera()
