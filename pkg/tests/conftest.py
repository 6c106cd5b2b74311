import json
from pathlib import Path

import numpy as np
import pytest

from avatarforge.body import generate_template

GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def body():
    return generate_template(1)


@pytest.fixture(scope="session")
def body_small():
    return generate_template(0)


@pytest.fixture(scope="session")
def golden():
    with open(GOLDEN_DIR / "golden.json") as f:
        return json.load(f)


def sphere_sdf(points, radius=0.5, center=(0.0, 0.0, 0.0)):
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.linalg.norm(pts - np.asarray(center), axis=1) - radius
