import numpy as np
import pytest

from langplace.core import AABB, Scene, SceneObject, Workspace
from langplace.embeddings import SyntheticProvider
from langplace.parser import Lexicon


@pytest.fixture(scope="session")
def lex():
    return Lexicon.default()


@pytest.fixture(scope="session")
def provider():
    return SyntheticProvider(seed=0)


def make_scene(boxes, names=None, ws=None):
    names = names or [f"obj{i}" for i in range(len(boxes))]
    objs = [SceneObject(i, n, AABB.from_bounds(*b), f"k/{i}") for i, (n, b) in enumerate(zip(names, boxes))]
    return Scene(ws or Workspace(), objs, "k/ws")


@pytest.fixture
def two_object_scene():
    # an apple left of centre and a pear to its right, as in the two-constraint figure
    return make_scene([(-0.15, -0.05, -0.07, 0.03), (0.05, -0.02, 0.13, 0.06)], ["red apple", "pear"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
