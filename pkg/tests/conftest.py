import os
from pathlib import Path

import numpy as np
import pytest

from mtlb.envs import ellipsoid_argmax_batch
from mtlb.idx import serialize_idx

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class OraclePolicy:
    """Test-only: plays the true best action every round."""

    def __init__(self, inst):
        self.inst = inst

    def choose(self, contexts):
        if self.inst.kind == "infinite":
            return ellipsoid_argmax_batch(self.inst.Theta.T, self.inst.Q)[0]
        vals = np.einsum("tkd,dt->tk", contexts.actions, self.inst.Theta)
        return vals.argmax(axis=1)

    def observe(self, contexts, actions, feedback):
        pass


class UniformPolicy:
    """Test-only: uniformly random action index per task."""

    def __init__(self, T, K, rng):
        self.T, self.K, self.rng = T, K, rng

    def choose(self, contexts):
        return self.rng.integers(0, self.K, size=self.T)

    def observe(self, contexts, actions, feedback):
        pass


class Recorder:
    """Wraps a policy and keeps the transcript it sees."""

    def __init__(self, inner):
        self.inner = inner
        self.contexts, self.actions, self.rewards = [], [], []

    def choose(self, contexts):
        a = self.inner.choose(contexts)
        self.contexts.append(contexts)
        self.actions.append(np.array(a, copy=True))
        return a

    def observe(self, contexts, actions, feedback):
        self.rewards.append(feedback.rewards.copy())
        self.inner.observe(contexts, actions, feedback)


def fake_digit_images(per_digit=20, seed=0):
    """Small labelled image set: digit ``i`` lights up row block ``i`` plus noise."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(10), per_digit).astype(np.uint8)
    rng.shuffle(labels)
    images = rng.integers(0, 60, size=(labels.size, 28, 28), dtype=np.uint8)
    for n, lab in enumerate(labels):
        images[n, 2 * lab: 2 * lab + 3, 4:24] = 255
    return images, labels


@pytest.fixture
def fake_mnist_files(tmp_path):
    images, labels = fake_digit_images()
    img = tmp_path / "images-idx3-ubyte"
    lab = tmp_path / "labels-idx1-ubyte"
    img.write_bytes(serialize_idx(list(images.shape), images))
    lab.write_bytes(serialize_idx([labels.size], labels))
    return img, lab


def real_mnist_paths():
    """Locate genuine MNIST training files, or return None."""
    roots = [os.environ.get("MTLB_MNIST_DIR"), Path(__file__).parent / "data" / "mnist"]
    for root in filter(None, roots):
        root = Path(root)
        for suffix in ("", ".gz"):
            img = root / f"train-images-idx3-ubyte{suffix}"
            lab = root / f"train-labels-idx1-ubyte{suffix}"
            if img.exists() and lab.exists():
                return img, lab
    return None
