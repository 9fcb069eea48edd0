"""Shared models for the test suite."""
import functools
import os
import tempfile

import numpy as np

from services.delay_model import DelayModel, constant_history
from services.lna import ToggleParams, build_lna, find_stationary_states, toggle_model

LOW_HIGH = np.array([0.0498, 1.0033])
HIGH_LOW = np.array([1.0033, 0.0498])
SYMMETRIC = np.array([0.3306, 0.3306])
DEMO_HISTORY = np.array([0.0453, 1.1323])


def brownian(d=2, tau=1.0):
    return DelayModel(np.zeros(d), np.zeros((d, d)), np.zeros((d, d)), np.eye(d), tau)


def scalar_ou(rate=1.0, tau=1.0):
    return DelayModel([0.0], [[-rate]], [[0.0]], [[1.0]], tau)


def coupled_model():
    """A stable two-dimensional model with delayed feedback and correlated noise."""
    return DelayModel(
        a=[0.2, -0.1],
        B=[[-1.0, 0.3], [0.1, -0.8]],
        C=[[0.2, -0.4], [0.3, 0.1]],
        Sigma=[[0.8, 0.0], [0.3, 0.5]],
        tau=1.0,
    )


@functools.lru_cache(maxsize=None)
def toggle_states():
    model = toggle_model(ToggleParams())
    return model, find_stationary_states(model, [LOW_HIGH, HIGH_LOW, SYMMETRIC])


def toggle_lna(which=0):
    """LNA of the toggle switch at the low/high (0), high/low (1) or symmetric (2) state."""
    model, states = toggle_states()
    target = (LOW_HIGH, HIGH_LOW, SYMMETRIC)[which]
    state = min(states, key=lambda s: np.linalg.norm(s.z - target))
    return build_lna(model, state)


def demo_history(lna):
    """The escape-study history in the LNA's local coordinates."""
    return constant_history(lna.tau, lna.to_local(DEMO_HISTORY))


def write_toml(directory, name, text):
    path = os.path.join(directory, name)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


def temp_dir():
    return tempfile.TemporaryDirectory(prefix="delayld-test-")
