import numpy as np
import pytest

from ouperturb import GalerkinModel, PathGrid, validate_model


@pytest.fixture(scope="session")
def model4():
    return validate_model(GalerkinModel(
        eigenvalues=[-1.0, -2.0, -3.0, -4.0], beta=1.0,
        sigma_diag=[1.0, 1.0, 1.0, 1.0], horizon=1.0,
        x0=[0.3, -0.2, 0.1, 0.0]))


@pytest.fixture(scope="session")
def model1():
    return validate_model(GalerkinModel(
        eigenvalues=[-1.0], beta=1.0, sigma_diag=[1.0], horizon=1.0, x0=[0.0]))


@pytest.fixture(scope="session")
def grid400():
    return PathGrid(400, 1.0)


def rel_err(a, b):
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) / \
        max(1e-300, np.max(np.abs(np.asarray(b))))
