import math

import numpy as np
import pytest

from qflow import build_einstein_circle_product, build_sphere_axisym, load_matrix_manifold

from oracles import random_matrix_manifold_text


@pytest.fixture(scope="session")
def s5_12():
    # small enough that k^4 multiplier growth keeps float noise under the
    # strict 1e-11 self-adjointness tolerance
    return build_sphere_axisym(5, 12)


@pytest.fixture(scope="session")
def s5_64():
    return build_sphere_axisym(5, 64)


@pytest.fixture(scope="session")
def s5_256():
    return build_sphere_axisym(5, 256)


@pytest.fixture(scope="session")
def s4xs1():
    return build_einstein_circle_product("s4xs1", 2.0 * math.pi, 32)


@pytest.fixture(scope="session")
def matrix_man(tmp_path_factory):
    path = tmp_path_factory.mktemp("man") / "random6.txt"
    path.write_text(random_matrix_manifold_text(42))
    return load_matrix_manifold(path)


@pytest.fixture(params=["sphere", "product", "matrix"])
def any_manifold(request, s5_12, s4xs1, matrix_man):
    return {"sphere": s5_12, "product": s4xs1, "matrix": matrix_man}[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
