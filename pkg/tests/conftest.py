import os
import sys

import numpy as np
import pytest
from hypothesis import settings

from spectproj import backend
from spectproj.core import PsfStack, Volume, uniform_angles
from spectproj.projector import SystemModel, random_symmetric_kernels

settings.register_profile("default", deadline=None, max_examples=30, derandomize=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

BACKENDS = ["python"] + (["compiled"] if backend.HAVE_COMPILED else [])


@pytest.fixture(params=BACKENDS)
def kernels(request):
    return backend.get(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def delta_model(shape, angles, mu=None, kernels=None, method="bilinear"):
    """Model with an identity PSF and optional attenuation."""
    ny, nview = shape[1], len(angles)
    k = np.zeros((1, 1, ny, nview))
    k[0, 0] = 1.0
    att = Volume(mu) if mu is not None else None
    return SystemModel(PsfStack(k), angles, att, shape=shape, rotation_method=method, kernels=kernels)


def small_model(rng, shape=(4, 4, 2), nview=4, kernel=(3, 3), mu_max=0.05, **kw):
    mu = Volume(rng.uniform(0, mu_max, shape))
    psf = PsfStack(random_symmetric_kernels(rng, *kernel, (shape[1], nview)))
    return SystemModel(psf, uniform_angles(nview), mu, **kw)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
