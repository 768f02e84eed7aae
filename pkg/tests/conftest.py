import numpy as np
import pytest
from hypothesis import settings

from molguide.geom import ELEMENTS, MolecularGeometry, center_of_mass_project

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

# experimental water: O-H 0.9572 A, H-O-H 104.52 degrees
WATER_XYZ = """3
charge=0,0,0 water
O 0.000000 0.000000 0.117300
H 0.000000 0.757200 -0.469200
H 0.000000 -0.757200 -0.469200
"""


def random_geometry(rng, M, centered=True, scale=1.5):
    syms = [ELEMENTS[i] for i in rng.integers(0, len(ELEMENTS), size=M)]
    g = MolecularGeometry.from_symbols(syms, rng.normal(0, scale, (M, 3)), rng.integers(-1, 2, size=M))
    return center_of_mass_project(g) if centered else g


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def water_path(tmp_path):
    p = tmp_path / "water.xyz"
    p.write_text(WATER_XYZ)
    return p


@pytest.fixture
def water():
    return center_of_mass_project(MolecularGeometry.from_symbols(
        ["O", "H", "H"], [[0, 0, 0.1173], [0, 0.7572, -0.4692], [0, -0.7572, -0.4692]]))


def _bounded(a):
    return a / (1.0 + np.sqrt((a * a).sum(axis=(1, 2), keepdims=True)))


class TamePredictor:
    """Untrained network made safe for long reverse chains.

    Half of the noise estimate assumes G_0 = 0, which pulls latents toward the
    origin; the network adds a norm-bounded, still equivariant perturbation.
    Untrained networks alone grow super-linearly and overflow within a few steps.
    """

    def __init__(self, net, sched, pull=0.5):
        self.net, self.sched, self.pull = net, sched, pull

    def __call__(self, x, h, t, cond=None):
        with np.errstate(over="ignore"):
            ex, eh = self.net(x, h, t, cond)
        c = np.asarray(self.sched.sqrt_one_minus_alpha_bars[t], dtype=float)
        c = c.reshape(c.shape + (1, 1)) if c.ndim else c
        return self.pull * x / c + _bounded(ex), self.pull * h / c + _bounded(eh)


# acceptance results, printed once at the end of the session
ACCEPTANCE = {}


def record(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
