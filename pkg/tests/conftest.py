import numpy as np
import pytest
from hypothesis import settings

from lpnet.objective import LevelContext
from lpnet.state import LevelParams

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def level_params(**kw) -> LevelParams:
    base = dict(tau=0.1, lambda0=1.0, lambda1=0.1, lambda2=1.0, lambda3=0.5,
                lambda4=0.5, lambda5=1.0, lambda_f=1.0, lambda_b=1.0)
    base.update(kw)
    return LevelParams(**base)


def random_context(rng, m_prev=4, m=5, m_next=6, n=7, last=False, first=False, tied=True,
                   params=None, orientation=1, sample_weight=1.0) -> LevelContext:
    """A single-level problem with random representations and weights (M_l >= M_{l-1})."""
    p = params or level_params()
    U_prev = rng.standard_normal((m_prev, n))
    A_prev = rng.standard_normal((m, m_prev))
    U = rng.standard_normal((m, n))
    G = np.where(rng.random((m, n)) < 0.5, rng.standard_normal((m, n)), 0.0)
    Y = rng.standard_normal((m, n))
    kw = {}
    if not first:
        kw["G_prev"] = np.where(rng.random((m_prev, n)) < 0.5, U_prev, 0.0)
    if not last:
        A_next = rng.standard_normal((m_next, m))
        kw.update(
            U_next=rng.standard_normal((m_next, n)),
            G_next=np.zeros((m_next, n)),
            A_next=A_next,
            B=A_next.T.copy() if tied else rng.standard_normal((m, m_next)),
        )
    return LevelContext(level=2, params=p, A_prev=A_prev, U_prev=U_prev, U=U, G=G, Y=Y,
                        tied=tied, orientation=orientation, sample_weight=sample_weight, **kw)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance criteria lines at the end of the run."""
    import sys

    module = sys.modules.get("test_acceptance")
    lines = sorted(getattr(module, "CRITERIA_LINES", []), key=lambda l: int(l.split()[1].rstrip(":")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
