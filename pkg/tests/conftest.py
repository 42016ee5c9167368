import numpy as np
import pytest

from tcbm.clocks import CirClock, MarkovSwitchingClock, SquaredOuClock
from tcbm.barrier import MarketEnv


# benchmark market geometry used throughout the suite
@pytest.fixture(scope="session")
def market():
    return MarketEnv(spot=100.0, rate=0.03, dividend=0.0)


@pytest.fixture(scope="session")
def cir_regime1():
    return CirClock(kappa=0.6, theta=0.20, xi=0.4, v0=0.18)


@pytest.fixture(scope="session")
def cir_regime2():
    return CirClock(kappa=0.5, theta=0.45, xi=0.6, v0=0.48)


@pytest.fixture(scope="session")
def sqou_regime1():
    return SquaredOuClock(alpha=0.6, sigma=0.490, y0=float(np.sqrt(0.18)))


@pytest.fixture(scope="session")
def sqou_regime2():
    return SquaredOuClock(alpha=0.5, sigma=0.671, y0=float(np.sqrt(0.48)))


@pytest.fixture(scope="session")
def markov_2state():
    return MarkovSwitchingClock(
        generator=((-0.8, 0.8), (1.5, -1.5)),
        levels=(0.04, 0.30),
        initial_dist=(0.7, 0.3),
    )
