import pytest

from policy_its import inference
from support import simulated_design


@pytest.fixture(scope="session")
def desk():
    """Desk-scale synthetic design (10 areas x 20 persons x 6 years)."""
    design, sim, cfg = simulated_design("DESK_ORACLE", seed=7)
    return design, sim, cfg


@pytest.fixture(scope="session")
def small_fit():
    """A fitted reduced PAPER_LIKE instance shared by effects and inference tests."""
    design, sim, cfg = simulated_design("PAPER_LIKE", seed=5, n_areas=12, n_persons_per_area=40)
    fitted = inference.fit_posterior(design, n_draws=400, seed=11)
    return fitted, design, sim
