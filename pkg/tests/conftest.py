import numpy as np
import pytest

from racesim.covariates import FORWARD_COLUMNS, LATERAL_COLUMNS
from racesim.synth import SynthConfig, synthetic_track, truth_params


def make_fitted(speeds, sigma_f=0.0, sigma_l=0.0, beta=0.0, psi_f=None, psi_l=None, mu=None):
    """Known parameters for horses ``H1..Hn`` with constant speed profiles.

    Jockey and context effects are zero and curvature is absent, so every
    parameter draw equals these values.
    """
    n = len(speeds)
    cfg = SynthConfig(n_horses=n, n_jockeys=n, sigma_f=1.0, sigma_l=1.0, beta_plm=beta, jockey_spread=0.0,
                      context_effects={})
    fitted = truth_params(cfg, covariate_effects=False).params
    fw, lat = fitted.forward, fitted.lateral
    lay = fw.layout
    theta = np.repeat(np.asarray(speeds, dtype=float)[:, None], lay.dim, axis=1)
    fw.params[lay.slice("theta")] = theta.reshape(-1)
    fw.params[lay.slice("mu")] = theta.mean(axis=0) if mu is None else mu
    fw.params[lay.slice("log_sigma")] = np.log(sigma_f) if sigma_f > 0 else -np.inf
    lat.params[lat.layout.slice("log_sigma")] = np.log(sigma_l) if sigma_l > 0 else -np.inf
    if psi_f:
        for k, v in psi_f.items():
            fw.params[lay.slice("psi").start + FORWARD_COLUMNS.index(k)] = v
    if psi_l:
        for k, v in psi_l.items():
            lat.params[lat.layout.slice("psi").start + LATERAL_COLUMNS.index(k)] = v
    return fitted


@pytest.fixture(scope="session")
def track():
    return synthetic_track()


ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the assertion still decides the test."""

    def record(name: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
