import copy

import pytest

from thinlayer.problem import config_from_dict

BASE = {
    "geometry": {"ell": 2.0, "h": 1.0, "eps": 0.25, "width": "vanishing",
                 "obstacle": [-0.5, 0.5, 0.25, 0.75]},
    "scalings": {"alpha": -1, "beta": 1, "gamma": 1, "xi": 1},
    "sources": {},
    "drift": {"coeffs": [0.0, 1.0, -1.0], "delta": 0.1},
    "time": {"T": 0.1, "dt": 0.02},
    "mesh": {"size": 0.1, "layer_divisions": 4, "cell_size": 0.1, "n_sigma": 6},
}


def _merge(base, extra):
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def make_config(**sections):
    """Small S1 configuration with selected sections overridden."""
    return config_from_dict(_merge(BASE, sections))


@pytest.fixture
def small_config():
    return make_config()


ACCEPTANCE_LINES: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> None:
    """Print and remember one acceptance verdict, then assert it."""
    line = f"ACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
