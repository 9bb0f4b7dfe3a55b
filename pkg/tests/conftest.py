import itertools

import numpy as np
import pytest

from latevo.lattice import FAMILIES, Lattice, UnitCell, synth_family
from latevo.model import ModelConfig, train_model

CUBE_CORNERS = np.array(list(itertools.product((0.0, 1.0), repeat=3)))


def bcc_spoke_cell() -> UnitCell:
    """8 corners + body center, spokes only (corners are degree-1)."""
    nodes = np.vstack([CUBE_CORNERS, [[0.5, 0.5, 0.5]]])
    return UnitCell(nodes=nodes, edges=tuple((i, 8) for i in range(8)))


BCC_SPOKE_TEXT = """Node number: 9
coordinates:
(0, 0, 0)
(0, 0, 1)
(0, 1, 0)
(0, 1, 1)
(1, 0, 0)
(1, 0, 1)
(1, 1, 0)
(1, 1, 1)
(0.5, 0.5, 0.5)
Edges:
(0, 8)
(1, 8)
(2, 8)
(3, 8)
(4, 8)
(5, 8)
(6, 8)
(7, 8)
"""


@pytest.fixture(scope="session")
def dataset8():
    return [synth_family(FAMILIES[k % 4], 0.05, seed=k) for k in range(8)]


@pytest.fixture(scope="session")
def tiny_model(dataset8):
    return train_model(dataset8, ModelConfig(epochs=5, seed=0)).model


@pytest.fixture()
def bcc_cell():
    return bcc_spoke_cell()


@pytest.fixture()
def cube_lattice():
    return Lattice(vectors=np.eye(3), cell=synth_family("cubic", 0.0, 0).cell)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One [PASS]/[FAIL] line per acceptance criterion."""
    results: dict[str, tuple[str, float]] = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            outcome = "PASS" if rep.passed else "FAIL"
            prev = results.get(name)
            if prev is None or outcome == "FAIL":
                results[name] = (outcome, getattr(rep, "duration", 0.0))
    if results:
        terminalreporter.section("acceptance criteria")
        for name in sorted(results):
            outcome, duration = results[name]
            terminalreporter.write_line(f"[{outcome}] {name} ({duration:.1f}s)")
