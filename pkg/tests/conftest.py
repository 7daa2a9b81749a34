"""Shared fixtures: a tiny hand-built window and a small generated panel.

Session scope keeps the generator and the small fits to one run each;
tests must treat fixture objects as read-only.
"""

import numpy as np
import pytest

from releaselift.design import ColumnSchema, build_design
from releaselift.models import GibbsPlan, fit_hierarchical
from releaselift.panel import StudyWindow, assign_treatment
from releaselift.synth import GeneratorSpec, generate


@pytest.fixture(scope="session")
def tiny_window():
    return StudyWindow(
        n_weeks=12,
        release_schedule=(("r1", 2), ("r2", 6), ("r3", 10)),
        version_ids=("r0", "r1", "r2", "r3"),
        max_wait=6,
    )


@pytest.fixture(scope="session")
def small_spec():
    return GeneratorSpec(seed=424241, n_users=150, n_weeks=52)


@pytest.fixture(scope="session")
def small_panel(small_spec):
    panel, truth = generate(small_spec)
    return panel, truth


@pytest.fixture(scope="session")
def small_designs(small_spec, small_panel):
    panel, _ = small_panel
    schema = ColumnSchema.for_window(panel.window, 4)
    return schema, build_design(panel, schema)


@pytest.fixture(scope="session")
def small_ta(small_panel):
    panel, _ = small_panel
    return assign_treatment(panel, "v9")


@pytest.fixture(scope="session")
def small_fit(small_designs):
    schema, designs = small_designs
    return fit_hierarchical(designs, schema, seed=7,
                            plan=GibbsPlan(burn_in=150, keep=200))


def rng(seed=0):
    return np.random.default_rng(seed)
