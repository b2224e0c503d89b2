import numpy as np
import pytest

from bsvielab import InvalidArgument
from bsvielab.convergence import convergence_study, self_refinement_gaps


class TestLadderValidation:
    def test_too_short_rejected(self):
        with pytest.raises(InvalidArgument):
            convergence_study("zero", [(8, 100, 3), (16, 100, 3)])

    def test_non_refining_rejected(self):
        with pytest.raises(InvalidArgument):
            convergence_study("zero", [(16, 100, 3), (8, 100, 3), (32, 100, 3)])

    def test_constant_ladder_rejected(self):
        with pytest.raises(InvalidArgument):
            convergence_study("zero", [(8, 100, 3)] * 3)

    def test_scenario_without_oracle_rejected(self):
        with pytest.raises(InvalidArgument):
            convergence_study("linear-zhat", [(8, 100, 3), (16, 100, 3), (32, 100, 3)])


class TestStudies:
    def test_zero_scenario_all_errors_zero(self):
        table = convergence_study(
            "zero", [(8, 200, 3), (16, 400, 3), (32, 800, 3)]
        )
        assert (table.rungs["error_y"] <= 1e-12).all()

    def test_terminal_driver_steps_ladder_decreases(self):
        # Steps and paths co-refine (the value error here is sampling-driven,
        # so paths must refine fast enough to dominate rung noise).
        ladder = [(10, 2000, 3), (20, 8000, 3), (40, 32000, 3)]
        table = convergence_study("example-1.1", ladder)
        errs = table.errors()
        assert np.all(np.diff(errs) < 0)
        # The order is reported against the fastest-refining coordinate.
        assert table.axis == "paths"

    def test_path_ladder_monte_carlo_rate(self):
        # Error vs paths at fixed steps follows the inverse square-root law.
        ladder = [(12, 1000, 3), (12, 4000, 3), (12, 16000, 3), (12, 64000, 3)]
        table = convergence_study("example-1.1", ladder)
        assert table.axis == "paths"
        assert -0.65 <= table.fitted_order <= -0.35

    def test_self_refinement_gap_structure(self):
        gaps = self_refinement_gaps("adapted-linear", 8, 2000, levels=3)
        assert len(gaps["gap_to_finest"]) == 2
        assert gaps["consecutive_gaps"][0] >= 0
        assert gaps["estimate"] == gaps["consecutive_gaps"][0]

    def test_self_refinement_needs_two_levels(self):
        with pytest.raises(InvalidArgument):
            self_refinement_gaps("adapted-linear", 8, 100, levels=1)
