"""Counterfactual causal explanations for multi-agent driving decisions."""

__version__ = "0.1.0"

from .world import Scenario, JointTrace, load_scenario  # noqa: F401
