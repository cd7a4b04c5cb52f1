"""Capacity planner and discrete-event simulator for shared-weight data-parallel LLM inference."""

__version__ = "0.1.0"
