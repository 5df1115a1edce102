"""Experiment harness: configs, closed-loop trials, CLI and acceptance checks."""
