# src/measure_mdp/core/__init__.py
"""Measure-space MDP solvers, dissipativity synthesis and learning."""
