# src/measure_mdp/handlers/__init__.py
"""Command handlers for the measure-mdp CLI."""
