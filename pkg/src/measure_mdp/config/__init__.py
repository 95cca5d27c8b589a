# src/measure_mdp/config/__init__.py
"""Configuration module."""
