"""Closed-loop evaluation of motion predictors under planning budgets."""

__version__ = "0.1.0"
