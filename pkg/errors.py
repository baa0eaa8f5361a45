#!/usr/bin/env python3
"""
Exception hierarchy shared by the sampler modules and the CLI.
"""

from typing import Optional


class FlowPerturbationError(Exception):
    """Base class for every error raised by this project."""


class ConfigError(FlowPerturbationError, ValueError):
    """Invalid argument, configuration value or config file structure."""


class NumericError(FlowPerturbationError, ArithmeticError):
    """Non-finite state met during integration, evaluation or training."""

    def __init__(self, message: str, step: Optional[int] = None, batch: Optional[int] = None):
        self.step = step
        self.batch = batch
        details = []
        if step is not None:
            details.append(f"step {step}")
        if batch is not None:
            details.append(f"batch {batch}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)


class SingularFlowError(FlowPerturbationError, ValueError):
    """An affine flow has a zero scale entry and cannot be inverted."""


class DegenerateScaleError(FlowPerturbationError, ValueError):
    """The backward scale fell below its positivity floor."""
