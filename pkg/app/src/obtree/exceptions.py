# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0

"""Error types raised by the obtree package."""

from __future__ import annotations

from typing import Optional


class ObtreeError(Exception):
    """Base class for every error raised by obtree."""


class StructureError(ObtreeError, ValueError):
    """A decision vector or leaf index does not fit the tree topology."""


class DimensionError(ObtreeError, ValueError):
    """Feature, class or target dimensions disagree."""


class ConfigError(ObtreeError, ValueError):
    """An optimizer, greedy or CLI setting is out of range."""


class NumericError(ObtreeError, ArithmeticError):
    """Non-finite parameters, losses or gradients."""


class InferenceRefusedError(ObtreeError):
    """Exhaustive enumeration requested for a tree that is too large."""


class DataError(ObtreeError, ValueError):
    """Malformed dataset or model file; carries the offending location."""

    def __init__(
        self, message: str, line: Optional[int] = None, column: Optional[int] = None
    ) -> None:
        self.message = message
        self.line = line
        self.column = column
        super().__init__(self._render())

    def _render(self) -> str:
        text = self.message
        if self.line is not None:
            text += f", line {self.line}"
        if self.column is not None:
            text += f", column {self.column}"
        return text
