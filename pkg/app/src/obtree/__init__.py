# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0

"""Non-greedy oblique decision trees trained on a convex-concave upper bound."""

__version__ = "0.1.0"
