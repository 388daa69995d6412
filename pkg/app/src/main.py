# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0

"""Launcher for the obtree command-line driver (run from app/src)."""

import sys

from obtree.cli import main

if __name__ == "__main__":
    sys.exit(main())
