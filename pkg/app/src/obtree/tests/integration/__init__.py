# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0
