# Copyright (c) 2025 Contributors
# SPDX-License-Identifier: Apache-2.0

"""Logging setup shared by the command-line entry points."""

from __future__ import annotations

import logging
import sys

from opentelemetry import trace
from opentelemetry.instrumentation.logging import LoggingInstrumentor
from opentelemetry.instrumentation.logging.constants import DEFAULT_LOGGING_FORMAT
from opentelemetry.sdk.resources import SERVICE_NAME, Resource
from opentelemetry.sdk.trace import TracerProvider

SERVICE = "obtree"

_configured = False


def configure_logging(level: str = "INFO") -> None:
    """
    Install the OpenTelemetry record factory and log format on the root logger.

    Every record then carries the trace and span id of the command span that
    emitted it. Safe to call more than once; only the level changes afterwards.
    """
    global _configured
    if not _configured:
        trace.set_tracer_provider(
            TracerProvider(resource=Resource.create({SERVICE_NAME: SERVICE}))
        )
        LoggingInstrumentor().instrument(set_logging_format=False)
        logging.basicConfig(format=DEFAULT_LOGGING_FORMAT, stream=sys.stderr)
        _configured = True
    logging.getLogger().setLevel(level.upper())


def get_tracer(name: str) -> trace.Tracer:
    return trace.get_tracer(name)
