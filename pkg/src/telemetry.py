"""
Telemetry Module
================
Configures OpenTelemetry tracing and metrics for pipeline runs, and exposes
helpers for stage-level spans and training metrics.

When OTEL_EXPORTER_OTLP_ENDPOINT is set, spans and metrics are exported over
gRPC (the Aspire Dashboard from docker-compose listens on port 4317).
Without an endpoint the SDK providers still run, so spans and metric
instruments work but nothing leaves the process.
"""

import logging
import os
import time
from contextlib import contextmanager
from typing import Any, Generator

from opentelemetry import metrics, trace

logger = logging.getLogger(__name__)

# Module-level tracer and meter (initialized after setup)
_tracer: trace.Tracer | None = None
_meter: metrics.Meter | None = None

# Custom metrics
_stage_duration: metrics.Histogram | None = None
_step_duration: metrics.Histogram | None = None
_train_loss: metrics.Histogram | None = None
_pastes: metrics.Counter | None = None


def _configure_providers(service_name: str, endpoint: str) -> None:
    from opentelemetry.sdk.metrics import MeterProvider
    from opentelemetry.sdk.resources import Resource
    from opentelemetry.sdk.trace import TracerProvider

    resource = Resource.create({"service.name": service_name})
    tracer_provider = TracerProvider(resource=resource)
    readers = []
    if endpoint:
        from opentelemetry.exporter.otlp.proto.grpc.metric_exporter import OTLPMetricExporter
        from opentelemetry.exporter.otlp.proto.grpc.trace_exporter import OTLPSpanExporter
        from opentelemetry.sdk.metrics.export import PeriodicExportingMetricReader
        from opentelemetry.sdk.trace.export import BatchSpanProcessor

        tracer_provider.add_span_processor(BatchSpanProcessor(OTLPSpanExporter(endpoint=endpoint, insecure=True)))
        readers.append(PeriodicExportingMetricReader(OTLPMetricExporter(endpoint=endpoint, insecure=True)))
    trace.set_tracer_provider(tracer_provider)
    metrics.set_meter_provider(MeterProvider(resource=resource, metric_readers=readers))


def setup_telemetry(service_name: str = "dacil-workbench", endpoint: str | None = None) -> None:
    """Initialize OpenTelemetry providers and the pipeline's metric instruments.

    This configures:
    - SDK tracer and meter providers tagged with ``service_name``
    - OTLP gRPC exporters when an endpoint is given (or set in the environment)
    - Custom metrics (stage duration, step duration, loss values, paste outcomes)

    Args:
        service_name: The service name to use for telemetry spans.
        endpoint: OTLP endpoint; defaults to OTEL_EXPORTER_OTLP_ENDPOINT.
    """
    global _tracer, _meter, _stage_duration, _step_duration, _train_loss, _pastes

    if endpoint is None:
        endpoint = os.getenv("OTEL_EXPORTER_OTLP_ENDPOINT", "")
    try:
        _configure_providers(service_name, endpoint)
        logger.info("OpenTelemetry configured (OTLP → %s)", endpoint or "not set")
    except Exception as e:
        logger.warning("Failed to configure OTel providers: %s", e)
        logger.info("Telemetry will be limited to no-op spans")

    _tracer = trace.get_tracer(service_name, "1.0.0")
    _meter = metrics.get_meter(service_name, "1.0.0")

    _stage_duration = _meter.create_histogram(
        name="stage.duration",
        description="Pipeline stage execution time in seconds",
        unit="s",
    )
    _step_duration = _meter.create_histogram(
        name="train.step.duration",
        description="Optimizer step time in seconds",
        unit="s",
    )
    _train_loss = _meter.create_histogram(
        name="train.loss",
        description="Per-step loss component values",
        unit="1",
    )
    _pastes = _meter.create_counter(
        name="augment.pastes",
        description="Copy-paste placement attempts by outcome",
        unit="1",
    )


def get_tracer() -> trace.Tracer:
    """Get the configured tracer, or a no-op tracer if not initialized."""
    return _tracer or trace.get_tracer("dacil-fallback")


@contextmanager
def trace_stage(stage: str, **attributes: Any) -> Generator[trace.Span, None, None]:
    """Context manager that creates a span for one pipeline stage.

    Args:
        stage: Stage name (``synth``, ``pretrain``, ``train`` ...).
        **attributes: Additional span attributes.

    Yields:
        The active span for additional attribute setting.
    """
    tracer = get_tracer()
    span_attrs: dict[str, Any] = {"stage.name": stage}
    span_attrs.update(attributes)

    with tracer.start_as_current_span(f"stage.{stage}", attributes=span_attrs) as span:
        start = time.perf_counter()
        try:
            yield span
        finally:
            duration = time.perf_counter() - start
            span.set_attribute("stage.duration_s", round(duration, 3))
            if _stage_duration:
                _stage_duration.record(duration, {"stage.name": stage})


@contextmanager
def trace_step(stage: str, step: int) -> Generator[None, None, None]:
    """Time one optimizer step."""
    start = time.perf_counter()
    try:
        yield
    finally:
        if _step_duration:
            _step_duration.record(time.perf_counter() - start, {"stage.name": stage, "train.step": step})


def record_loss(stage: str, component: str, value: float) -> None:
    """Record a loss component value (``l_sup``, ``l_dis``, ``l_con``, ``l_total``)."""
    if _train_loss:
        _train_loss.record(float(value), {"stage.name": stage, "loss.component": component})


def record_paste(mode: str, accepted: bool) -> None:
    """Count one copy-paste placement attempt.

    Args:
        mode: Augmentation mode (``cross``, ``in-source``, ``in-target``).
        accepted: Whether a collision-free position was found.
    """
    if _pastes:
        _pastes.add(1, {"augment.mode": mode, "augment.accepted": accepted})


def shutdown_telemetry() -> None:
    """Flush stage spans and training metrics, then close both providers.

    main.run() calls this in a finally block; spans still sitting in the
    batch processor are dropped if the process exits first.
    """
    tracer_provider = trace.get_tracer_provider()
    if hasattr(tracer_provider, "force_flush"):
        tracer_provider.force_flush(timeout_millis=5000)  # type: ignore[attr-defined]
        logger.info("Telemetry spans flushed")
    if hasattr(tracer_provider, "shutdown"):
        tracer_provider.shutdown()  # type: ignore[attr-defined]

    meter_provider = metrics.get_meter_provider()
    if hasattr(meter_provider, "force_flush"):
        meter_provider.force_flush(timeout_millis=5000)  # type: ignore[attr-defined]
    if hasattr(meter_provider, "shutdown"):
        meter_provider.shutdown()  # type: ignore[attr-defined]
