"""Real-time traffic analytics pipeline: telemetry generation, an embedded
partitioned log, micro-batch processing, congestion classification and a
benchmark harness."""

__version__ = "0.1.0"
