"""Distill a deep residual net into parallel shallow students and simulate serving them.

Subpackages:
    nnkernel  - minimal float64 dense-network kernel (forward, backward, optimizers)
    distill   - boosting-ensemble distillation and adaptive student pruning
    perfmodel - analytic latency/throughput model with calibration
    servesim  - deterministic discrete-event serving simulator
    cli       - command-line entry point wiring the above into reproducible runs
"""

__version__ = "0.1.0"
