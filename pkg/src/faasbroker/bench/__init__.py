from faasbroker.bench.harness import (
    POPULATION_SOURCE,
    RELAXED_LIMITS,
    VENDOR_LIMITS,
    ExperimentConfig,
    ExperimentResult,
    LimitsProfile,
    RunResult,
    Scheme,
    run_experiment,
    sweep,
    write_sweep,
)
from faasbroker.bench.report import export_report, load_report, summarize

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "LimitsProfile",
    "POPULATION_SOURCE",
    "RELAXED_LIMITS",
    "RunResult",
    "Scheme",
    "VENDOR_LIMITS",
    "export_report",
    "load_report",
    "run_experiment",
    "summarize",
    "sweep",
    "write_sweep",
]
