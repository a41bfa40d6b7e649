"""Multi-headed neural ensemble search: Python bindings to the C++ core."""

from ._mhnes import (
    ConfigError,
    Dataset,
    dominant_eig,
    ece,
    ensemble_train_loss,
    error_rate,
    evaluate,
    forward_select,
    gen_synthetic,
    hamming,
    jsd_diversity,
    load_raw,
    method_names,
    nll,
    normalize_config,
    oracle_ensemble_nll,
    plan_budget,
    report,
    run,
    sample_genotype,
    save_raw,
    sha256_hex,
)

__all__ = [
    "ConfigError",
    "Dataset",
    "dominant_eig",
    "ece",
    "ensemble_train_loss",
    "error_rate",
    "evaluate",
    "forward_select",
    "gen_synthetic",
    "hamming",
    "jsd_diversity",
    "load_raw",
    "method_names",
    "nll",
    "normalize_config",
    "oracle_ensemble_nll",
    "plan_budget",
    "report",
    "run",
    "sample_genotype",
    "save_raw",
    "sha256_hex",
]
