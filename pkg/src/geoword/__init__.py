"""Workload-aware learned index for spatial keyword range queries."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    Dataset,
    Distribution,
    FrequencyClass,
    GeoObject,
    GeoPoint,
    Query,
    Rect,
    Workload,
    WorkloadSpec,
    generate_workload,
    keyword_frequency_class,
    load_dataset,
    load_workload,
    query_bruteforce,
    save_dataset,
    save_workload,
    stratified_sample,
)
