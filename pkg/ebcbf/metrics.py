"""Prometheus metrics recorded while fitting, filtering and verifying"""
from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile

REGISTRY = CollectorRegistry(auto_describe=True)

FIT_ITERATIONS = Counter(
    "ebcbf_fit_iterations",
    "Optimizer iterations spent on marginal likelihood fits",
    registry=REGISTRY,
)
JITTER_ESCALATIONS = Counter(
    "ebcbf_jitter_escalations",
    "Factorizations that needed diagonal jitter",
    ["matrix"],
    registry=REGISTRY,
)
FILTER_STEPS = Counter(
    "ebcbf_filter_steps",
    "Safety filter evaluations by outcome",
    ["outcome"],
    registry=REGISTRY,
)
ROLLOUT_DURATION = Histogram(
    "ebcbf_rollout_duration_seconds",
    "Wall time of closed-loop rollouts",
    ["filtered"],
    buckets=(0.1, 0.5, 1, 2, 5, 10, 30, 60, 120, float("inf")),
    registry=REGISTRY,
)


def write_metrics(path):
    """Write the current metric values in the Prometheus text format"""
    write_to_textfile(path, REGISTRY)
