"""Shared test configuration: a desk-scale hypothesis profile."""

from hypothesis import HealthCheck, settings

settings.register_profile(
    "desk",
    max_examples=30,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("desk")
