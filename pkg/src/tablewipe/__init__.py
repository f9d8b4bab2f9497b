"""tablewipe: stochastic table-wiping simulation, environment, and planning."""

from .sde import (
    ConfigError,
    GaussianComponent,
    InitialStateSpec,
    ParticleCloud,
    SdeParams,
    TableGeometry,
    WipeAction,
    WiperFootprint,
    em_step,
    particle_in_contact,
    sample_initial_cloud,
    simulate_wipe,
    wiper_footprint_at,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "GaussianComponent",
    "InitialStateSpec",
    "ParticleCloud",
    "SdeParams",
    "TableGeometry",
    "WipeAction",
    "WiperFootprint",
    "em_step",
    "particle_in_contact",
    "sample_initial_cloud",
    "simulate_wipe",
    "wiper_footprint_at",
    "__version__",
]
