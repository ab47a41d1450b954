"""Scene-graph unlearning toolkit: synthetic data, a small scene-graph-to-image
generator, nine removal methods, fidelity metrics and leakage attacks."""

__version__ = "0.1.0"
