"""Score matching, flow matching, Stein diagnostics and orthogonal inference."""

__version__ = "0.1.0"
