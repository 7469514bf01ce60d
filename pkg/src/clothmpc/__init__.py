"""Real-time cloth manipulation: linear cloth model, MPC, model learning."""

__version__ = "0.1.0"
