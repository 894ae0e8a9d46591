"""Trajectory-splitting SFT, staged-timeout RL and a rollout/judge pipeline simulator on a toy long-horizon task."""

__version__ = "0.1.0"
