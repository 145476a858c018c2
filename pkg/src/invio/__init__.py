"""Invariant visual-inertial odometry with a learned IMU bias predictor."""

__version__ = "0.1.0"
