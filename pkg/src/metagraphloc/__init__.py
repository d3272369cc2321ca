"""Graph neural network indoor localization with RSSI and IMU fusion and meta-learning."""

__version__ = "0.1.0"
