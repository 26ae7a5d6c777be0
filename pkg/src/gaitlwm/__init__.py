"""Latent world-model pretraining for six-axis trunk IMU windows.

Hybrid long-convolution / gated delta-rule encoder, latent prediction
objective with a sketched Epps-Pulley regulariser, a raw-signal forecasting
baseline, the IMU harmonisation pipeline, a synthetic gait generator and a
frozen-probe evaluation battery.
"""

__version__ = "0.1.0"
