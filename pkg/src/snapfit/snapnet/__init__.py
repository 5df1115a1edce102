"""SnapNet snap detector: model, training, calibration and streaming inference."""
