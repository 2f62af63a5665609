"""Self-supervised video pretraining with a 3D relative-localisation
auxiliary task, plus a frozen-encoder segmentation probe, exercised on
synthetic ultrasound-like video."""

__version__ = "0.1.0"
