"""Feature-inversion toolkit: extract SIFT/LBP features, reconstruct latent
images from full or partial features with a two-stage generative model, and
quantify the resulting privacy leakage."""

__version__ = "0.1.0"
