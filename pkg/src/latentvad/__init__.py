"""Unsupervised video anomaly detection with decoupled appearance and motion models.

A per-frame 2D autoencoder extracts latent codes; a small Conv3D motion model
predicts the latent code of a future frame from the codes of the previous k
frames.  The prediction error in latent space is the anomaly score.
"""

__version__ = "0.1.0"
