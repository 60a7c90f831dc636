"""Bearing fault diagnosis toolkit.

Frequency-aligned vibration representations (fixed-duration sampling,
cosine-transform normalization, fault-free reference residuals), a
channel-attention convolutional classifier trained from scratch on CPU,
and an alignment layer that maps classifier outputs into a token embedding
space.
"""

__version__ = "0.1.0"
