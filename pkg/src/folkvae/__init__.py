"""Style-disentangled recurrent VAE for monophonic folk melodies."""

__version__ = "0.1.0"
