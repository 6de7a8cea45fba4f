"""Speaker diarization toolkit built around local powerset segmentation and
global speaker clustering (the EEND-VC recipe), with swappable speech
encoders, a DER scorer, and cross-domain training protocols."""

__version__ = "0.1.0"
