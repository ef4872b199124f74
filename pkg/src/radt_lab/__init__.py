"""Return-aligned decision transformer lab.

Pure numpy implementation of a return-conditioned sequence model with two
return aligners (sequence-level cross-attention and stepwise modulated layer
normalization), a DT-style baseline, toy environments, offline dataset
generation, training, and the return-alignment evaluation protocol.
"""

__version__ = "0.1.0"
