"""Loss smoothing toolkit for sequence prediction.

Reward-based target distributions, stratified and importance samplers,
embedding-based token smoothing, the interpolated loss family, and a
desk-scale recurrent encoder-decoder to train with all of them.
"""

__version__ = "0.1.0"
