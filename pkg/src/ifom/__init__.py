"""Self-supervised pretraining for presentation attack detection.

De-Folding and De-Mixing pretext tasks train a feature extractor without
labels; the extractor then initializes a supervised spoof detector.
"""

__version__ = "0.1.0"
