"""Data-free network quantization toolkit.

Trains a conditional generator against a frozen pre-trained classifier
(cross-entropy on the conditioning labels plus batch-norm statistics
matching), then uses the generator's synthetic labeled samples to calibrate
post-training quantization and to drive quantization-aware training via
knowledge distillation -- without touching the original training data.
"""

__version__ = "0.1.0"
