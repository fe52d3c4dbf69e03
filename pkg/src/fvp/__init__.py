"""Source-free domain adaptation for segmentation via Fourier visual prompts.

A frozen convolutional segmentation network is steered on an unlabeled
target domain by a learnable additive prompt parameterized in the
low-frequency part of the input's Fourier spectrum.  The prompt is trained
with a selection-masked cross entropy against reliable pseudo labels
detected from the frozen model's own predictions.
"""

__version__ = "0.1.0"
