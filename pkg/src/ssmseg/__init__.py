"""Semi-supervised segmentation with a state-space-model backbone.

A U-shaped visual state-space network and a CNN UNet trained jointly:
supervised Dice+CE on labelled data, cross pseudo-supervision on
unlabelled data, and a pooled-feature contrastive consistency term.
"""

__version__ = "0.1.0"
