"""Self-supervised cut-and-paste GAN for unsupervised foreground segmentation.

A mask generator cuts an object out of a foreground image and pastes it onto
a new background; a U-Net discriminator judges the composite globally and,
through its decoder, learns per-pixel background maps supervised by GrabCut
pseudo-labels. Everything runs on a small numpy autodiff core.
"""

__version__ = "0.1.0"
