"""Multi-UNet skin-lesion segmentation with region-of-interest enhancement
connections, built on a self-contained numpy autodiff core."""

__version__ = "0.1.0"
