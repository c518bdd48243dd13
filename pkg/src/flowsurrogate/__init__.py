"""Physics-informed SegNet / SegNet-ConvLSTM surrogates for two-phase Darcy flow."""

__version__ = "0.1.0"
