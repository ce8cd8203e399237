"""Max-min uncertainty training of a localizer/classifier pair from image-level labels."""
__version__ = "0.1.0"
