"""Single-point landmark detection on radiograph-like images with
regression, pixel-wise and spatial-softmax heads, built on a small numpy
reverse-mode autodiff engine."""

__version__ = "0.1.0"
