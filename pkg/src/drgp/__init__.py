"""Deep recurrent Gaussian processes with sparse-spectrum kernels."""

__version__ = "0.1.0"
