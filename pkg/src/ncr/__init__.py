"""Neural cone radiosity: a CPU renderer and trainer for residual-trained
radiance fields with a reflection-aware cone encoding for glossy transport."""

__version__ = "0.1.0"
