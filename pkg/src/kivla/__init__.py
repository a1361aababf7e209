"""Vision-language-action training with a gradient-insulated action expert, small enough for a CPU."""

__version__ = "0.1.0"
