"""Face-to-parameters toolkit: heterogeneous target codec, toy renderer,
region-decomposed models, ensemble weight fitting and domain adapters."""

__version__ = "0.1.0"
