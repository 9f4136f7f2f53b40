"""Multi-slot bid shading: GSP auction simulation, surplus-maximizing shading
models, baselines and offline evaluation."""

__version__ = "0.1.0"
