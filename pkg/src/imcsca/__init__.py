"""Dynamic power simulation and power side-channel architecture extraction
for tiled RRAM in-memory-computing DNN accelerators."""

from . import adc, artifacts, attack, cli, mapper, netspec, powersim, tracefile

__all__ = ["adc", "artifacts", "attack", "cli", "mapper", "netspec",
           "powersim", "tracefile"]
__version__ = "0.1.0"
