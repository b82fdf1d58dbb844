"""In-process network path used to exercise probes without privileges."""

from .dpi import Dpi, DpiProfile
from .endhost import Endhost, EndhostProfile
from .network import SimNetwork, TraceEntry, run_path

__all__ = ["Dpi", "DpiProfile", "Endhost", "EndhostProfile", "SimNetwork", "TraceEntry", "run_path"]
