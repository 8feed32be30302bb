"""DARNet auditory attention detection from EEG."""

from darnet.model import Darnet, DarnetConfig, build_model, count_parameters

__all__ = ["Darnet", "DarnetConfig", "build_model", "count_parameters"]
__version__ = "0.1.0"
