"""Foundation-model embedding extractor for epg maps."""

from .backends import ClipBackend, DinoBackend, ModelUnavailableError
from .embfile import read_embeddings, write_embeddings
from .pipeline import MODES, ExtractRequest, extract

__version__ = "0.1.0"
