"""Out-of-process denoiser server for the framed tensor protocol."""

from .denoisers import Schedule, build_denoiser
from .protocol import MSG_ERROR, MSG_REQUEST, MSG_RESPONSE, encode_frame, read_frame
from .server import serve

__version__ = "0.1.0"
