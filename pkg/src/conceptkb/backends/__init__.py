from .base import (
    BackendDescriptor,
    GroundingBackend,
    GroundingResult,
    grounding_prompt,
    GROUNDING_PROMPT_TEMPLATE,
)
from .toy import ToyEncoder
from .sidecar import SidecarBackend, StdioTransport, TcpTransport

__all__ = [
    "BackendDescriptor",
    "GroundingBackend",
    "GroundingResult",
    "grounding_prompt",
    "GROUNDING_PROMPT_TEMPLATE",
    "ToyEncoder",
    "SidecarBackend",
    "StdioTransport",
    "TcpTransport",
]
