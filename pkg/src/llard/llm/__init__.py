from .gateway import (
    GatewayError,
    GatewayTimeout,
    LLMGateway,
    ParseError,
    PromptRequest,
    ProviderConfig,
    ProviderError,
    ResponseCache,
    TransportError,
)
from .mock import MockProvider, MockRules

__all__ = [
    "GatewayError", "GatewayTimeout", "LLMGateway", "ParseError", "MockProvider", "MockRules",
    "PromptRequest", "ProviderConfig", "ProviderError", "ResponseCache", "TransportError",
]
