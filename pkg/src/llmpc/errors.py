class LLMPCError(Exception):
    """Base class for modeling errors the user can act on."""


class ConfigError(LLMPCError):
    """Malformed or invalid configuration; the message names the offending key."""


class ParallelismError(LLMPCError):
    """A parallelism configuration violates the device mapping constraints."""


class MemoryOverflowError(LLMPCError):
    def __init__(self, message, breakdown=None, capacity=None):
        super().__init__(message)
        self.breakdown = dict(breakdown or {})
        self.capacity = capacity
