"""Instance-ID grounding toolkit: mask databases, verifiable rewards, GRPO and metrics."""

__version__ = "0.1.0"
