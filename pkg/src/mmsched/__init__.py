"""Modality-aware request scheduling simulator for multimodal LLM serving."""

__version__ = "0.1.0"
