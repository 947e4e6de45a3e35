"""Desk-scale lab for contrastive-routed sparse LoRA-expert transformers."""

__version__ = "0.1.0"
