"""Desk-scale laboratory for dynamic expert specialization in MoE fine-tuning."""
__version__ = "0.1.0"
