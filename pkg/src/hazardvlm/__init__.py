"""Desk-scale vision-language hazard localization.

A miniature patch-transformer whose attention maps become hazard
coordinates, fine-tuned with a coordinate + text multi-task loss under
AdamW, evaluated with BLEU/ROUGE and pixel MSE.
"""

__version__ = "0.1.0"
