"""Desk-scale visual-prompt multimodal stack.

Everything runs on a small float64 autodiff engine (`markvlm.tensor`); the
remaining modules build prompt rasterisation, the shared multi-scale vision
encoders, a LoRA-adapted causal decoder, staged training, dataset tooling,
caption metrics and a CLI on top of it.
"""

__version__ = "0.1.0"
