"""Fine-grained dataset distillation with counterfactual-attention teachers."""

__version__ = "0.1.0"
