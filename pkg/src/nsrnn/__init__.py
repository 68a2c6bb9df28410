"""Differentiable nondeterministic stacks and the formal-language tasks used to test them."""

__version__ = "0.1.0"
