"""Critic-guided grasp selection for in-hand rotation on a planar multi-finger hand."""
__version__ = "0.1.0"
