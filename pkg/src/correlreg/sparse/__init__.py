"""Sparse coding, proximal splitting and dictionary learning."""
