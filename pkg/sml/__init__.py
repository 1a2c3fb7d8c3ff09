"""
Social machine learning: networked classifiers fused by adaptive diffusion
"""
__version__ = "1.0.0"
