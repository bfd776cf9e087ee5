# Semantic-Style Fusion Engine
__version__ = "1.0.0"
