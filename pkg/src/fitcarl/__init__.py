"""Few-shot out-of-graph link prediction on temporal knowledge graphs.

A reinforcement-learning agent walks a background temporal KG to answer
queries about newly emerged entities, guided by a time-aware Transformer
encoder, a confidence-augmented policy and a concept regularizer.
"""

__version__ = "0.1.0"
