"""Relational contrastive pre-training for text strips."""
