"""Evolutionary optimizer for DAG-structured ML pipelines with cached,
parallel, heterogeneous and remote fitness evaluation."""

__version__ = "0.1.0"
