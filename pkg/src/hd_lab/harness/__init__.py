"""Datasets, metrics, experiment pipelines and result export."""
