"""Shared synthetic fixture for the demo scripts."""

from ctxswitch.dataset import graded_center_distances, synthesize_gaussian_dataset

# (MFLOPs, embedding noise): cheaper extractors give noisier embeddings
CONFIGS = [(50.0, 2.0), (100.0, 1.2), (200.0, 0.6), (400.0, 0.0)]


def build(n_classes=10, seed=42):
    D = graded_center_distances(n_classes, seed)
    return synthesize_gaussian_dataset(n_classes, 16, 1.0, D, 100, CONFIGS, seed)
