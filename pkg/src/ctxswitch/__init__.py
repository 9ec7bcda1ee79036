"""Context-aware micro-classifiers over frozen embeddings.

Small two-head classifiers specialise on a few co-occurring classes, a kNN
predictor picks the cheapest feature-extractor config for each context, and a
trace-driven simulator replays the edge-cloud switching loop.
"""

__version__ = "0.1.0"

from . import dataset, errors, heads, predictor, selection, similarity, simulator, switching  # noqa: E402
from .dataset import EmbeddingDataset, load_dataset  # noqa: E402
from .errors import CtxSwitchError, DataError, InfeasibleError  # noqa: E402

__all__ = [
    "__version__",
    "dataset",
    "errors",
    "heads",
    "predictor",
    "selection",
    "similarity",
    "simulator",
    "switching",
    "EmbeddingDataset",
    "load_dataset",
    "CtxSwitchError",
    "DataError",
    "InfeasibleError",
]
