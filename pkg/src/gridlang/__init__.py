"""gridlang: a desk-scale multimodal transformer with a pure-text interface.

Detection emits boxes as digit tokens, segmentation retrieves masks by
dot-product similarity between query-token embeddings and image features,
and a lattice of interpolated local prompts decodes many objects in parallel
under one shared image/prompt cache.
"""

from .codec import BoxAnn, Vocabulary, parse_response, serialize_box
from .config import RunConfig, load_config
from .decode import decode_grid, decode_single
from .evalkit import MetricReport, average_precision, nms
from .model import GridSpec, Model, ModelConfig
from .retrieval import assemble_mask, pixel_shuffle, retrieve
from .synth import GenParams, Sample, generate, read_shard, write_shard
from .tensor import Tensor
from .train import TrainParams, assemble_batch, train_loop, train_step

__version__ = "0.1.0"

__all__ = [
    "BoxAnn", "Vocabulary", "parse_response", "serialize_box",
    "RunConfig", "load_config", "decode_grid", "decode_single",
    "MetricReport", "average_precision", "nms",
    "GridSpec", "Model", "ModelConfig",
    "assemble_mask", "pixel_shuffle", "retrieve",
    "GenParams", "Sample", "generate", "read_shard", "write_shard",
    "Tensor", "TrainParams", "assemble_batch", "train_loop", "train_step",
]
