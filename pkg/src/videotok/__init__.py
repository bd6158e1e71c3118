"""Desk-scale pyramidal video tokenizer with a language-aligned binary codebook."""

from .container import decode_container, encode_container, read_container, write_container
from .errors import DegenerateDataError, NumericalError, ValidationError
from .fixtures import CaptionedClip, embed_text, make_clip, make_corpus, mask_video
from .localization import Segment, decode_segments, localize_multi
from .model import RunConfig, Tokenizer
from .objectives import LossWeights
from .segmentation import CRFParams, segment_all
from .train import demo_collapse, run_ablation, train_toy

__all__ = [
    "CRFParams", "CaptionedClip", "DegenerateDataError", "LossWeights", "NumericalError", "RunConfig", "Segment",
    "Tokenizer", "ValidationError", "decode_container", "decode_segments", "demo_collapse", "embed_text",
    "encode_container", "localize_multi", "make_clip", "make_corpus", "mask_video", "read_container",
    "run_ablation", "segment_all", "train_toy", "write_container",
]
__version__ = "0.1.0"
