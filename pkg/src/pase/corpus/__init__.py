"""Phoneme-aligned audio/video material: parsing, cropping, segmentation, batching."""

from pase.corpus.alignment import PhonemeInterval, parse_alignment, write_alignment
from pase.corpus.dataset import AlignmentBatch, SegmentDataset, sample_batch
from pase.corpus.inventory import PhonemeInventory, arpabet_inventory, desk_inventory
from pase.corpus.lips import LipWindow, build_window, crop_lips, lip_box
from pase.corpus.segments import PhonemeSegment, segment_clip
from pase.corpus.store import Clip, Corpus, load_corpus, save_corpus
from pase.corpus.synthetic import SynthConfig, generate_synthetic_corpus

__all__ = [
    "AlignmentBatch",
    "Clip",
    "Corpus",
    "LipWindow",
    "PhonemeInterval",
    "PhonemeInventory",
    "PhonemeSegment",
    "SegmentDataset",
    "SynthConfig",
    "arpabet_inventory",
    "build_window",
    "crop_lips",
    "desk_inventory",
    "generate_synthetic_corpus",
    "lip_box",
    "load_corpus",
    "parse_alignment",
    "sample_batch",
    "save_corpus",
    "segment_clip",
    "write_alignment",
]
