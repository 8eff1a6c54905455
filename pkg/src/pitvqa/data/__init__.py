"""Synthetic PitVQA-style corpus: taxonomy, workflow, frames, QA pairs, I/O."""

from .corpus import (
    Corpus,
    ManifestError,
    VQASample,
    generate_corpus,
    read_dataset,
    split_by_procedure,
    write_dataset,
)
from .questions import all_template_questions, generate_qa
from .render import render_frame
from .taxonomy import CATEGORIES, TAXONOMY, Taxonomy, build_taxonomy
from .vocab import PAD, UNK, Vocabulary, build_vocab, detokenize, tokenize
from .workflow import FrameState, sample_procedure
