"""Synthetic video corpus, feature files, description stub and embeddings."""

from .describe import (
    MAX_CLASSES,
    ClassDescription,
    DescriptionPair,
    Describer,
    HttpDescriber,
    TemplateDescriber,
    builtin_table,
    mask_count,
    mask_description,
    read_table,
    write_table,
)
from .synth import CorpusConfig, VideoSample, generate_corpus, make_prototypes, split_corpus
from .vocab import MASK_TOKEN, PAD, START, Vocabulary, tokenize
from .wtf1 import decode, encode, load_feature_file, write_feature_file
