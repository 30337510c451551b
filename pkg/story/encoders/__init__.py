from story.encoders.model import DualEncoder, ImageEmbedding, TextEmbedding, pooled_embedding
from story.encoders.vocab import TokenSequence, Vocabulary, detokenize, tokenize, tokenize_batch

__all__ = [
    "DualEncoder",
    "ImageEmbedding",
    "TextEmbedding",
    "TokenSequence",
    "Vocabulary",
    "detokenize",
    "pooled_embedding",
    "tokenize",
    "tokenize_batch",
]
