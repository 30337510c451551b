"""Closed vocabulary over the caption grammar."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from story.data.captions import grammar_words, join_words, split_words
from story.exceptions import DataFormatError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)


@dataclass
class TokenSequence:
    """Token ids padded to ``max_len``; ``mask`` is True on non-PAD positions."""

    ids: np.ndarray
    mask: np.ndarray
    truncated: bool = False

    @property
    def length(self) -> int:
        return int(self.mask.sum())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise DataFormatError("Vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise DataFormatError("Vocabulary contains duplicate tokens")
        self.tokens: List[str] = tokens
        self.ids: Dict[str, int] = {token: index for index, token in enumerate(tokens)}

    @classmethod
    def from_grammar(cls) -> "Vocabulary":
        return cls([*SPECIAL_TOKENS, *grammar_words()])

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])


def tokenize(caption: str, vocab: Vocabulary, max_len: int = 32) -> TokenSequence:
    """BOS + word ids + EOS, padded to ``max_len``; unknown words become UNK."""
    words = split_words(caption)
    truncated = len(words) + 2 > max_len
    if truncated:
        logger.warning(f"Caption longer than {max_len - 2} words truncated: '{caption[:60]}'")
        words = words[:max_len - 2]
    unk = vocab.ids[UNK]
    body = [vocab.ids.get(word, unk) for word in words]
    ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    sequence = [vocab.ids[BOS], *body, vocab.ids[EOS]]
    ids[:len(sequence)] = sequence
    mask = np.zeros(max_len, dtype=bool)
    mask[:len(sequence)] = True
    return TokenSequence(ids=ids, mask=mask, truncated=truncated)


def tokenize_batch(captions: Sequence[str], vocab: Vocabulary, max_len: int = 32) -> TokenSequence:
    sequences = [tokenize(caption, vocab, max_len) for caption in captions]
    return TokenSequence(
        ids=np.stack([s.ids for s in sequences]),
        mask=np.stack([s.mask for s in sequences]),
        truncated=any(s.truncated for s in sequences),
    )


def detokenize(tokens: TokenSequence, vocab: Vocabulary) -> str:
    words = [vocab.tokens[i] for i in tokens.ids[tokens.mask]]
    return join_words([word for word in words if word not in (BOS, EOS)])
