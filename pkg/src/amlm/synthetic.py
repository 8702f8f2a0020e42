"""Synthetic Zipfian bigram corpora for desk-scale runs and tests."""

from __future__ import annotations

import argparse
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .vocab import BYTE_TOKENS, METASPACE, SPECIAL_TOKENS

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()
_CODAS = ["", "", "n", "r", "s"]
_TAGS = ("NOUN", "VERB", "ADJ", "ADV", "PROPN", "DET", "ADP", "NUM")


@dataclass
class SyntheticCorpus:
    tokens: list[str]  # vocabulary file lines
    documents: list[str]  # one text line per document
    words: list[str]  # word strings in Zipf rank order
    pos: dict[int, str]  # vocab id -> tag for word entries


def make_zipf_bigram(
    vocab_size: int = 2000,
    n_tokens: int = 100_000,
    seed: int = 0,
    zipf_s: float = 1.1,
    n_classes: int = 16,
    follow_prob: float = 0.8,
    doc_len: tuple[int, int] = (40, 120),
) -> SyntheticCorpus:
    """Class-bigram text with Zipfian word frequencies.

    Words are dealt round-robin by Zipf rank into ``n_classes`` classes.
    The next word's class is the successor of the current class with
    probability ``follow_prob`` (otherwise uniform), and the word is drawn
    Zipf-within-class. Context therefore pins down the class of a masked
    word, and frequent words are easier to guess than rare ones.

    The vocabulary holds the reserved entries, the 26 letters, a syllable
    inventory and one ``▁word`` entry per word, so every word tokenizes to
    exactly one id and the sub-token features are non-trivial. Each class
    is given a POS tag so the POS grouping has something to show.
    """
    g = rngmod.stream(seed, "synthetic")
    syllables = sorted({o + v + c for o in _ONSETS for v in _VOWELS for c in _CODAS})
    syllables = [s for s in syllables if len(s) > 1][:60]
    fixed = list(SPECIAL_TOKENS) + list(BYTE_TOKENS) + list(string.ascii_lowercase) + syllables
    n_words = vocab_size - len(fixed)
    if n_words < n_classes:
        raise ValueError(f"vocab_size {vocab_size} leaves fewer than {n_classes} word slots")

    words: list[str] = []
    seen = set(fixed)
    while len(words) < n_words:
        w = "".join(g.choice(syllables, size=int(g.integers(1, 4))))
        if METASPACE + w not in seen:
            seen.add(METASPACE + w)
            words.append(w)
    tokens = fixed + [METASPACE + w for w in words]

    word_class = np.arange(n_words) % n_classes
    members = [np.flatnonzero(word_class == c) for c in range(n_classes)]
    within = []
    for m in members:
        p = np.arange(1, len(m) + 1, dtype=np.float64) ** -zipf_s
        within.append(p / p.sum())
    class_p = np.array([(np.arange(1, n_words + 1, dtype=np.float64) ** -zipf_s)[m].sum() for m in members])
    class_p /= class_p.sum()
    successor = g.permutation(n_classes)

    docs: list[str] = []
    produced = 0
    while produced < n_tokens:
        length = min(int(g.integers(doc_len[0], doc_len[1] + 1)), n_tokens - produced)
        follow = g.random(length)
        jump = g.choice(n_classes, size=length, p=class_p)
        u = g.random(length)
        c = int(jump[0])
        seq = []
        for k in range(length):
            if k:
                c = int(successor[c]) if follow[k] < follow_prob else int(jump[k])
            idx = min(int(np.searchsorted(np.cumsum(within[c]), u[k])), len(members[c]) - 1)
            seq.append(int(members[c][idx]))
        docs.append(" ".join(words[i] for i in seq))
        produced += length

    first_word = len(fixed)
    pos = {first_word + i: _TAGS[word_class[i] % len(_TAGS)] for i in range(n_words)}
    return SyntheticCorpus(tokens=tokens, documents=docs, words=words, pos=pos)


def write_synthetic(out_dir: str | Path, **kwargs) -> dict[str, Path]:
    """Write ``vocab.txt``, ``corpus.txt`` and ``pos.tsv`` for a synthetic corpus."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = make_zipf_bigram(**kwargs)
    paths = {"vocab": out / "vocab.txt", "corpus": out / "corpus.txt", "pos_map": out / "pos.tsv"}
    paths["vocab"].write_text("".join(t + "\n" for t in sc.tokens), encoding="utf-8")
    paths["corpus"].write_text("".join(d + "\n" for d in sc.documents), encoding="utf-8")
    paths["pos_map"].write_text("".join(f"{i}\t{t}\n" for i, t in sorted(sc.pos.items())), encoding="utf-8")
    return paths


def main(argv: list[str] | None = None) -> None:
    ap = argparse.ArgumentParser(description="Write a synthetic Zipfian class-bigram corpus.")
    ap.add_argument("out_dir")
    ap.add_argument("--vocab-size", type=int, default=2000)
    ap.add_argument("--tokens", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    paths = write_synthetic(args.out_dir, vocab_size=args.vocab_size, n_tokens=args.tokens, seed=args.seed)
    for name, path in paths.items():
        print(f"{name}: {path}")


if __name__ == "__main__":
    main()
