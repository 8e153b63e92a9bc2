"""Deterministic pseudo-English corpus generator.

The evaluation harness needs a bundled text corpus with learnable
structure. Real datasets are out of scope at desk scale, so the corpus is
synthesized from a seeded grammar: a Zipf-weighted lexicon of syllabic
words arranged into punctuated sentences and paragraphs. Every trend the
harness asserts (quantization degradation, outlier-fraction sweeps,
calibration-sample counts) is corpus-agnostic; what matters is that a
byte-level model can learn the distribution well enough that perturbing
its weights measurably hurts perplexity.
"""

from __future__ import annotations

import numpy as np

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w",
           "br", "ch", "dr", "gr", "pl", "sh", "st", "th", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "ou"]
_CODAS = ["", "", "", "n", "r", "s", "t", "l", "nd", "st", "rm"]


def _lexicon(rng: np.random.Generator, n_words: int) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < n_words:
        n_syll = int(rng.integers(1, 4))
        word = "".join(
            _ONSETS[rng.integers(len(_ONSETS))]
            + _VOWELS[rng.integers(len(_VOWELS))]
            + (_CODAS[rng.integers(len(_CODAS))] if s == n_syll - 1 else "")
            for s in range(n_syll)
        )
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def generate_corpus(seed: int, n_chars: int, n_words: int = 400) -> str:
    """ASCII text of roughly ``n_chars`` characters, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    words = _lexicon(rng, n_words)
    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    zipf = 1.0 / ranks
    zipf /= zipf.sum()

    chunks: list[str] = []
    total = 0
    sentences_in_par = 0
    par_target = int(rng.integers(3, 9))
    while total < n_chars:
        n = int(rng.integers(4, 15))
        picks = rng.choice(n_words, size=n, p=zipf)
        tokens = [words[i] for i in picks]
        tokens[0] = tokens[0].capitalize()
        if n > 7 and rng.random() < 0.5:
            comma_at = int(rng.integers(2, n - 2))
            tokens[comma_at] = tokens[comma_at] + ","
        terminal = "." if rng.random() < 0.9 else "?"
        sentence = " ".join(tokens) + terminal
        sentences_in_par += 1
        if sentences_in_par >= par_target:
            sentence += "\n\n"
            sentences_in_par = 0
            par_target = int(rng.integers(3, 9))
        else:
            sentence += " "
        chunks.append(sentence)
        total += len(sentence)
    return "".join(chunks)[:n_chars]
