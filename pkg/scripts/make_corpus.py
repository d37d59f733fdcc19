#!/usr/bin/env python3
"""Regenerate the bundled sample corpus.

Deterministic synthetic prose over a coined Zipfian lexicon, so the
repository ships ~1 MB of training text with no external assets or licensing
baggage. The lexicon is large relative to the corpus (tail words appear once
or twice), which keeps byte-level models data-limited at desk-scale budgets
instead of saturating: spellings and frequent words come quickly, the long
tail keeps paying out, exactly the regime the teacher/baseline comparisons
need.
"""

import argparse
from pathlib import Path

import numpy as np

ONSETS = ["b", "br", "c", "ch", "d", "dr", "f", "fl", "g", "gl", "h", "j",
          "k", "kr", "l", "m", "n", "p", "pl", "pr", "r", "s", "sk", "sl",
          "st", "t", "th", "tr", "v", "w", "z"]
VOWELS = ["a", "e", "i", "o", "u", "ae", "ia", "ou"]
CODAS = ["", "", "", "n", "r", "s", "l", "m", "nd", "rn", "th", "x"]

FUNCTION_WORDS = ["the", "a", "of", "and", "to", "in", "that", "is", "with",
                  "for", "on", "as", "by", "from", "or", "at", "which", "but"]

PUNCT_END = [".", ".", ".", ".", "?", "!", ";"]


def make_lexicon(n_words: int, rng) -> list:
    seen = set(FUNCTION_WORDS)
    words = []
    while len(words) < n_words:
        n_syll = int(rng.integers(2, 5))
        word = "".join(ONSETS[rng.integers(len(ONSETS))]
                       + VOWELS[rng.integers(len(VOWELS))]
                       + CODAS[rng.integers(len(CODAS))]
                       for _ in range(n_syll))
        if word not in seen and len(word) <= 18:
            seen.add(word)
            words.append(word)
    return words


def zipf_weights(n: int, exponent: float = 1.05) -> np.ndarray:
    w = 1.0 / np.arange(2, n + 2) ** exponent
    return w / w.sum()


def sentence(rng, lexicon, weights) -> str:
    n_content = int(rng.integers(4, 11))
    parts = []
    for i in range(n_content):
        if i and rng.random() < 0.45:
            parts.append(FUNCTION_WORDS[rng.integers(len(FUNCTION_WORDS))])
        word = lexicon[rng.choice(len(lexicon), p=weights)]
        if rng.random() < 0.04:
            word = word.capitalize()  # occasional proper-name form
        parts.append(word)
        if 0 < i < n_content - 1 and rng.random() < 0.1:
            parts[-1] += ","
    if rng.random() < 0.08:
        parts.append(str(rng.integers(3, 1900)))
    text = " ".join(parts) + PUNCT_END[rng.integers(len(PUNCT_END))]
    return text[0].upper() + text[1:]


def generate(target_bytes: int, seed: int, n_words: int = 9000) -> str:
    rng = np.random.default_rng(seed)
    lexicon = make_lexicon(n_words, rng)
    weights = zipf_weights(len(lexicon))
    chunks = []
    size = 0
    while size < target_bytes:
        n_sentences = int(rng.integers(3, 8))
        para = " ".join(sentence(rng, lexicon, weights)
                        for _ in range(n_sentences)) + "\n\n"
        chunks.append(para)
        size += len(para)
    return "".join(chunks)[:target_bytes]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=1_000_000, help="bytes to emit")
    ap.add_argument("--seed", type=int, default=1234)
    ap.add_argument("--words", type=int, default=9000, help="lexicon size")
    ap.add_argument("--out", type=Path,
                    default=Path(__file__).resolve().parents[1]
                    / "src/hyenadistill/assets/sample_corpus.txt")
    args = ap.parse_args()
    text = generate(args.size, args.seed, args.words)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(text, encoding="utf-8")
    print(f"wrote {len(text)} bytes to {args.out}")


if __name__ == "__main__":
    main()
