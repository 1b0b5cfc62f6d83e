"""Synthetic multilingual benchmark data.

Each "language" is a deterministic, invertible transformation of a shared
base language: a bijective word-substitution cipher (every language gets its
own surface lexicon) followed by a local reordering rule. Difficulty is
controllable, every pair is perfectly learnable in the limit, and the
published inverse map lets tests verify the construction.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .seeding import derive_seed


class SynthError(ValueError):
    pass


def _reorder_identity(words: list[str]) -> list[str]:
    return list(words)


def _reorder_swap2(words: list[str]) -> list[str]:
    out = list(words)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def _reverse_blocks(words: list[str], block: int) -> list[str]:
    out = []
    for i in range(0, len(words), block):
        out.extend(reversed(words[i : i + block]))
    return out


def _rotate_blocks(words: list[str], block: int) -> list[str]:
    out = []
    for i in range(0, len(words), block):
        chunk = words[i : i + block]
        out.extend(chunk[1:] + chunk[:1])
    return out


def _unrotate_blocks(words: list[str], block: int) -> list[str]:
    out = []
    for i in range(0, len(words), block):
        chunk = words[i : i + block]
        out.extend(chunk[-1:] + chunk[:-1])
    return out


# name -> (apply, invert); all transformations are bijections on word lists.
REORDER_RULES: dict[str, tuple[Callable, Callable]] = {
    "identity": (_reorder_identity, _reorder_identity),
    "swap2": (_reorder_swap2, _reorder_swap2),
    "rev3": (lambda w: _reverse_blocks(w, 3), lambda w: _reverse_blocks(w, 3)),
    "rev4": (lambda w: _reverse_blocks(w, 4), lambda w: _reverse_blocks(w, 4)),
    "rot3": (lambda w: _rotate_blocks(w, 3), lambda w: _unrotate_blocks(w, 3)),
}

_DEFAULT_TRANSFORMS = ("swap2", "rev3", "rot3", "rev4")

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


def _make_lexicon(rng: random.Random, size: int, taken: set[str]) -> list[str]:
    """Distinct CV-syllable word forms; each language draws from its own
    shuffled syllabary so surface text identifies the language."""
    consonants = list(_CONSONANTS)
    vowels = list(_VOWELS)
    rng.shuffle(consonants)
    rng.shuffle(vowels)
    consonants = consonants[:9]
    vowels = vowels[:4]
    lexicon: list[str] = []
    while len(lexicon) < size:
        n_syll = rng.choice((2, 2, 3))
        word = "".join(rng.choice(consonants) + rng.choice(vowels) for _ in range(n_syll))
        if word not in taken:
            taken.add(word)
            lexicon.append(word)
    return lexicon


@dataclass(frozen=True)
class CipherLanguage:
    code: str
    word_map: dict[str, str]      # base word -> surface word
    inverse_map: dict[str, str]   # surface word -> base word
    reorder: str

    def from_base(self, base_sentence: str) -> str:
        words = [self.word_map[w] for w in base_sentence.split()]
        return " ".join(REORDER_RULES[self.reorder][0](words))

    def to_base(self, cipher_sentence: str) -> str:
        words = REORDER_RULES[self.reorder][1](cipher_sentence.split())
        return " ".join(self.inverse_map[w] for w in words)


@dataclass
class SynthSpec:
    codes: Sequence[str]
    transforms: Sequence[str] | None = None
    train_size: int = 20000
    dev_size: int = 1000
    test_size: int = 1000
    base_vocab: int = 160
    min_len: int = 4
    max_len: int = 12
    tgt_code: str = "en"
    seed: int = 7

    def __post_init__(self):
        if len(self.codes) < 1:
            raise SynthError("at least one cipher language is required")
        if len(set(self.codes)) != len(self.codes) or self.tgt_code in self.codes:
            raise SynthError("language codes must be unique and distinct from the target code")
        if self.transforms is not None and len(self.transforms) != len(self.codes):
            raise SynthError("transforms list must match codes list")
        for t in self.transforms or ():
            if t not in REORDER_RULES:
                raise SynthError(f"unknown reorder rule {t!r}; choose from {sorted(REORDER_RULES)}")


def _zipf_weights(n: int) -> list[float]:
    return [1.0 / (rank + 2.0) ** 1.1 for rank in range(n)]


def build_languages(spec: SynthSpec) -> tuple[list[str], dict[str, CipherLanguage]]:
    """Base lexicon plus one CipherLanguage per requested code."""
    rng = random.Random(derive_seed(spec.seed, "lexicon"))
    taken: set[str] = set()
    base_lexicon = _make_lexicon(rng, spec.base_vocab, taken)
    transforms = list(spec.transforms) if spec.transforms else [
        _DEFAULT_TRANSFORMS[i % len(_DEFAULT_TRANSFORMS)] for i in range(len(spec.codes))
    ]
    languages: dict[str, CipherLanguage] = {}
    for code, transform in zip(spec.codes, transforms):
        lang_rng = random.Random(derive_seed(spec.seed, f"lang:{code}"))
        if transform == "identity":
            word_map = {w: w for w in base_lexicon}
        else:
            surface = _make_lexicon(lang_rng, spec.base_vocab, taken)
            perm = list(range(spec.base_vocab))
            lang_rng.shuffle(perm)
            word_map = {base_lexicon[i]: surface[perm[i]] for i in range(spec.base_vocab)}
        languages[code] = CipherLanguage(
            code=code,
            word_map=word_map,
            inverse_map={v: k for k, v in word_map.items()},
            reorder=transform,
        )
    return base_lexicon, languages


def _sample_sentences(
    rng: random.Random, lexicon: list[str], count: int, min_len: int, max_len: int,
    seen: set[str],
) -> list[str]:
    weights = _zipf_weights(len(lexicon))
    out: list[str] = []
    while len(out) < count:
        length = rng.randint(min_len, max_len)
        sent = " ".join(rng.choices(lexicon, weights=weights, k=length))
        if sent not in seen:
            seen.add(sent)
            out.append(sent)
    return out


def generate(spec: SynthSpec, out_dir: str | Path) -> dict:
    """Write train/dev/test parallel files for every cipher pair.

    Files follow the {split}.{src}-{tgt}.{src|tgt} convention. A sidecar
    mapping.json per pair publishes the word map and reorder rule; a
    manifest.json describes the whole dataset. Everything is deterministic in
    spec.seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_lexicon, languages = build_languages(spec)

    planned: set[Path] = set()
    for code in spec.codes:
        for split in ("train", "dev", "test"):
            for side in ("src", "tgt"):
                p = out / f"{split}.{code}-{spec.tgt_code}.{side}"
                if p in planned:
                    raise SynthError(f"overlapping output path {p}")
                planned.add(p)

    manifest: dict = {
        "tgt_code": spec.tgt_code,
        "base_vocab": spec.base_vocab,
        "seed": spec.seed,
        "sizes": {"train": spec.train_size, "dev": spec.dev_size, "test": spec.test_size},
        "pairs": [],
    }
    sizes = (("train", spec.train_size), ("dev", spec.dev_size), ("test", spec.test_size))
    for code in spec.codes:
        lang = languages[code]
        rng = random.Random(derive_seed(spec.seed, f"sentences:{code}"))
        seen: set[str] = set()
        for split, count in sizes:
            base_lines = _sample_sentences(rng, base_lexicon, count, spec.min_len, spec.max_len, seen)
            cipher_lines = [lang.from_base(line) for line in base_lines]
            key = f"{code}-{spec.tgt_code}"
            (out / f"{split}.{key}.src").write_text("\n".join(cipher_lines) + "\n", encoding="utf-8")
            (out / f"{split}.{key}.tgt").write_text("\n".join(base_lines) + "\n", encoding="utf-8")
        mapping = {
            "code": code,
            "reorder": lang.reorder,
            "word_map": lang.word_map,
            "inverse_map": lang.inverse_map,
        }
        map_path = out / f"mapping.{code}-{spec.tgt_code}.json"
        map_path.write_text(json.dumps(mapping, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        manifest["pairs"].append({"src": code, "tgt": spec.tgt_code, "reorder": lang.reorder})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
