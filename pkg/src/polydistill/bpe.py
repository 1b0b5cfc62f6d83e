"""Joint byte-pair encoding shared across every language of a run.

A single merge table and vocabulary is learned over the pooled text of all
language pairs, so the teacher models and the multilingual student emit
distributions over the same output ids.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"

EOW = "</w>"

_SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)


class BpeError(ValueError):
    pass


class UnknownLanguageTagError(BpeError):
    def __init__(self, code: str):
        super().__init__(f"no language tag registered for code {code!r}")
        self.code = code


class BpeFormatError(BpeError):
    pass


def tag_token(code: str) -> str:
    """Source-side token telling a one-to-many model which language to emit."""
    return f"<2{code}>"


def pretokenize(raw: str) -> list[str]:
    """Split on whitespace, then peel punctuation characters into their own words.

    Stands in for a full tokenizer; case is preserved.
    """
    words: list[str] = []
    for chunk in raw.split():
        run = ""
        for ch in chunk:
            if ch.isalnum():
                run += ch
            else:
                if run:
                    words.append(run)
                    run = ""
                words.append(ch)
        if run:
            words.append(run)
    return words


def _word_symbols(word: str) -> tuple[str, ...]:
    # Final character carries the end-of-word marker so decode is lossless.
    if len(word) == 1:
        return (word + EOW,)
    return tuple(word[:-1]) + (word[-1] + EOW,)


def _merge_word(syms: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    left, right = pair
    out: list[str] = []
    i = 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == left and syms[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return tuple(out)


@dataclass(frozen=True)
class BpeModel:
    """Learned merge list plus the shared vocabulary.

    Immutable once built; encode/decode are pure and safe to call from
    multiple threads. The per-word encode memo is only ever appended to.
    """

    merges: tuple[tuple[str, str], ...]
    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]
    tag_ids: dict[str, int]
    _ranks: dict[tuple[str, str], int] = field(repr=False, compare=False, default_factory=dict)
    _word_memo: dict[str, tuple[int, ...]] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        self._ranks.update({pair: i for i, pair in enumerate(self.merges)})

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((PAD_ID, BOS_ID, EOS_ID, UNK_ID, *self.tag_ids.values()))

    def tag_id(self, code: str) -> int:
        try:
            return self.tag_ids[code]
        except KeyError:
            raise UnknownLanguageTagError(code) from None

    def _encode_word(self, word: str) -> tuple[int, ...]:
        memo = self._word_memo.get(word)
        if memo is not None:
            return memo
        syms = _word_symbols(word)
        while len(syms) > 1:
            ranked = [
                (self._ranks[p], p)
                for p in set(zip(syms, syms[1:]))
                if p in self._ranks
            ]
            if not ranked:
                break
            _, best = min(ranked)
            syms = _merge_word(syms, best)
        ids = tuple(self.token_to_id.get(s, UNK_ID) for s in syms)
        self._word_memo[word] = ids
        return ids

    def encode(self, sentence: str, tgt_tag: str | None = None) -> list[int]:
        """Token ids for a raw sentence; optionally prefixed with a target-language tag."""
        ids: list[int] = []
        if tgt_tag is not None:
            ids.append(self.tag_id(tgt_tag))
        for word in pretokenize(sentence):
            ids.extend(self._encode_word(word))
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        """Inverse of encode up to pretokenization; special ids are skipped."""
        specials = self.special_ids
        words: list[str] = []
        current = ""
        for i in ids:
            if not 0 <= int(i) < len(self.id_to_token):
                raise BpeError(f"token id {int(i)} out of range for vocab of {len(self.id_to_token)}")
            if int(i) in specials:
                continue
            tok = self.id_to_token[int(i)]
            if tok.endswith(EOW):
                words.append(current + tok[: -len(EOW)])
                current = ""
            else:
                current += tok
        if current:
            words.append(current)
        return " ".join(words)

    def save(self, path: str | Path) -> None:
        lines = [f"bpe v1 {len(self.merges)}"]
        lines.extend(f"{left} {right}" for left, right in self.merges)
        lines.append("---")
        lines.extend(f"{tok}\t{i}" for i, tok in enumerate(self.id_to_token))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def learn_bpe(
    corpora: Sequence[Iterable[str]],
    num_merges: int,
    tag_codes: Sequence[str] = (),
) -> BpeModel:
    """Learn merges over the pooled word-frequency table of all corpora.

    Ties between equally frequent pairs go to the lexicographically smaller
    (left, right) so the merge list is reproducible.
    """
    if num_merges < 0:
        raise BpeError("num_merges must be >= 0")
    if not corpora:
        raise BpeError("at least one corpus is required")
    word_freq: Counter[str] = Counter()
    for corpus in corpora:
        for line in corpus:
            word_freq.update(pretokenize(line))
    if not word_freq:
        raise BpeError("pooled corpus is empty")

    words: list[tuple[str, ...]] = [_word_symbols(w) for w in word_freq]
    freqs = list(word_freq.values())
    alphabet = sorted({s for syms in words for s in syms})

    # Pair counts plus an index of which words contain each pair, updated
    # incrementally as merges are applied.
    pair_counts: Counter[tuple[str, str]] = Counter()
    pair_words: dict[tuple[str, str], set[int]] = {}
    for wi, syms in enumerate(words):
        for p in zip(syms, syms[1:]):
            pair_counts[p] += freqs[wi]
            pair_words.setdefault(p, set()).add(wi)

    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        best = None
        best_count = 0
        for p, c in pair_counts.items():
            if c > best_count or (c == best_count and best is not None and p < best):
                best, best_count = p, c
        if best is None or best_count <= 0:
            break
        merges.append(best)
        for wi in sorted(pair_words.get(best, ())):
            old = words[wi]
            new = _merge_word(old, best)
            f = freqs[wi]
            for p in zip(old, old[1:]):
                pair_counts[p] -= f
                if pair_counts[p] <= 0:
                    del pair_counts[p]
                ws = pair_words.get(p)
                if ws is not None:
                    ws.discard(wi)
            for p in zip(new, new[1:]):
                pair_counts[p] += f
                pair_words.setdefault(p, set()).add(wi)
            words[wi] = new

    id_to_token = list(_SPECIAL_TOKENS)
    tag_ids: dict[str, int] = {}
    for code in sorted(set(tag_codes)):
        tag_ids[code] = len(id_to_token)
        id_to_token.append(tag_token(code))
    seen = set(id_to_token)
    for sym in alphabet:
        if sym not in seen:
            seen.add(sym)
            id_to_token.append(sym)
    for left, right in merges:
        sym = left + right
        if sym not in seen:
            seen.add(sym)
            id_to_token.append(sym)

    return BpeModel(
        merges=tuple(merges),
        token_to_id={tok: i for i, tok in enumerate(id_to_token)},
        id_to_token=tuple(id_to_token),
        tag_ids=tag_ids,
    )


def load_bpe(path: str | Path) -> BpeModel:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith("bpe v1 "):
        raise BpeFormatError(f"{path}: missing 'bpe v1' header")
    try:
        n_merges = int(lines[0].split()[2])
    except (IndexError, ValueError):
        raise BpeFormatError(f"{path}: malformed header {lines[0]!r}") from None
    merges: list[tuple[str, str]] = []
    i = 1
    while i < len(lines) and lines[i] != "---":
        parts = lines[i].split(" ")
        if len(parts) != 2:
            raise BpeFormatError(f"{path}: malformed merge line {lines[i]!r}")
        merges.append((parts[0], parts[1]))
        i += 1
    if len(merges) != n_merges:
        raise BpeFormatError(f"{path}: header declares {n_merges} merges, found {len(merges)}")
    if i >= len(lines):
        raise BpeFormatError(f"{path}: missing '---' separator")
    vocab: dict[int, str] = {}
    for line in lines[i + 1 :]:
        if not line:
            continue
        tok, _, idx = line.partition("\t")
        if not idx:
            raise BpeFormatError(f"{path}: malformed vocab line {line!r}")
        vocab[int(idx)] = tok
    if sorted(vocab) != list(range(len(vocab))):
        raise BpeFormatError(f"{path}: vocab ids are not dense 0..{len(vocab) - 1}")
    id_to_token = tuple(vocab[i] for i in range(len(vocab)))
    for i, tok in enumerate(_SPECIAL_TOKENS):
        if id_to_token[i] != tok:
            raise BpeFormatError(f"{path}: special token {tok} missing from id {i}")
    tag_ids = {
        tok[2:-1]: i
        for i, tok in enumerate(id_to_token)
        if tok.startswith("<2") and tok.endswith(">")
    }
    return BpeModel(
        merges=tuple(merges),
        token_to_id={tok: i for i, tok in enumerate(id_to_token)},
        id_to_token=id_to_token,
        tag_ids=tag_ids,
    )
