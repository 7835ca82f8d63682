"""Synthetic fact corpus over integer tokens.

Token layout for a vocabulary of size V::

    0            end of sequence
    1 .. 3       paraphrase tokens
    4 .. 7       relation tokens
    8 .. V-1     entity tokens (subjects and objects)

A fact key is ``(relation, subject_1, subject_2)`` and its prompt is
``[relation, subject_1, subject_2]``. Rephrases prepend paraphrase tokens,
which leaves the tail of the prompt (the part the decayed context weights
most) unchanged. Entity tokens are split by parity: edited facts take their
subjects from the even entities, while locality prompts and anchors take
theirs from the odd ones, so an unrelated prompt never shares a subject with
an edit. Objects (targets) may be any entity. Locality references are the
frozen base model's greedy decode.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Set, Tuple, Union

import numpy as np

from ..toylm import ModelState, greedy_decode

CORPUS_SCHEMA = "repair-corpus/1"
PARAPHRASE = (1, 2, 3)
RELATIONS = (4, 5, 6, 7)
FIRST_ENTITY = 8
TEMPLATES = ((1,), (2,), (3,), (1, 2), (2, 3), (3, 1))

Key = Tuple[int, int, int]


@dataclass
class EditExample:
    id: int
    edit_prompt: List[int]
    edit_target: List[int]
    rephrases: List[List[int]]
    locality_prompt: List[int]
    locality_reference: List[int]

    def to_record(self) -> dict:
        return {"schema": CORPUS_SCHEMA, "id": self.id, "edit_prompt": self.edit_prompt,
                "edit_target": self.edit_target, "rephrases": self.rephrases,
                "locality_prompt": self.locality_prompt,
                "locality_reference": self.locality_reference}

    @classmethod
    def from_record(cls, rec: dict) -> "EditExample":
        if rec.get("schema") != CORPUS_SCHEMA:
            raise ValueError(f"unsupported corpus schema {rec.get('schema')!r}")
        return cls(int(rec["id"]), list(rec["edit_prompt"]), list(rec["edit_target"]),
                   [list(r) for r in rec["rephrases"]], list(rec["locality_prompt"]),
                   list(rec["locality_reference"]))


def key_capacity(vocab_size: int) -> int:
    """Unique keys available to each side (edits, or locality prompts and anchors)."""
    n_sub = (vocab_size - FIRST_ENTITY) // 2
    return len(RELATIONS) * n_sub * n_sub


def subject_pool(vocab_size: int, edit: bool) -> np.ndarray:
    ents = np.arange(FIRST_ENTITY, vocab_size)
    return ents[0::2] if edit else ents[1::2]


def _draw_keys(rng: np.random.Generator, vocab_size: int, n: int, taken: Set[Key],
               edit: bool) -> List[Key]:
    pool = subject_pool(vocab_size, edit)
    if len(pool) < 2:
        raise ValueError("vocabulary too small for entity tokens")
    members = set(pool.tolist())
    if sum(1 for k in taken if k[1] in members) + n > key_capacity(vocab_size):
        raise ValueError(f"cannot draw {n} unique keys from a vocabulary of {vocab_size}")
    out: List[Key] = []
    while len(out) < n:
        key = (int(rng.choice(RELATIONS)), int(rng.choice(pool)), int(rng.choice(pool)))
        if key not in taken:
            taken.add(key)
            out.append(key)
    return out


def prompt_of(key: Key) -> List[int]:
    return [key[0], key[1], key[2]]


def generate_corpus(n: int, vocab_size: int, rephrases_per_fact: int, seed: int,
                    model: ModelState, target_len: int = 2) -> List[EditExample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if rephrases_per_fact < 1 or rephrases_per_fact > len(TEMPLATES):
        raise ValueError(f"rephrases_per_fact must lie in [1, {len(TEMPLATES)}]")
    if model.vocab_size != vocab_size:
        raise ValueError("model vocabulary does not match")
    if n > key_capacity(vocab_size):
        raise ValueError(f"n = {n} exceeds the unique-key capacity of vocab {vocab_size}")
    rng = np.random.default_rng([seed, 1])
    taken: Set[Key] = set()
    edit_keys = _draw_keys(rng, vocab_size, n, taken, edit=True)
    loc_keys = _draw_keys(rng, vocab_size, n, taken, edit=False)
    n_ent = vocab_size - FIRST_ENTITY
    out = []
    for i, (ek, lk) in enumerate(zip(edit_keys, loc_keys)):
        prompt = prompt_of(ek)
        base = greedy_decode(model, prompt, target_len)
        while True:
            target = [int(FIRST_ENTITY + t) for t in rng.integers(n_ent, size=target_len)]
            if target != base:
                break
        tmpl = rng.choice(len(TEMPLATES), size=rephrases_per_fact, replace=False)
        rephrases = [list(TEMPLATES[t]) + prompt for t in sorted(tmpl)]
        loc_prompt = prompt_of(lk)
        loc_ref = greedy_decode(model, loc_prompt, target_len)
        out.append(EditExample(i, prompt, target, rephrases, loc_prompt, loc_ref))
    return out


def corpus_keys(corpus: Iterable[EditExample]) -> Set[Key]:
    keys: Set[Key] = set()
    for ex in corpus:
        keys.add(tuple(ex.edit_prompt[-3:]))
        keys.add(tuple(ex.locality_prompt[-3:]))
    return keys


def generate_anchors(corpus: Sequence[EditExample], vocab_size: int, n: int, seed: int,
                     exclude: Iterable[List[int]] = ()) -> List[List[int]]:
    """Unrelated prompts whose keys appear nowhere in the corpus (or in ``exclude``)."""
    rng = np.random.default_rng([seed, 2, n])
    taken = corpus_keys(corpus) | {tuple(p[-3:]) for p in exclude}
    return [prompt_of(k) for k in _draw_keys(rng, vocab_size, n, taken, edit=False)]


def write_corpus(path: Union[str, Path], corpus: Sequence[EditExample]) -> None:
    with open(path, "w") as fh:
        for ex in corpus:
            fh.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")


def read_corpus(path: Union[str, Path]) -> List[EditExample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(EditExample.from_record(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad corpus record ({exc})") from None
    return out
