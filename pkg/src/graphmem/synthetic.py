"""Procedural long documents with planted, dispersed fact chains.

A document is pseudo-word filler sentences with template fact sentences
(``<Head> <phrase> <Tail>.``) dropped in at uniform random positions. The
question names the head of a 1- or 2-hop chain and the relation phrases to
follow, and its answer is the chain's last tail. Most planted facts hang off
the same entities as the chain, so finding the chain takes selective
retrieval.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from graphmem.chunker import token_count
from graphmem.extraction import RuleGrammar, relation_name
from graphmem.model import QAInstance, Triple, edge_id

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    target_tokens: int = 3000
    facts_per_doc: int = 12
    hops: int = 2
    filler_vocab: int = 2000
    vocab_seed: int = 7
    min_sentence_words: int = 8
    max_sentence_words: int = 16
    grammar: RuleGrammar = field(default_factory=RuleGrammar)

    def validate(self) -> None:
        if self.hops not in (1, 2):
            raise ValueError("hop depth must be 1 or 2")
        if self.facts_per_doc < self.hops:
            raise ValueError("need at least as many facts as hops")
        # a planted sentence is at most 2 + 3 + 2 words plus the period
        longest_phrase = max(len(p.split()) for p in self.grammar.phrases)
        if self.target_tokens < self.facts_per_doc * (longest_phrase + 5):
            raise ValueError("target length too short for the planted facts")
        if len(self.grammar.phrases) < self.hops:
            raise ValueError("grammar has too few relations")


def _syllable(rng: np.random.Generator) -> str:
    return CONSONANTS[rng.integers(len(CONSONANTS))] + VOWELS[rng.integers(len(VOWELS))]


def filler_vocabulary(cfg: GenConfig) -> list[str]:
    """Open-syllable pseudo-words (always ending in a vowel), none of them a grammar word."""
    return list(_filler_vocabulary(cfg.filler_vocab, cfg.vocab_seed, cfg.grammar.vocabulary))


@lru_cache(maxsize=16)
def _filler_vocabulary(size: int, vocab_seed: int, banned: frozenset[str]) -> tuple[str, ...]:
    rng = np.random.default_rng(vocab_seed)
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < size:
        w = "".join(_syllable(rng) for _ in range(rng.integers(1, 4)))
        if w not in seen and w not in banned:
            seen.add(w)
            words.append(w)
    return tuple(words)


def _entity_word(rng: np.random.Generator) -> str:
    return _syllable(rng) + _syllable(rng) + CONSONANTS[rng.integers(len(CONSONANTS))]


class _Names:
    def __init__(self, rng: np.random.Generator, reserved: set[str], banned: frozenset[str]):
        self.rng = rng
        self.reserved = reserved
        self.banned = banned

    def new(self) -> str:
        while True:
            a, b = _entity_word(self.rng), _entity_word(self.rng)
            if a in self.banned or b in self.banned or a == b:
                continue
            name = f"{a.capitalize()} {b.capitalize()}"
            if name.lower() not in self.reserved:
                self.reserved.add(name.lower())
                return name


def _plant_facts(cfg: GenConfig, rng: np.random.Generator, names: _Names):
    phrases = list(cfg.grammar.phrases)
    n_rel = len(phrases)
    if cfg.facts_per_doc <= n_rel:
        rel_ids = list(rng.permutation(n_rel)[: cfg.facts_per_doc])
    else:
        first = list(rng.permutation(n_rel)[: cfg.hops])
        rel_ids = first + list(rng.integers(0, n_rel, cfg.facts_per_doc - cfg.hops))

    head = names.new()
    chain = [head] + [names.new() for _ in range(cfg.hops)]
    gold_phr = [phrases[i] for i in rel_ids[: cfg.hops]]
    facts = [(chain[h], gold_phr[h], chain[h + 1]) for h in range(cfg.hops)]
    # (entity, relation) pairs that would make the chain ambiguous
    forbidden = {(chain[h], gold_phr[h]) for h in range(cfg.hops)}

    pool = [chain[h] for h in range(cfg.hops)]  # hubs the distractors attach to
    others: list[str] = []
    for j, ri in enumerate(rel_ids[cfg.hops :]):
        phrase = phrases[ri]
        slot = j % 3
        if slot < 2:
            anchor = pool[slot % len(pool)]
        elif others:
            anchor = others[rng.integers(len(others))]
        else:
            anchor = names.new()
            others.append(anchor)
        new = names.new()
        others.append(new)
        if rng.random() < 0.5 and (anchor, phrase) not in forbidden:
            fact = (anchor, phrase, new)
        else:
            fact = (new, phrase, anchor)
        facts.append(fact)
    return facts, chain, gold_phr


def question_text(head: str, phrases: list[str]) -> str:
    if len(phrases) == 1:
        return f"Starting from {head}, which entity is reached by following {phrases[0]}?"
    return f"Starting from {head}, which entity is reached by following {phrases[0]} and then {phrases[1]}?"


def generate(cfg: GenConfig, reserved: set[str] | None = None, instance_id: str | None = None) -> QAInstance:
    """One deterministic instance per seed.

    ``reserved`` collects lowercase entity names already in use; names in it
    are never reused, and new ones are added to it.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    reserved = set() if reserved is None else reserved
    names = _Names(rng, reserved, cfg.grammar.vocabulary)
    facts, chain, gold_phr = _plant_facts(cfg, rng, names)

    planted = [cfg.grammar.sentence(h, p, t) for h, p, t in facts]
    planted_tokens = sum(token_count(s) for s in planted)
    vocab = _filler_vocabulary(cfg.filler_vocab, cfg.vocab_seed, cfg.grammar.vocabulary)
    filler: list[str] = []
    total = planted_tokens
    while True:
        n_words = int(rng.integers(cfg.min_sentence_words, cfg.max_sentence_words + 1))
        if total + n_words + 1 > cfg.target_tokens:
            break
        words = [vocab[i] for i in rng.integers(0, len(vocab), n_words)]
        filler.append(" ".join(words) + ".")
        total += n_words + 1

    # planted facts go to uniform slots among the filler sentences, in shuffled order
    order = rng.permutation(len(planted))
    slots = np.sort(rng.integers(0, len(filler) + 1, len(planted)))
    sentences: list[str] = []
    cursor = 0
    for slot, idx in zip(slots, order):
        sentences.extend(filler[cursor:slot])
        cursor = slot
        sentences.append(planted[idx])
    sentences.extend(filler[cursor:])

    gold = [Triple(h, relation_name(p), t) for h, p, t in facts[: cfg.hops]]
    return QAInstance(
        id=instance_id or f"syn-{cfg.seed}",
        context=" ".join(sentences),
        question=question_text(chain[0], gold_phr),
        answers=(chain[-1],),
        gold_edge_ids=tuple(edge_id(t) for t in gold),
    )


def planted_triples(instance: QAInstance, grammar: RuleGrammar | None = None) -> list[Triple]:
    """Recover the planted facts straight from the context text (no chunking)."""
    from graphmem.chunker import Chunk
    from graphmem.extraction import rule_extract

    grammar = grammar or RuleGrammar()
    return rule_extract(Chunk(1, 0, token_count(instance.context), instance.context), grammar)


def derived_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1, dtype=np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_suite(n: int, cfg: GenConfig, prefix: str = "syn") -> list[QAInstance]:
    if n < 1:
        raise ValueError("suite size must be >= 1")
    reserved: set[str] = set()
    return [
        generate(replace(cfg, seed=s), reserved, instance_id=f"{prefix}-{cfg.seed}-{i:05d}")
        for i, s in enumerate(derived_seeds(cfg.seed, n))
    ]
