"""Stochastic set construction: fixed-size neighbor samples, biased random
walks with frequency-ranked contexts, ranking/graph negative sampling, and
history sampling.

Every function is a deterministic function of its inputs and the generator
state.  Named sub-streams derived from one root seed keep the components
independently reproducible.
"""

from __future__ import annotations

import multiprocessing
import struct
import warnings
import zlib
from collections import Counter
from dataclasses import dataclass
from functools import partial

import numpy as np

from .graph import InputError, InteractionStore, KnowledgeGraph


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose under a single root seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


@dataclass(frozen=True)
class WalkConfig:
    """Biased-walk parameters: return bias gamma, walk count, length, context size."""

    gamma: float = 0.2
    num_walks: int = 15
    walk_length: int = 8
    context_size: int = 4

    def __post_init__(self):
        if not 0.0 < self.gamma < 0.5:
            raise InputError(f"gamma must be in (0, 0.5), got {self.gamma}")
        if min(self.num_walks, self.walk_length, self.context_size) < 1:
            raise InputError("num_walks, walk_length and context_size must be >= 1")


def sample_local_neighbors(kg: KnowledgeGraph, entity: int, size: int,
                           rng: np.random.Generator) -> list:
    """Exactly ``size`` (relation, tail) pairs from the entity's neighbors.

    Uniform without replacement when enough neighbors exist, with replacement
    otherwise; an isolated entity falls back to ``size`` self-loops tagged
    with the reserved self relation.
    """
    if size < 1:
        raise InputError("size must be >= 1")
    pairs = kg.adjacency[entity]
    if not pairs:
        return [(kg.self_relation, entity)] * size
    if len(pairs) >= size:
        chosen = rng.choice(len(pairs), size=size, replace=False)
    else:
        chosen = rng.integers(0, len(pairs), size=size)
    return [pairs[j] for j in chosen]


def walk_step(kg: KnowledgeGraph, prev: int | None, cur: int, gamma: float,
              rng: np.random.Generator) -> int:
    """One biased transition from ``cur``.

    Candidates are the distinct neighbor entities of ``cur``; a candidate
    weighs gamma when it equals the previous entity or neighbors it, and
    1 - gamma otherwise.  Without a previous entity all weights tie, i.e. the
    step is uniform.  An entity with no neighbors stays put.
    """
    candidates = kg.neighbors_of(cur)
    if candidates.size == 0:
        return cur
    if prev is None:
        return int(candidates[rng.integers(0, candidates.size)])
    near_prev = np.isin(candidates, kg.neighbors_of(prev)) | (candidates == prev)
    weights = np.where(near_prev, gamma, 1.0 - gamma)
    weights = weights / weights.sum()
    return int(rng.choice(candidates, p=weights))


def run_walks(kg: KnowledgeGraph, root: int, cfg: WalkConfig,
              rng: np.random.Generator) -> list:
    """``num_walks`` paths of ``walk_length`` entities each, roots excluded."""
    paths = []
    for _ in range(cfg.num_walks):
        prev: int | None = None
        cur = root
        path = []
        for _ in range(cfg.walk_length):
            nxt = walk_step(kg, prev, cur, cfg.gamma, rng)
            path.append(nxt)
            prev, cur = cur, nxt
        paths.append(path)
    return paths


def rank_walk_visits(paths, root: int, size: int) -> list:
    """Top visited entities across paths: frequency descending, index ascending.

    The root never appears in its own context.
    """
    counts = Counter()
    for path in paths:
        counts.update(path)
    counts.pop(root, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [entity for entity, _ in ranked[:size]]


def nonlocal_context(kg: KnowledgeGraph, root: int, cfg: WalkConfig,
                     rng: np.random.Generator) -> list:
    return rank_walk_visits(run_walks(kg, root, cfg, rng), root, cfg.context_size)


# ---------------------------------------------------------------------------
# precomputed walk cache
# ---------------------------------------------------------------------------

_CACHE_MAGIC = b"KGWC"
_CACHE_VERSION = 1


@dataclass
class WalkCache:
    """Frozen per-item walk contexts, ordered most-frequent first."""

    contexts: list
    context_size: int
    seed: int
    gamma: float
    num_walks: int
    walk_length: int

    @property
    def item_count(self) -> int:
        return len(self.contexts)

    def context(self, item: int) -> np.ndarray:
        return self.contexts[item]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_CACHE_MAGIC)
            fh.write(struct.pack("<IIIQdII", _CACHE_VERSION, self.item_count,
                                 self.context_size, self.seed, self.gamma,
                                 self.num_walks, self.walk_length))
            for item, ctx in enumerate(self.contexts):
                fh.write(struct.pack("<II", item, len(ctx)))
                fh.write(np.asarray(ctx, dtype="<u4").tobytes())

    @classmethod
    def load(cls, path) -> "WalkCache":
        try:
            with open(path, "rb") as fh:
                magic = fh.read(4)
                if magic != _CACHE_MAGIC:
                    raise InputError(f"{path}: not a walk cache file")
                header = fh.read(struct.calcsize("<IIIQdII"))
                version, item_count, context_size, seed, gamma, num_walks, \
                    walk_length = struct.unpack("<IIIQdII", header)
                if version != _CACHE_VERSION:
                    raise InputError(f"{path}: unsupported cache version {version}")
                contexts = [None] * item_count
                for _ in range(item_count):
                    item, length = struct.unpack("<II", fh.read(8))
                    ctx = np.frombuffer(fh.read(4 * length), dtype="<u4")
                    if item >= item_count or len(ctx) != length:
                        raise InputError(f"{path}: cache file is corrupt")
                    contexts[item] = ctx.astype(np.int64)
                if any(c is None for c in contexts):
                    raise InputError(f"{path}: cache is missing items")
        except (struct.error, ValueError) as exc:
            raise InputError(f"{path}: cache file is corrupt: {exc}") from None
        return cls(contexts, context_size, seed, gamma, num_walks, walk_length)


def _cache_entry(item: int, kg: KnowledgeGraph, item_entities, cfg: WalkConfig,
                 seed: int) -> np.ndarray:
    # one generator per item (seed xor item) so parallel builds are bit-identical
    rng = np.random.default_rng(seed ^ item)
    ctx = nonlocal_context(kg, int(item_entities[item]), cfg, rng)
    return np.asarray(ctx, dtype=np.int64)


def build_walk_cache(kg: KnowledgeGraph, item_entities, cfg: WalkConfig,
                     seed: int, workers: int = 1) -> WalkCache:
    items = list(range(len(item_entities)))
    worker = partial(_cache_entry, kg=kg, item_entities=item_entities, cfg=cfg, seed=seed)
    if workers > 1:
        ctx = multiprocessing.get_context("fork")
        chunk = max(1, len(items) // (workers * 4))
        with ctx.Pool(workers) as pool:
            contexts = pool.map(worker, items, chunksize=chunk)
    else:
        contexts = [worker(item) for item in items]
    return WalkCache(contexts, cfg.context_size, seed, cfg.gamma,
                     cfg.num_walks, cfg.walk_length)


# ---------------------------------------------------------------------------
# negative and history sampling
# ---------------------------------------------------------------------------


def sample_bpr_tuples(store: InteractionStore, n_neg: int,
                      rng: np.random.Generator) -> list:
    """(user, positive, negative) tuples: ``n_neg`` negatives per train pair.

    Negatives are uniform over items outside the user's train positives and
    distinct within one pair's draw whenever the pool allows it.
    """
    tuples = []
    for u, i_pos in store.pairs("train"):
        positives = store.positives(u, "train")
        pool_size = store.item_count - len(positives)
        if pool_size <= 0:
            warnings.warn(f"user {u} interacts with every item; skipped in sampling")
            continue
        drawn: set = set()
        for _ in range(n_neg):
            while True:
                cand = int(rng.integers(0, store.item_count))
                if cand in positives:
                    continue
                if pool_size > len(drawn) and cand in drawn:
                    continue
                break
            drawn.add(cand)
            tuples.append((u, i_pos, cand))
    return tuples


def sample_kg_negatives(kg: KnowledgeGraph, rng: np.random.Generator) -> list:
    """One corrupted tail per original triple: (head, relation, tail, corrupt).

    The corrupt tail is uniform over entities that are neither the head nor
    any neighbor of the head.
    """
    quads = []
    for t in kg.triples:
        excluded = kg.neighbor_set(t.head)
        excluded_size = len(excluded) + (0 if t.head in excluded else 1)
        if excluded_size >= kg.entity_count:
            warnings.warn(f"entity {t.head} neighbors every entity; triple skipped")
            continue
        corrupt = None
        for _ in range(1000):
            cand = int(rng.integers(0, kg.entity_count))
            if cand != t.head and cand not in excluded:
                corrupt = cand
                break
        if corrupt is None:
            # dense head: fall back to explicit complement enumeration
            complement = [e for e in range(kg.entity_count)
                          if e != t.head and e not in excluded]
            corrupt = int(complement[rng.integers(0, len(complement))])
        quads.append((t.head, t.relation, t.tail, corrupt))
    return quads


def sample_history(store: InteractionStore, user: int, exclude: int | None,
                   size: int, rng: np.random.Generator) -> list:
    """``size`` items from the user's train positives, minus the target item.

    Without replacement when the pool is large enough, with replacement
    otherwise.  An empty pool yields an empty list, which the model treats as
    a zero history context.
    """
    pool = [i for i in store.positive_list(user, "train") if i != exclude]
    if not pool:
        return []
    if len(pool) >= size:
        chosen = rng.choice(len(pool), size=size, replace=False)
    else:
        chosen = rng.integers(0, len(pool), size=size)
    return [pool[j] for j in chosen]
