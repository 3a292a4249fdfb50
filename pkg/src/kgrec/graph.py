"""Data model: knowledge graph, user-item interactions, dense indexing, splits.

Input files are line-oriented UTF-8 text with tab-separated fields; lines
starting with ``#`` are ignored.  All raw identifiers are opaque strings and
are re-indexed densely in first-appearance order, which makes ingestion
bit-reproducible.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np


class InputError(ValueError):
    """Malformed input file or empty/inconsistent result."""


_NAMESPACES = ("user", "item", "entity", "relation")

SPLITS = ("train", "valid", "test")


class IdMaps:
    """Bidirectional raw-string <-> dense-index maps, one namespace each."""

    def __init__(self):
        self._to_dense = {ns: {} for ns in _NAMESPACES}
        self._to_raw = {ns: [] for ns in _NAMESPACES}

    def intern(self, namespace: str, raw: str) -> int:
        table = self._to_dense[namespace]
        idx = table.get(raw)
        if idx is None:
            idx = len(table)
            table[raw] = idx
            self._to_raw[namespace].append(raw)
        return idx

    def dense(self, namespace: str, raw: str) -> int:
        return self._to_dense[namespace][raw]

    def has(self, namespace: str, raw: str) -> bool:
        return raw in self._to_dense[namespace]

    def raw(self, namespace: str, idx: int) -> str:
        return self._to_raw[namespace][idx]

    def count(self, namespace: str) -> int:
        return len(self._to_raw[namespace])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ns in _NAMESPACES:
                for idx, raw in enumerate(self._to_raw[ns]):
                    fh.write(f"{ns}\t{raw}\t{idx}\n")

    @classmethod
    def load(cls, path) -> "IdMaps":
        maps = cls()
        for lineno, fields in _read_tsv(path, 3):
            ns, raw, idx = fields
            if ns not in _NAMESPACES:
                raise InputError(f"{path}:{lineno}: unknown namespace {ns!r}")
            got = maps.intern(ns, raw)
            if got != int(idx):
                raise InputError(f"{path}:{lineno}: non-contiguous index for {raw!r}")
        return maps


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


class KnowledgeGraph:
    """Densely indexed triples with symmetric adjacency.

    Every original relation r gets a synthesized inverse relation R + r with
    its own embedding row, so edges can be walked in both directions.  One
    extra reserved index (``self_relation``) marks the self-loop fallback used
    when an entity has no neighbors at all.
    """

    def __init__(self, entity_count: int, original_relation_count: int, triples):
        self.entity_count = int(entity_count)
        self.original_relation_count = int(original_relation_count)
        self.relation_count = 2 * self.original_relation_count
        seen = set()
        kept = []
        for t in triples:
            if not (0 <= t.head < entity_count and 0 <= t.tail < entity_count
                    and 0 <= t.relation < original_relation_count):
                raise InputError(f"triple {t} out of range")
            key = (t.head, t.relation, t.tail)
            if key not in seen:
                seen.add(key)
                kept.append(t)
        self.triples = kept

        adjacency = [set() for _ in range(self.entity_count)]
        for t in self.triples:
            adjacency[t.head].add((t.relation, t.tail))
            adjacency[t.tail].add((self.inverse(t.relation), t.head))
        self.adjacency = [sorted(pairs) for pairs in adjacency]
        self.neighbor_entities = [
            np.unique(np.fromiter((t for _, t in pairs), dtype=np.int64, count=len(pairs)))
            for pairs in self.adjacency
        ]
        self._neighbor_sets = [set(arr.tolist()) for arr in self.neighbor_entities]

    def inverse(self, relation: int) -> int:
        if not 0 <= relation < self.original_relation_count:
            raise InputError(f"inverse() of non-original relation {relation}")
        return relation + self.original_relation_count

    @property
    def self_relation(self) -> int:
        return self.relation_count

    @property
    def relation_embedding_count(self) -> int:
        return self.relation_count + 1

    def local_context(self, entity: int) -> list:
        """All (relation, tail) neighbors of ``entity``, both edge directions."""
        return list(self.adjacency[entity])

    def neighbors_of(self, entity: int) -> np.ndarray:
        return self.neighbor_entities[entity]

    def is_neighbor(self, entity: int, other: int) -> bool:
        return other in self._neighbor_sets[entity]

    def neighbor_set(self, entity: int) -> set:
        return self._neighbor_sets[entity]


class InteractionStore:
    """Per-user positive item sets partitioned into train/valid/test."""

    def __init__(self, user_count: int, item_count: int, split_pairs: dict):
        self.user_count = int(user_count)
        self.item_count = int(item_count)
        self._pairs = {s: list(split_pairs.get(s, [])) for s in SPLITS}
        self._user_pos = {s: [set() for _ in range(self.user_count)] for s in SPLITS}
        seen = set()
        for split in SPLITS:
            for u, i in self._pairs[split]:
                if not (0 <= u < self.user_count and 0 <= i < self.item_count):
                    raise InputError(f"interaction ({u}, {i}) out of range")
                if (u, i) in seen:
                    raise InputError(f"interaction ({u}, {i}) appears in two splits")
                seen.add((u, i))
                self._user_pos[split][u].add(i)

    @classmethod
    def unsplit(cls, pairs, user_count: int, item_count: int) -> "InteractionStore":
        """All interactions in one bucket, before ``split_interactions``."""
        return cls(user_count, item_count, {"train": list(pairs)})

    def pairs(self, split: str) -> list:
        return list(self._pairs[split])

    def all_pairs(self) -> list:
        out = []
        for split in SPLITS:
            out.extend(self._pairs[split])
        return out

    def positives(self, user: int, split: str) -> set:
        return self._user_pos[split][user]

    def positive_list(self, user: int, split: str) -> list:
        return sorted(self._user_pos[split][user])

    def interaction_count(self) -> int:
        return sum(len(p) for p in self._pairs.values())


def _read_tsv(path, n_fields: int):
    """Yield (lineno, fields) for non-blank, non-comment lines."""
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != n_fields:
                raise InputError(
                    f"{path}:{lineno}: expected {n_fields} tab-separated fields, "
                    f"got {len(fields)}")
            yield lineno, fields


def load_interactions(path, threshold: float | None = None):
    """Parse ``user<TAB>item<TAB>rating`` rows into an unsplit store.

    With a threshold, only rows with rating strictly greater are kept.
    Users and items are indexed in first appearance order among kept rows;
    duplicate (user, item) pairs collapse to one interaction.
    """
    maps = IdMaps()
    pairs = []
    seen = set()
    for lineno, (raw_user, raw_item, raw_rating) in _read_tsv(path, 3):
        try:
            rating = float(raw_rating)
        except ValueError:
            raise InputError(f"{path}:{lineno}: non-numeric rating {raw_rating!r}") from None
        if threshold is not None and not rating > threshold:
            continue
        u = maps.intern("user", raw_user)
        i = maps.intern("item", raw_item)
        if (u, i) not in seen:
            seen.add((u, i))
            pairs.append((u, i))
    if not pairs:
        raise InputError(f"{path}: no interactions retained")
    store = InteractionStore.unsplit(pairs, maps.count("user"), maps.count("item"))
    return store, maps


def load_kg(kg_path, item_map_path, id_maps: IdMaps):
    """Parse triples and the item->entity map; returns (graph, item_entities).

    Every item present in ``id_maps`` must resolve to exactly one entity that
    occurs in the triple file, and no two items may share an entity.
    """
    triples = []
    for _, (raw_h, raw_r, raw_t) in _read_tsv(kg_path, 3):
        h = id_maps.intern("entity", raw_h)
        r = id_maps.intern("relation", raw_r)
        t = id_maps.intern("entity", raw_t)
        triples.append(Triple(h, r, t))
    if not triples:
        raise InputError(f"{kg_path}: no triples loaded")
    kg = KnowledgeGraph(id_maps.count("entity"), id_maps.count("relation"), triples)

    n_items = id_maps.count("item")
    item_entities = np.full(n_items, -1, dtype=np.int64)
    duplicates = []
    unknown = []
    for lineno, (raw_item, raw_entity) in _read_tsv(item_map_path, 2):
        if not id_maps.has("item", raw_item):
            continue  # catalog rows for items absent from the interaction data
        item = id_maps.dense("item", raw_item)
        if not id_maps.has("entity", raw_entity):
            unknown.append(f"line {lineno}: {raw_item!r} -> unknown entity {raw_entity!r}")
            continue
        if item_entities[item] != -1:
            duplicates.append(f"line {lineno}: {raw_item!r} mapped more than once")
            continue
        item_entities[item] = id_maps.dense("entity", raw_entity)
    if unknown:
        raise InputError(f"{item_map_path}: " + "; ".join(unknown))
    if duplicates:
        raise InputError(f"{item_map_path}: " + "; ".join(duplicates))
    missing = [id_maps.raw("item", i) for i in range(n_items) if item_entities[i] == -1]
    if missing:
        raise InputError(f"{item_map_path}: items without an entity: {missing[:10]}")
    mapped = item_entities.tolist()
    if len(set(mapped)) != len(mapped):
        shared = sorted({e for e in mapped if mapped.count(e) > 1})
        raise InputError(f"{item_map_path}: entities shared by several items: {shared[:10]}")
    return kg, item_entities


def split_counts(n: int, ratios) -> tuple[int, int, int]:
    """Sizes of the three contiguous cuts: floor, floor, remainder."""
    # the 1e-9 nudge keeps exact products like 10 * 0.6 from flooring low
    a = int(math.floor(n * ratios[0] + 1e-9))
    ab = int(math.floor(n * (ratios[0] + ratios[1]) + 1e-9))
    return a, ab - a, n - ab


def split_interactions(store: InteractionStore, ratios=(0.6, 0.2, 0.2),
                       seed: int = 0) -> InteractionStore:
    """Globally shuffle all interactions under ``seed`` and cut into three splits."""
    if not math.isclose(sum(ratios), 1.0, rel_tol=0, abs_tol=1e-9):
        raise InputError(f"split ratios {ratios} do not sum to 1")
    pairs = store.all_pairs()
    perm = np.random.default_rng(seed).permutation(len(pairs))
    shuffled = [pairs[j] for j in perm]
    n_train, n_valid, _ = split_counts(len(pairs), ratios)
    return InteractionStore(store.user_count, store.item_count, {
        "train": shuffled[:n_train],
        "valid": shuffled[n_train:n_train + n_valid],
        "test": shuffled[n_train + n_valid:],
    })


# ---------------------------------------------------------------------------
# preprocessed dataset directory
# ---------------------------------------------------------------------------


def save_dataset(dirpath, store: InteractionStore, kg: KnowledgeGraph,
                 item_entities: np.ndarray, id_maps: IdMaps) -> None:
    os.makedirs(dirpath, exist_ok=True)
    id_maps.save(os.path.join(dirpath, "id_maps.tsv"))
    with open(os.path.join(dirpath, "meta.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"users\t{store.user_count}\n")
        fh.write(f"items\t{store.item_count}\n")
        fh.write(f"entities\t{kg.entity_count}\n")
        fh.write(f"relations\t{kg.original_relation_count}\n")
    for split in SPLITS:
        with open(os.path.join(dirpath, f"{split}.tsv"), "w", encoding="utf-8") as fh:
            for u, i in store.pairs(split):
                fh.write(f"{u}\t{i}\n")
    with open(os.path.join(dirpath, "kg.tsv"), "w", encoding="utf-8") as fh:
        for t in kg.triples:
            fh.write(f"{t.head}\t{t.relation}\t{t.tail}\n")
    with open(os.path.join(dirpath, "item_entities.tsv"), "w", encoding="utf-8") as fh:
        for item, entity in enumerate(item_entities):
            fh.write(f"{item}\t{entity}\n")


def load_dataset(dirpath):
    """Load a directory written by ``save_dataset``."""
    meta = {}
    for _, (key, value) in _read_tsv(os.path.join(dirpath, "meta.tsv"), 2):
        meta[key] = int(value)
    split_pairs = {}
    for split in SPLITS:
        pairs = []
        for _, (u, i) in _read_tsv(os.path.join(dirpath, f"{split}.tsv"), 2):
            pairs.append((int(u), int(i)))
        split_pairs[split] = pairs
    store = InteractionStore(meta["users"], meta["items"], split_pairs)
    triples = [Triple(int(h), int(r), int(t))
               for _, (h, r, t) in _read_tsv(os.path.join(dirpath, "kg.tsv"), 3)]
    kg = KnowledgeGraph(meta["entities"], meta["relations"], triples)
    item_entities = np.full(meta["items"], -1, dtype=np.int64)
    for _, (item, entity) in _read_tsv(os.path.join(dirpath, "item_entities.tsv"), 2):
        item_entities[int(item)] = int(entity)
    if (item_entities < 0).any():
        raise InputError(f"{dirpath}: item_entities.tsv is incomplete")
    id_maps = IdMaps.load(os.path.join(dirpath, "id_maps.tsv"))
    return store, kg, item_entities, id_maps


def dataset_stats(store: InteractionStore, kg: KnowledgeGraph) -> dict:
    density = store.interaction_count() / (store.user_count * store.item_count)
    return {
        "users": store.user_count,
        "items": store.item_count,
        "interactions": store.interaction_count(),
        "density": density,
        "entities": kg.entity_count,
        "relations": kg.original_relation_count,
        "triples": len(kg.triples),
    }
