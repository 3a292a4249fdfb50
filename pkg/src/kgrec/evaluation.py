"""Top-K ranking protocol and metrics.

Evaluation ranks every candidate item for a user (full-ranking policy) with a
vectorized, gradient-free mirror of the scoring function, then averages
precision, recall and hit ratio over users.  Contexts are sampled once per
evaluation from dedicated sub-streams, so reports are deterministic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .graph import InputError, InteractionStore, KnowledgeGraph
from .model import ModelConfig
from .sampling import WalkCache, sample_history, sample_local_neighbors, substream


@dataclass
class EvalConfig:
    k_values: tuple = (10, 20, 50)
    policy: str = "full"              # "full" or "sampled" (smoke checks only)
    n_candidates: int = 100           # negatives per positive in sampled mode
    include_valid_in_candidates: bool = False
    split: str = "test"

    def __post_init__(self):
        if any(k < 1 for k in self.k_values):
            raise InputError(f"K values must be positive: {self.k_values}")
        self.k_values = tuple(sorted(self.k_values))
        if self.policy not in ("full", "sampled"):
            raise InputError(f"unknown candidate policy {self.policy!r}")


@dataclass
class EvalReport:
    split: str
    metrics: dict               # K -> {"precision": .., "recall": .., "hit_ratio": ..}
    users_evaluated: int
    seconds: float = 0.0

    def to_lines(self) -> list:
        lines = []
        for k in sorted(self.metrics):
            for name in ("precision", "recall", "hit_ratio"):
                lines.append(f"{self.split}\t{k}\t{name}\t{self.metrics[k][name]!r}")
        return lines


@dataclass
class ItemContextSet:
    """Evaluation-time sampled inputs, shared by all users."""

    rel: np.ndarray        # (I, S)
    tail: np.ndarray       # (I, S)
    ctx_rev: np.ndarray    # (I, C) walk context, least-frequent first
    ctx_mask: np.ndarray   # (I, C)

    @classmethod
    def build(cls, kg: KnowledgeGraph, item_entities, cache: WalkCache,
              local_size: int, rng: np.random.Generator) -> "ItemContextSet":
        n_items = len(item_entities)
        rel = np.empty((n_items, local_size), dtype=np.int64)
        tail = np.empty((n_items, local_size), dtype=np.int64)
        ctx_rev = np.zeros((n_items, cache.context_size), dtype=np.int64)
        ctx_mask = np.zeros((n_items, cache.context_size))
        for item in range(n_items):
            for j, (r, t) in enumerate(
                    sample_local_neighbors(kg, int(item_entities[item]), local_size, rng)):
                rel[item, j] = r
                tail[item, j] = t
            ctx = cache.context(item)
            if len(ctx):
                ctx_rev[item, :len(ctx)] = np.asarray(ctx)[::-1]
                ctx_mask[item, :len(ctx)] = 1.0
        return cls(rel, tail, ctx_rev, ctx_mask)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class FastScorer:
    """Gradient-free vectorized scorer over all items for one user at a time.

    Mirrors the differentiable model exactly (asserted by tests); reads the
    registry's current values on every call so it tracks training updates.
    """

    def __init__(self, params, cfg: ModelConfig, item_entities,
                 contexts: ItemContextSet):
        self.params = params
        self.cfg = cfg
        self.item_entities = np.asarray(item_entities, dtype=np.int64)
        self.ctx = contexts

    def _p(self, name: str) -> np.ndarray:
        return self.params[name].data

    def all_item_q(self, user: int) -> np.ndarray:
        """Contextualized representation of every item for this user: (I, 2d)."""
        cfg = self.cfg
        d = cfg.dim
        n_items = len(self.item_entities)
        s = self.ctx.rel.shape[1]
        ent = self._p("entity_emb")
        e_h = ent[self.item_entities]

        local = nonlocal_ = None
        if not cfg.disable_local:
            e_r = self._p("relation_emb")[self.ctx.rel.ravel()]
            e_t = ent[self.ctx.tail.ravel()]
            e_rt = np.concatenate([e_r, e_t], axis=1) @ self._p("rel_fuse_W")
            if cfg.disable_user_attention:
                m = np.ones((1, d))
            else:
                e_u = self._p("user_emb")[user:user + 1]
                m = np.maximum(e_u @ self._p("user_proj_W") + self._p("user_proj_b"), 0.0)
            feat = np.tanh(np.concatenate([np.repeat(e_h, s, axis=0), e_rt], axis=1)
                           @ self._p("attn_W") + self._p("attn_b"))
            scores = (feat * m).sum(axis=1).reshape(n_items, s)
            alpha = _softmax_rows(scores)
            weighted = alpha.reshape(-1, 1) * e_t
            e_local = weighted.reshape(n_items, s, d).sum(axis=1)
            local = np.tanh(np.concatenate([e_h, e_local], axis=1)
                            @ self._p("agg_W") + self._p("agg_b"))
        if not cfg.disable_nonlocal:
            h = np.zeros((n_items, d))
            for step in range(self.ctx.ctx_rev.shape[1]):
                x = ent[self.ctx.ctx_rev[:, step]]
                z = _sigmoid(x @ self._p("gru_wz") + h @ self._p("gru_uz")
                             + self._p("gru_bz"))
                r = _sigmoid(x @ self._p("gru_wr") + h @ self._p("gru_ur")
                             + self._p("gru_br"))
                c = np.tanh(x @ self._p("gru_wc") + (r * h) @ self._p("gru_uc")
                            + self._p("gru_bc"))
                h_next = z * c + (1.0 - z) * h
                mask = self.ctx.ctx_mask[:, step:step + 1]
                h = mask * h_next + (1.0 - mask) * h
            nonlocal_ = np.tanh(np.concatenate([e_h, h], axis=1)
                                @ self._p("agg_W") + self._p("agg_b"))

        if cfg.disable_local:
            fused = nonlocal_
        elif cfg.disable_nonlocal:
            fused = local
        else:
            gate = _sigmoid(self._p("gate_w"))
            fused = gate * local + (1.0 - gate) * nonlocal_
        return np.concatenate([e_h, fused], axis=1)

    def user_scores(self, user: int, history_items) -> np.ndarray:
        """Preference score of this user for every item: shape (I,)."""
        d2 = 2 * self.cfg.dim
        q = self.all_item_q(user)
        e_u = self._p("user_emb")[user:user + 1]
        if len(history_items):
            q_hist = q[np.asarray(history_items, dtype=np.int64)]
            w = self._p("hist_attn_w")
            a = q @ w[0, :d2]
            bp = q_hist @ w[0, d2:]
            logits = np.tanh(a[:, None] + bp[None, :] + self._p("hist_attn_b")[0, 0])
            beta = _softmax_rows(logits)
            e_hist = beta @ q_hist
        else:
            e_hist = np.zeros((len(q), d2))
        c_u = np.maximum(np.concatenate([np.repeat(e_u, len(q), axis=0), e_hist], axis=1)
                         @ self._p("user_agg_W") + self._p("user_agg_b"), 0.0)
        p_u = np.concatenate([np.repeat(e_u, len(q), axis=0), c_u], axis=1)
        return (p_u * q).sum(axis=1)


def rank_items(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidates ordered by descending score, ties broken by ascending index."""
    candidates = np.sort(np.asarray(candidates))
    order = np.argsort(-scores[candidates], kind="stable")
    return candidates[order]


def metrics_for_user(ranked, test_positives, k: int) -> tuple:
    """(precision, recall, hit) of one ranked list against the test positives."""
    top = set(int(i) for i in ranked[:k])
    hits = len(top & set(test_positives))
    precision = hits / k
    recall = hits / len(test_positives)
    hit = 1.0 if hits else 0.0
    return precision, recall, hit


def _candidates_for(store: InteractionStore, user: int, split: str,
                    cfg: EvalConfig) -> np.ndarray:
    excluded = set(store.positives(user, "train")) if split != "train" else set()
    if split == "test" and not cfg.include_valid_in_candidates:
        excluded |= store.positives(user, "valid")
    return np.array([i for i in range(store.item_count) if i not in excluded],
                    dtype=np.int64)


def evaluate(params, model_cfg: ModelConfig, store: InteractionStore,
             kg: KnowledgeGraph, item_entities, cache: WalkCache,
             cfg: EvalConfig | None = None, split: str | None = None,
             seed: int = 0) -> EvalReport:
    """Unweighted per-user average of P@K / R@K / HR@K on one split.

    Users without positives in the target split are skipped.
    """
    cfg = cfg or EvalConfig()
    split = split or cfg.split
    started = time.perf_counter()
    contexts = ItemContextSet.build(kg, item_entities, cache, model_cfg.local_size,
                                    substream(seed, "eval-items"))
    scorer = FastScorer(params, model_cfg, item_entities, contexts)
    rng_hist = substream(seed, "eval-history")
    rng_sampled = substream(seed, "eval-candidates")

    totals = {k: np.zeros(3) for k in cfg.k_values}
    evaluated = 0
    for user in range(store.user_count):
        positives = store.positive_list(user, split)
        if not positives:
            continue
        history = sample_history(store, user, None, model_cfg.history_size, rng_hist)
        scores = scorer.user_scores(user, history)
        if cfg.policy == "full":
            ranked = rank_items(scores, _candidates_for(store, user, split, cfg))
            per_user = {k: metrics_for_user(ranked, positives, k)
                        for k in cfg.k_values}
        else:
            per_user = _sampled_candidate_metrics(scores, store, user, positives,
                                                  cfg, rng_sampled)
        for k in cfg.k_values:
            totals[k] += np.array(per_user[k])
        evaluated += 1

    metrics = {}
    for k in cfg.k_values:
        avg = totals[k] / evaluated if evaluated else np.zeros(3)
        metrics[k] = {"precision": float(avg[0]), "recall": float(avg[1]),
                      "hit_ratio": float(avg[2])}
    return EvalReport(split=split, metrics=metrics, users_evaluated=evaluated,
                      seconds=time.perf_counter() - started)


def _sampled_candidate_metrics(scores, store, user, positives, cfg, rng):
    """Fast smoke protocol: rank each positive among sampled negatives only."""
    all_pos = set()
    for s in ("train", "valid", "test"):
        all_pos |= store.positives(user, s)
    pool = np.array([i for i in range(store.item_count) if i not in all_pos],
                    dtype=np.int64)
    sums = {k: np.zeros(3) for k in cfg.k_values}
    for pos in positives:
        if len(pool) > cfg.n_candidates:
            negs = pool[rng.choice(len(pool), size=cfg.n_candidates, replace=False)]
        else:
            negs = pool
        cands = np.concatenate([[pos], negs])
        ranked = rank_items(scores, np.sort(cands))
        for k in cfg.k_values:
            sums[k] += np.array(metrics_for_user(ranked, [pos], k))
    return {k: tuple(sums[k] / len(positives)) for k in cfg.k_values}
