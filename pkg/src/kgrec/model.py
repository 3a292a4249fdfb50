"""The preference scoring function.

An item is represented by its knowledge-graph entity together with two fused
context embeddings: a user-conditioned attention over sampled one-hop
neighbors (local), and a recurrent aggregation of its frequency-ranked walk
context (non-local), blended by a learned elementwise gate.  A user is
represented by their embedding plus an attention over the contextualized
items of their interaction history, keyed on the target item.  The score is
the dot product of the two contextualized representations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GruParams, ParamRegistry, Tensor
from .graph import InputError


@dataclass
class ModelConfig:
    dim: int = 32            # embedding width d
    local_size: int = 4      # sampled one-hop neighbors per entity (S)
    history_size: int = 16   # sampled history items per user (N)
    disable_local: bool = False
    disable_nonlocal: bool = False
    disable_user_attention: bool = False

    def __post_init__(self):
        if self.dim < 1 or self.local_size < 1 or self.history_size < 1:
            raise InputError("dim, local_size and history_size must be >= 1")
        if self.disable_local and self.disable_nonlocal:
            raise InputError("cannot disable both the local and non-local context")


_GRU_NAMES = ("gru_wz", "gru_uz", "gru_bz", "gru_wr", "gru_ur", "gru_br",
              "gru_wc", "gru_uc", "gru_bc")


def _xavier(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_params(cfg: ModelConfig, n_users: int, n_entities: int,
                n_relation_rows: int, rng: np.random.Generator) -> ParamRegistry:
    """Fresh registry: embeddings uniform(-0.05, 0.05), weight matrices
    Xavier-uniform, every bias and the gate vector at zero (so the initial
    gate blends both contexts evenly)."""
    d = cfg.dim
    reg = ParamRegistry()
    reg.register("user_emb", rng.uniform(-0.05, 0.05, size=(n_users, d)))
    reg.register("entity_emb", rng.uniform(-0.05, 0.05, size=(n_entities, d)))
    reg.register("relation_emb", rng.uniform(-0.05, 0.05, size=(n_relation_rows, d)))
    reg.register("rel_fuse_W", _xavier(rng, 2 * d, d))
    reg.register("attn_W", _xavier(rng, 2 * d, d))
    reg.register("attn_b", np.zeros((1, d)))
    reg.register("user_proj_W", _xavier(rng, d, d))
    reg.register("user_proj_b", np.zeros((1, d)))
    reg.register("agg_W", _xavier(rng, 2 * d, d))
    reg.register("agg_b", np.zeros((1, d)))
    for name in _GRU_NAMES:
        if name.endswith(("bz", "br", "bc")):
            reg.register(name, np.zeros((1, d)))
        else:
            reg.register(name, _xavier(rng, d, d))
    reg.register("gate_w", np.zeros((1, d)))
    reg.register("hist_attn_w", _xavier(rng, 1, 4 * d))
    reg.register("hist_attn_b", np.zeros((1, 1)))
    reg.register("user_agg_W", _xavier(rng, 3 * d, d))
    reg.register("user_agg_b", np.zeros((1, d)))
    return reg


@dataclass(frozen=True)
class ItemContext:
    """Fixed sampled inputs for one item's representation."""

    neighbors: tuple        # ((relation, tail), ...) from sample_local_neighbors
    walk_context: tuple     # entity ids, most-frequent first


@dataclass(frozen=True)
class ScoreContext:
    """Everything stochastic a single score depends on, frozen."""

    target: ItemContext
    history: tuple          # ((item, ItemContext), ...); empty means no history


@dataclass
class PairBatch:
    """Index arrays for one training batch laid out target-major.

    Rows 0..B-1 are the first targets of each tuple, rows B..2B-1 the second
    targets, and so on for ``n_targets`` blocks; the trailing B*N rows are the
    history items in tuple-major order.
    """

    user_rows: np.ndarray       # (R,) user of every row
    entity_rows: np.ndarray     # (R,) entity of every row's item
    rel_rows: np.ndarray        # (R, S) sampled neighbor relations
    tail_rows: np.ndarray       # (R, S) sampled neighbor tails
    ctx_rev: np.ndarray         # (R, C) walk context, least-frequent first, 0-padded
    ctx_mask: np.ndarray        # (R, C) 1.0 where ctx_rev is real
    tuple_users: np.ndarray     # (B,) user of each tuple
    history_mask: np.ndarray    # (B, 1) 0.0 for tuples with an empty history
    size: int                   # B
    n_targets: int              # target blocks per tuple
    history_size: int           # N


class GraphContextModel:
    """Differentiable scorer over a parameter registry.

    All methods build autodiff graphs; none of them draws randomness, so a
    score is a pure function of (parameters, sampled contexts).
    """

    def __init__(self, cfg: ModelConfig, params: ParamRegistry, item_entities):
        self.cfg = cfg
        self.params = params
        self.item_entities = np.asarray(item_entities, dtype=np.int64)
        self.gru = GruParams(*(params[name] for name in _GRU_NAMES))

    # -- helpers -----------------------------------------------------------

    def _resolve_force(self, force: str | None) -> str | None:
        if force is not None:
            return force
        if self.cfg.disable_local:
            return "nonlocal"
        if self.cfg.disable_nonlocal:
            return "local"
        return None

    def _user_preference_rows(self, user_rows) -> Tensor:
        """m_u per row; the all-ones vector when user attention is disabled."""
        if self.cfg.disable_user_attention:
            return ad.constant(np.ones((len(user_rows), self.cfg.dim)))
        e_u = ad.gather_rows(self.params["user_emb"], user_rows)
        return ad.relu(ad.affine(e_u, self.params["user_proj_W"],
                                 self.params["user_proj_b"]))

    def _fuse_relation_tails(self, rel_flat, tail_flat) -> tuple[Tensor, Tensor]:
        e_r = ad.gather_rows(self.params["relation_emb"], rel_flat)
        e_t = ad.gather_rows(self.params["entity_emb"], tail_flat)
        e_rt = ad.matmul(ad.hstack(e_r, e_t), self.params["rel_fuse_W"])
        return e_rt, e_t

    def _attention_rows(self, user_rows, e_h: Tensor, rel_flat, tail_flat,
                        s: int) -> tuple[Tensor, Tensor]:
        """Per-row neighbor attention: returns (alpha (R, S), e_t (R*S, d))."""
        e_rt, e_t = self._fuse_relation_tails(rel_flat, tail_flat)
        m = self._user_preference_rows(user_rows)
        feat = ad.tanh(ad.affine(ad.hstack(ad.repeat_rows(e_h, s), e_rt),
                                 self.params["attn_W"], self.params["attn_b"]))
        scores = ad.row_sums(ad.mul(feat, ad.repeat_rows(m, s)))
        alpha = ad.softmax_rows(ad.reshape(scores, e_h.shape[0], s))
        return alpha, e_t

    def _aggregate(self, e_h: Tensor, context: Tensor) -> Tensor:
        return ad.tanh(ad.affine(ad.hstack(e_h, context),
                                 self.params["agg_W"], self.params["agg_b"]))

    def _local_rows(self, user_rows, e_h: Tensor, rel_rows, tail_rows) -> Tensor:
        s = rel_rows.shape[1]
        alpha, e_t = self._attention_rows(user_rows, e_h, rel_rows.ravel(),
                                          tail_rows.ravel(), s)
        weighted = ad.mul(ad.reshape(alpha, alpha.data.size, 1), e_t)
        e_local = ad.sum_row_groups(weighted, s)
        return self._aggregate(e_h, e_local)

    def _nonlocal_rows(self, e_h: Tensor, ctx_rev, ctx_mask) -> Tensor:
        rows = e_h.shape[0]
        h = ad.constant(np.zeros((rows, self.cfg.dim)))
        for step in range(ctx_rev.shape[1]):
            x = ad.gather_rows(self.params["entity_emb"], ctx_rev[:, step])
            h_next = ad.gru_cell(x, h, self.gru)
            # rows past their context length keep the previous state
            h = ad.elementwise_gate(ad.constant(ctx_mask[:, step:step + 1]), h_next, h)
        return self._aggregate(e_h, h)

    def _context_rows(self, user_rows, entity_rows, rel_rows, tail_rows,
                      ctx_rev, ctx_mask, force: str | None = None) -> Tensor:
        """Contextualized q rows: (R, 2d) = entity embedding || fused context."""
        e_h = ad.gather_rows(self.params["entity_emb"], entity_rows)
        mode = self._resolve_force(force)
        if mode == "nonlocal":
            fused = self._nonlocal_rows(e_h, ctx_rev, ctx_mask)
        elif mode == "local":
            fused = self._local_rows(user_rows, e_h, rel_rows, tail_rows)
        else:
            c_local = self._local_rows(user_rows, e_h, rel_rows, tail_rows)
            c_nonlocal = self._nonlocal_rows(e_h, ctx_rev, ctx_mask)
            gate = ad.sigmoid(self.params["gate_w"])
            fused = ad.elementwise_gate(gate, c_local, c_nonlocal)
        return ad.hstack(e_h, fused)

    @staticmethod
    def _context_arrays(contexts, width: int | None = None):
        """Pad walk contexts, reversed (least-frequent first), plus a mask."""
        rows = len(contexts)
        if width is None:
            width = max((len(c) for c in contexts), default=0)
        ctx_rev = np.zeros((rows, width), dtype=np.int64)
        mask = np.zeros((rows, width))
        for r, ctx in enumerate(contexts):
            k = min(len(ctx), width)
            if k:
                ctx_rev[r, :k] = np.asarray(ctx[:k])[::-1]
                mask[r, :k] = 1.0
        return ctx_rev, mask

    # -- single-instance operations ----------------------------------------

    def relation_fuse(self, relations, tails) -> Tensor:
        """Linear fusion of relation and tail embeddings, one row per pair."""
        e_rt, _ = self._fuse_relation_tails(np.asarray(relations, dtype=np.int64),
                                            np.asarray(tails, dtype=np.int64))
        return e_rt

    def user_attention(self, user: int, entity: int, neighbors) -> Tensor:
        """Attention probabilities (1, S) over sampled neighbors for one user."""
        if not neighbors:
            raise InputError("user_attention needs at least one sampled neighbor")
        rels = np.array([r for r, _ in neighbors], dtype=np.int64)
        tails = np.array([t for _, t in neighbors], dtype=np.int64)
        e_h = ad.gather_rows(self.params["entity_emb"], [entity])
        alpha, _ = self._attention_rows(np.array([user]), e_h, rels, tails,
                                        len(neighbors))
        return alpha

    def local_embedding(self, user: int, entity: int, neighbors) -> Tensor:
        rels = np.array([[r for r, _ in neighbors]], dtype=np.int64)
        tails = np.array([[t for _, t in neighbors]], dtype=np.int64)
        e_h = ad.gather_rows(self.params["entity_emb"], [entity])
        return self._local_rows(np.array([user]), e_h, rels, tails)

    def nonlocal_embedding(self, entity: int, walk_context) -> Tensor:
        e_h = ad.gather_rows(self.params["entity_emb"], [entity])
        ctx_rev, mask = self._context_arrays([tuple(walk_context)])
        return self._nonlocal_rows(e_h, ctx_rev, mask)

    def kg_context(self, user: int, entity: int, neighbors, walk_context,
                   force: str | None = None) -> Tensor:
        """Gated fusion of the local and non-local context embeddings (1, d)."""
        rels = np.array([[r for r, _ in neighbors]], dtype=np.int64)
        tails = np.array([[t for _, t in neighbors]], dtype=np.int64)
        ctx_rev, mask = self._context_arrays([tuple(walk_context)])
        q = self._context_rows(np.array([user]), np.array([entity]), rels, tails,
                               ctx_rev, mask, force=force)
        return ad.slice_cols(q, self.cfg.dim, 2 * self.cfg.dim)

    def contextualized_item(self, user: int, item: int, context: ItemContext,
                            force: str | None = None) -> Tensor:
        """q_i = item entity embedding || fused context embedding, shape (1, 2d)."""
        rels = np.array([[r for r, _ in context.neighbors]], dtype=np.int64)
        tails = np.array([[t for _, t in context.neighbors]], dtype=np.int64)
        ctx_rev, mask = self._context_arrays([context.walk_context])
        entity = self.item_entities[item]
        return self._context_rows(np.array([user]), np.array([entity]), rels,
                                  tails, ctx_rev, mask, force=force)

    def history_attention(self, q_target: Tensor, history_qs) -> Tensor:
        """Relevance probabilities (1, N) of history items for one target."""
        w = self.params["hist_attn_w"]
        b = self.params["hist_attn_b"]
        logits = [ad.tanh(ad.add(ad.matmul(ad.hstack(q_target, q_j),
                                           ad.transpose(w)), b))
                  for q_j in history_qs]
        return ad.softmax_rows(ad.hstack(logits))

    def interaction_context(self, user: int, q_target: Tensor,
                            history_qs) -> Tensor:
        """p_u = user embedding || aggregated history context, shape (1, 2d)."""
        e_u = ad.gather_rows(self.params["user_emb"], [user])
        if history_qs:
            beta = self.history_attention(q_target, history_qs)
            stacked = ad.hstack(history_qs)          # (1, N*2d)
            weighted = ad.mul(ad.reshape(beta, len(history_qs), 1),
                              ad.reshape(stacked, len(history_qs), 2 * self.cfg.dim))
            e_hist = ad.sum_row_groups(weighted, len(history_qs))
        else:
            e_hist = ad.constant(np.zeros((1, 2 * self.cfg.dim)))
        c_u = ad.relu(ad.affine(ad.hstack(e_u, e_hist), self.params["user_agg_W"],
                                self.params["user_agg_b"]))
        return ad.hstack(e_u, c_u)

    def score(self, user: int, item: int, ctx: ScoreContext,
              force: str | None = None) -> Tensor:
        """Preference score, shape (1, 1)."""
        q_i = self.contextualized_item(user, item, ctx.target, force=force)
        history_qs = [self.contextualized_item(user, j, jctx, force=force)
                      for j, jctx in ctx.history]
        p_u = self.interaction_context(user, q_i, history_qs)
        return ad.dot(p_u, q_i)

    # -- batched scoring for training ----------------------------------------

    def scores_batch(self, batch: PairBatch, force: str | None = None) -> list:
        """Scores for every target block; returns ``n_targets`` (B, 1) tensors."""
        b, n, k = batch.size, batch.history_size, batch.n_targets
        d2 = 2 * self.cfg.dim
        q = self._context_rows(batch.user_rows, batch.entity_rows, batch.rel_rows,
                               batch.tail_rows, batch.ctx_rev, batch.ctx_mask,
                               force=force)
        w = self.params["hist_attn_w"]
        target_part = ad.matmul(q, ad.transpose(ad.slice_cols(w, 0, d2)))
        history_part = ad.matmul(q, ad.transpose(ad.slice_cols(w, d2, 2 * d2)))
        hist_lo = k * b
        hist_idx = np.arange(hist_lo, hist_lo + b * n)
        hist_scores = ad.reshape(ad.gather_rows(history_part, hist_idx), b, n)
        q_hist = ad.gather_rows(q, hist_idx)
        e_u = ad.gather_rows(self.params["user_emb"], batch.tuple_users)
        mask = ad.constant(batch.history_mask)
        outputs = []
        for block in range(k):
            rows = np.arange(block * b, (block + 1) * b)
            a_t = ad.gather_rows(target_part, rows)
            logits = ad.tanh(ad.add(ad.add(a_t, hist_scores),
                                    self.params["hist_attn_b"]))
            beta = ad.softmax_rows(logits)
            weighted = ad.mul(ad.reshape(beta, b * n, 1), q_hist)
            e_hist = ad.mul(ad.sum_row_groups(weighted, n), mask)
            c_u = ad.relu(ad.affine(ad.hstack(e_u, e_hist),
                                    self.params["user_agg_W"],
                                    self.params["user_agg_b"]))
            p_u = ad.hstack(e_u, c_u)
            q_t = ad.gather_rows(q, rows)
            outputs.append(ad.row_sums(ad.mul(p_u, q_t)))
        return outputs
