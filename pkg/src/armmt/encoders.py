"""Per-candidate representations: ID personalization and modal encoders.

Builds, for each candidate in a session:

* ``p_id``   — target attention over the full behavior history, queried by the
  candidate's concatenated item/shop/brand embeddings,
* ``i_img``  — the item's frozen image embedding,
* ``i_text`` — mean of title-token embeddings, linearly projected,
* ``p_img`` / ``p_text`` — target attention over the category-filtered
  history, queried by the candidate's own modal representation.

Attention weights come from a small scoring MLP over
[query; key; query-key; query*key; side features], softmax-normalized over
events; side features encode action type, frequency, recency decay, and the
user's age/gender embeddings.  An empty (filtered) history yields zeros.

The index arrays and constant feature blocks for a session never change, so
they are computed once (``featurize``) and cached on the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import SessionExample, filter_history
from .params import ParamStore
from .tensor import Parameter, ShapeError, Tensor

SIDE_BASE_DIM = 4  # click/order one-hot, log1p(frequency), recency decay
RECENCY_HALF_LIFE_DAYS = 30.0


class EmbeddingTable:
    """Lookup table of row vectors; frozen tables take no gradient."""

    def __init__(
        self,
        name: str,
        rows: int,
        dim: int,
        store: ParamStore | None = None,
        frozen_values: np.ndarray | None = None,
    ):
        self.name = name
        self.rows = rows
        self.dim = dim
        if frozen_values is not None:
            values = np.asarray(frozen_values, dtype=np.float64)
            if values.shape != (rows, dim):
                raise ShapeError(
                    f"frozen table {name!r}: values shape {values.shape} != ({rows}, {dim})"
                )
            self.frozen = True
            self.values = values
            self.param = None
        else:
            assert store is not None
            self.frozen = False
            self.values = None
            self.param = store.matrix(name, rows, dim)


def embed_lookup(table: EmbeddingTable, ids) -> Tensor:
    """Gather rows for ``ids``; differentiable unless the table is frozen."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        raise ShapeError(
            f"lookup in {table.name!r}: index out of range "
            f"[{idx.min()}, {idx.max()}] for {table.rows} rows"
        )
    if table.frozen:
        return Tensor(table.values[idx], op="frozen_lookup")
    return T.gather_rows(table.param, idx)


@dataclass
class DinParams:
    """Weights of one target-attention head (scoring MLP + value projection).

    The scoring MLP has no output bias: a constant shift of every event's
    logit cancels in the softmax, so such a bias would be a dead parameter.
    """

    w1: Parameter
    b1: Parameter
    w2: Parameter
    wv: Parameter
    bv: Parameter
    key_dim: int
    out_dim: int


def init_din(
    store: ParamStore, prefix: str, key_dim: int, side_dim: int, hidden: int, out_dim: int
) -> DinParams:
    feat = 4 * key_dim + side_dim
    return DinParams(
        w1=store.matrix(f"{prefix}/w1", feat, hidden),
        b1=store.zeros(f"{prefix}/b1", hidden),
        w2=store.matrix(f"{prefix}/w2", hidden, 1),
        wv=store.matrix(f"{prefix}/wv", key_dim, out_dim),
        bv=store.zeros(f"{prefix}/bv", out_dim),
        key_dim=key_dim,
        out_dim=out_dim,
    )


def _attend(
    queries: Tensor,
    keys: Tensor,
    side: Tensor,
    din: DinParams,
    probe: list | None = None,
) -> Tensor:
    """Attention over events for a block of queries: (n,d),(E,d),(E,s) -> (n,out).

    The scoring MLP's first layer over [q; k; q-k; q*k; side] is evaluated in
    factored form: with w1 split into row blocks (A, B, C, D, E), the
    pre-activation equals q(A+C) + k(B-C) + side E + (q*k)D + b1, where only
    the elementwise-product term couples candidates and events.  This avoids
    materializing the (n, e, 4d+s) pair-feature block; the math is identical.
    """
    n, d = queries.shape
    e, dk = keys.shape
    if d != dk or d != din.key_dim:
        raise ShapeError(
            f"target attention: query dim {d} != key dim {dk} (expected {din.key_dim})"
        )
    h = din.w1.shape[1]
    blk_a = T.slice_rows(din.w1, 0, d)
    blk_b = T.slice_rows(din.w1, d, 2 * d)
    blk_c = T.slice_rows(din.w1, 2 * d, 3 * d)
    blk_d = T.slice_rows(din.w1, 3 * d, 4 * d)
    blk_e = T.slice_rows(din.w1, 4 * d, din.w1.shape[0])
    per_query = T.matmul(queries, blk_a + blk_c)                      # (n, h)
    per_event = T.matmul(keys, blk_b - blk_c) + T.matmul(side, blk_e)  # (e, h)
    kd = T.mul(T.reshape(keys, (e, d, 1)), T.reshape(blk_d, (1, d, h)))
    pair = T.reshape(
        T.matmul(queries, T.reshape(T.transpose(kd, (1, 0, 2)), (d, e * h))), (n, e, h)
    )
    pre = pair + T.reshape(per_query, (n, 1, h)) + T.reshape(per_event, (1, e, h)) + din.b1
    hidden = T.relu(pre)
    scores = T.reshape(T.matmul(T.reshape(hidden, (n * e, h)), din.w2), (n, e))
    weights = T.softmax_rows(scores)
    if probe is not None:
        probe.append(("din_weights", weights.data))
    values = T.matmul(keys, din.wv) + din.bv
    return T.matmul(weights, values)


def target_attention(
    query_vec: Tensor,
    keys: list[Tensor],
    key_side_features,
    din: DinParams,
    probe: list | None = None,
) -> Tensor:
    """Personalized pooling of one candidate's view of the behavior events.

    ``keys`` may be empty, in which case the declared fallback (a zero vector
    of the output width) is returned.
    """
    if len(keys) == 0:
        return Tensor(np.zeros(din.out_dim), op="empty_history")
    kmat = T.concat([T.reshape(k, (1, din.key_dim)) for k in keys], axis=0)
    side = key_side_features if isinstance(key_side_features, Tensor) else Tensor(key_side_features)
    q = T.reshape(query_vec, (1, din.key_dim))
    out = _attend(q, kmat, side, din, probe=probe)
    return T.reshape(out, (din.out_dim,))


@dataclass
class PersonalizedReprs:
    p_id: Tensor
    p_img: Tensor
    p_text: Tensor
    i_img: Tensor
    i_text: Tensor


# ---------------------------------------------------------------------------
# session featurization (constant per session, cached on the model)
# ---------------------------------------------------------------------------


@dataclass
class IdBlock:
    item_ids: np.ndarray
    shop_ids: np.ndarray
    brand_ids: np.ndarray
    tok_flat: np.ndarray
    tok_mean: np.ndarray  # (rows, len(tok_flat)) averaging matrix


def _id_block_arrays(items) -> IdBlock:
    flat: list[int] = []
    mat = np.zeros((len(items), max(sum(len(it.text_feature_ids) for it in items), 1)))
    pos = 0
    for i, it in enumerate(items):
        toks = it.text_feature_ids
        if toks:
            mat[i, pos : pos + len(toks)] = 1.0 / len(toks)
            flat.extend(toks)
            pos += len(toks)
    return IdBlock(
        item_ids=np.array([it.item_id for it in items], dtype=np.intp),
        shop_ids=np.array([it.shop_id for it in items], dtype=np.intp),
        brand_ids=np.array([it.brand_id for it in items], dtype=np.intp),
        tok_flat=np.array(flat or [0], dtype=np.intp),
        tok_mean=mat,
    )


def _side_base(events) -> np.ndarray:
    base = np.zeros((len(events), SIDE_BASE_DIM))
    for i, ev in enumerate(events):
        base[i, 0] = 1.0 if ev.action_type == "click" else 0.0
        base[i, 1] = 1.0 if ev.action_type == "order" else 0.0
        base[i, 2] = np.log1p(ev.frequency)
        base[i, 3] = np.exp(-ev.recency / RECENCY_HALF_LIFE_DAYS)
    return base


@dataclass
class SessionFeatures:
    n: int
    cand: IdBlock
    query_tokens: np.ndarray
    age: int
    gender: int
    hist: IdBlock | None
    hist_side: np.ndarray | None
    rel: IdBlock | None
    rel_side: np.ndarray | None
    prices: np.ndarray
    sales: np.ndarray


def featurize(session: SessionExample) -> SessionFeatures:
    history = session.history
    relevant = filter_history(history, session.query.category_id)
    return SessionFeatures(
        n=len(session.candidates),
        cand=_id_block_arrays(session.candidates),
        query_tokens=np.asarray(session.query.query_token_ids, dtype=np.intp),
        age=session.user.age_bucket,
        gender=session.user.gender,
        hist=_id_block_arrays([ev.item for ev in history]) if history else None,
        hist_side=_side_base(history) if history else None,
        rel=_id_block_arrays([ev.item for ev in relevant]) if relevant else None,
        rel_side=_side_base(relevant) if relevant else None,
        prices=np.array([it.price for it in session.candidates]),
        sales=np.array([it.sales for it in session.candidates]),
    )


def _side_tensor(base: np.ndarray, age_emb: Tensor, gender_emb: Tensor) -> Tensor:
    e = base.shape[0]
    return T.concat(
        [Tensor(base), T.tile(age_emb, (e, 1)), T.tile(gender_emb, (e, 1))], axis=1
    )


def _ids_tensor(model, block: IdBlock) -> Tensor:
    """Concatenated item/shop/brand embeddings, one row per item."""
    return T.concat(
        [
            embed_lookup(model.tables["item"], block.item_ids),
            embed_lookup(model.tables["shop"], block.shop_ids),
            embed_lookup(model.tables["brand"], block.brand_ids),
        ],
        axis=1,
    )


def _text_tensor(model, block: IdBlock) -> Tensor:
    """Mean token embedding per item, projected to the model width."""
    tok = embed_lookup(model.tables["token"], block.tok_flat)
    mean = T.matmul(Tensor(block.tok_mean), tok)
    return T.matmul(mean, model.store["text_proj/w"]) + model.store["text_proj/b"]


def build_reprs(
    session: SessionExample, model, probe: list | None = None
) -> PersonalizedReprs:
    """All five per-candidate representation blocks for one session."""
    feat = model.features(session)
    n, dim = feat.n, model.config.embed_dim
    zeros = lambda: Tensor(np.zeros((n, dim)), op="empty_history")

    age_emb = embed_lookup(model.tables["age"], [feat.age])
    gender_emb = embed_lookup(model.tables["gender"], [feat.gender])

    cand_id = _ids_tensor(model, feat.cand)
    i_text = _text_tensor(model, feat.cand)
    if model.variant == "no_image":
        i_img = Tensor(np.zeros((n, dim)), op="no_image")
    else:
        i_img = embed_lookup(model.image_table, feat.cand.item_ids)

    if feat.hist is not None:
        keys_id = _ids_tensor(model, feat.hist)
        side = _side_tensor(feat.hist_side, age_emb, gender_emb)
        p_id = _attend(cand_id, keys_id, side, model.din_id, probe=probe)
    else:
        p_id = zeros()

    if feat.rel is not None and model.variant != "no_image":
        side_rel = _side_tensor(feat.rel_side, age_emb, gender_emb)
        keys_img = embed_lookup(model.image_table, feat.rel.item_ids)
        p_img = _attend(i_img, keys_img, side_rel, model.din_img, probe=probe)
    else:
        p_img = zeros()
    if feat.rel is not None:
        side_rel = _side_tensor(feat.rel_side, age_emb, gender_emb)
        keys_text = _text_tensor(model, feat.rel)
        p_text = _attend(i_text, keys_text, side_rel, model.din_text, probe=probe)
    else:
        p_text = zeros()

    return PersonalizedReprs(p_id=p_id, p_img=p_img, p_text=p_text, i_img=i_img, i_text=i_text)
