"""The re-ranking model: context-aware fusion, field encoders, output heads.

Forward path per session (N candidates):

1. Context vector C = [mean query-token embedding; age; gender].
2. Item and personalized modal blocks fused by the context-aware fusion unit
   (mean-pool each modality, gate through a two-layer bottleneck conditioned
   on C, softmax the per-modality weights, take the weighted sum).
3. Unified multimodal rows -> transformer encoder over the candidate list.
4. Price and sales field embeddings -> their own encoders.
5. Merge [multimodal, price, sales, id-personalization] -> main encoder.
6. Heads: listwise softmax over conversion logits; per-item sigmoid for the
   click-probability auxiliary task.

Variants: ``full``, ``no_aux`` (same forward; auxiliary loss ignored in
training), ``no_cafu_no_aux`` (fusion replaced by concat + linear projection),
``no_image`` (text+ID baseline; image blocks dropped entirely).

``forward_session`` scores one list.  Training and bulk evaluation go through
``forward_batch``, which stacks same-length sessions into one graph so the
encoder matmuls run at batch width; the math per session is identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import DatasetMeta, Item, SessionExample
from .encoders import (
    SIDE_BASE_DIM,
    EmbeddingTable,
    PersonalizedReprs,
    SessionFeatures,
    build_reprs,
    featurize,
    init_din,
)
from .params import ParamStore
from .tensor import Parameter, ShapeError, Tensor

VARIANTS = ("full", "no_aux", "no_cafu_no_aux", "no_image")


@dataclass
class ModelConfig:
    embed_dim: int = 32
    enc_layers: int = 2
    enc_heads: int = 6
    enc_head_dim: int = 32
    reduction: int = 2
    mlp_width: int = 64
    din_hidden: int = 32
    field_dim: int = 16
    price_buckets: int = 16

    @property
    def context_dim(self) -> int:
        return 3 * self.embed_dim

    @property
    def enc_width(self) -> int:
        return self.enc_heads * self.enc_head_dim


@dataclass
class CafuConfig:
    """Fusion gate: modality count, context width, bottleneck ratio, weights."""

    modalities: int
    context_dim: int
    reduction: int
    w1: Parameter
    w2: Parameter

    def __post_init__(self):
        total = self.modalities + self.context_dim
        if total % self.reduction != 0:
            raise ShapeError(
                f"modalities+context ({total}) not divisible by reduction {self.reduction}"
            )


@dataclass
class EncoderConfig:
    layers: int
    heads: int
    head_dim: int

    @property
    def width(self) -> int:
        return self.heads * self.head_dim


@dataclass
class ForwardTrace:
    """Per-session outputs: scores, click probabilities, fusion weights."""

    y_hat: Tensor        # (N,) softmax conversion scores
    y_hat_ctr: Tensor    # (N,) sigmoid click probabilities
    s_item: Tensor       # (N, 2) item-block fusion weights [img, text]
    s_pers: Tensor       # (N, 2) personalized-block fusion weights [img, text]


@dataclass
class BatchTrace:
    """Stacked outputs for a batch of same-length sessions."""

    y_hat: Tensor        # (B, N)
    y_hat_ctr: Tensor    # (B, N)
    s_item: Tensor       # (B*N, 2)
    s_pers: Tensor       # (B*N, 2)
    list_size: int


class ModelParams:
    """All learnable state plus the structural config and dataset geometry."""

    def __init__(
        self,
        config: ModelConfig,
        meta: DatasetMeta,
        variant: str,
        seed: int,
        image_rows: np.ndarray,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.config = config
        self.meta = meta
        self.variant = variant
        self.seed = seed
        self.store = ParamStore(seed)
        cfg = config
        vocab = meta.vocab
        if image_rows.shape != (vocab["items"], cfg.embed_dim):
            raise ShapeError(
                f"image table shape {image_rows.shape} != ({vocab['items']}, {cfg.embed_dim})"
            )

        self.tables = {
            "item": EmbeddingTable("emb/item", vocab["items"], cfg.embed_dim, self.store),
            "shop": EmbeddingTable("emb/shop", vocab["shops"], cfg.embed_dim, self.store),
            "brand": EmbeddingTable("emb/brand", vocab["brands"], cfg.embed_dim, self.store),
            "token": EmbeddingTable("emb/token", vocab["tokens"], cfg.embed_dim, self.store),
            "age": EmbeddingTable("emb/age", vocab["age_buckets"], cfg.embed_dim, self.store),
            "gender": EmbeddingTable("emb/gender", vocab["genders"], cfg.embed_dim, self.store),
        }
        self.image_table = EmbeddingTable(
            "emb/image", vocab["items"], cfg.embed_dim, frozen_values=image_rows
        )

        s = self.store
        s.matrix("text_proj/w", cfg.embed_dim, cfg.embed_dim)
        s.zeros("text_proj/b", cfg.embed_dim)

        side_dim = SIDE_BASE_DIM + 2 * cfg.embed_dim
        self.din_id = init_din(s, "din_id", 3 * cfg.embed_dim, side_dim, cfg.din_hidden, cfg.embed_dim)
        self.din_text = init_din(s, "din_text", cfg.embed_dim, side_dim, cfg.din_hidden, cfg.embed_dim)
        if variant != "no_image":
            self.din_img = init_din(s, "din_img", cfg.embed_dim, side_dim, cfg.din_hidden, cfg.embed_dim)
        else:
            self.din_img = None

        j = cfg.context_dim
        if variant in ("full", "no_aux"):
            self.cafu_item = self._init_cafu("cafu_item", 2, j, cfg.reduction)
            self.cafu_pers = self._init_cafu("cafu_pers", 2, j, cfg.reduction)
        else:
            self.cafu_item = self.cafu_pers = None
        if variant == "no_cafu_no_aux":
            s.matrix("fuse_item/w", 2 * cfg.embed_dim, cfg.embed_dim)
            s.zeros("fuse_item/b", cfg.embed_dim)
            s.matrix("fuse_pers/w", 2 * cfg.embed_dim, cfg.embed_dim)
            s.zeros("fuse_pers/b", cfg.embed_dim)

        self.enc_cfg = EncoderConfig(cfg.enc_layers, cfg.enc_heads, cfg.enc_head_dim)
        self._init_mlp("mlp_mo", 2 * cfg.embed_dim + j, cfg.mlp_width, cfg.mlp_width)
        self._init_encoder("enc_mo", cfg.mlp_width)
        s.matrix("emb/price", cfg.price_buckets, cfg.field_dim)
        s.matrix("emb/sales", cfg.price_buckets, cfg.field_dim)
        self._init_encoder("enc_price", cfg.field_dim)
        self._init_encoder("enc_sales", cfg.field_dim)
        main_in = cfg.mlp_width + 2 * cfg.field_dim + cfg.embed_dim
        self._init_mlp("mlp_main", main_in, cfg.mlp_width, cfg.mlp_width)
        self._init_encoder("enc_main", cfg.mlp_width)
        # the listwise softmax is shift-invariant, so a final score bias is dead
        self._init_mlp("head_score", cfg.mlp_width, cfg.mlp_width, 1, final_bias=False)
        self._init_mlp("head_ctr", cfg.mlp_width, cfg.mlp_width, 1)
        self._feature_cache: dict[int, SessionFeatures] = {}

    def features(self, session: SessionExample) -> SessionFeatures:
        """Constant per-session index/feature arrays, cached by identity."""
        key = id(session)
        feat = self._feature_cache.get(key)
        if feat is None:
            feat = featurize(session)
            self._feature_cache[key] = feat
        return feat

    def clear_feature_cache(self) -> None:
        self._feature_cache.clear()

    def _init_cafu(self, prefix: str, m: int, j: int, r: int) -> CafuConfig:
        hidden = (m + j) // r
        return CafuConfig(
            modalities=m,
            context_dim=j,
            reduction=r,
            w1=self.store.matrix(f"{prefix}/w1", hidden, m + j),
            w2=self.store.matrix(f"{prefix}/w2", m, hidden),
        )

    def _init_mlp(
        self, prefix: str, din: int, hidden: int, dout: int, final_bias: bool = True
    ) -> None:
        s = self.store
        s.matrix(f"{prefix}/w1", din, hidden)
        s.zeros(f"{prefix}/b1", hidden)
        s.matrix(f"{prefix}/w2", hidden, dout)
        if final_bias:
            s.zeros(f"{prefix}/b2", dout)

    def _init_encoder(self, prefix: str, field_width: int) -> None:
        s, w = self.store, self.config.enc_width
        s.matrix(f"{prefix}/in/w", field_width, w)
        s.zeros(f"{prefix}/in/b", w)
        for i in range(self.config.enc_layers):
            for proj in ("wq", "wk", "wv", "wo"):
                s.matrix(f"{prefix}/layer{i}/{proj}", w, w)
                s.zeros(f"{prefix}/layer{i}/{proj}_b", w)
            s.ones(f"{prefix}/layer{i}/ln1_g", w)
            s.zeros(f"{prefix}/layer{i}/ln1_b", w)
            s.matrix(f"{prefix}/layer{i}/ffn_w1", w, 2 * w)
            s.zeros(f"{prefix}/layer{i}/ffn_b1", 2 * w)
            s.matrix(f"{prefix}/layer{i}/ffn_w2", 2 * w, w)
            s.zeros(f"{prefix}/layer{i}/ffn_b2", w)
            s.ones(f"{prefix}/layer{i}/ln2_g", w)
            s.zeros(f"{prefix}/layer{i}/ln2_b", w)
        s.matrix(f"{prefix}/out/w", w, field_width)
        s.zeros(f"{prefix}/out/b", field_width)

    def parameters(self) -> list[Parameter]:
        return list(self.store)


def init_model(
    config: ModelConfig, meta: DatasetMeta, catalog: list[Item], variant: str, seed: int
) -> ModelParams:
    """Build a model over a dataset's catalog; image rows are frozen."""
    rows = np.zeros((meta.vocab["items"], config.embed_dim))
    for it in catalog:
        emb = np.asarray(it.image_embedding, dtype=np.float64)
        if emb.shape != (config.embed_dim,):
            raise ShapeError(
                f"item {it.item_id}: image embedding dim {emb.shape} != ({config.embed_dim},)"
            )
        rows[it.item_id] = emb
    return ModelParams(config, meta, variant, seed, rows)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _linear(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    return T.matmul(x, store[f"{prefix}/w"]) + store[f"{prefix}/b"]


def _mlp(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    h = T.relu(T.matmul(x, store[f"{prefix}/w1"]) + store[f"{prefix}/b1"])
    out = T.matmul(h, store[f"{prefix}/w2"])
    if f"{prefix}/b2" in store:
        out = out + store[f"{prefix}/b2"]
    return out


def _cafu_rows(x: Tensor, ctx_rows: Tensor, cfg: CafuConfig) -> tuple[Tensor, Tensor]:
    """Fusion over stacked rows: (R, D, M) with per-row context (R, J)."""
    r, d, m = x.shape
    z = T.mean_axis(x, 1)  # (R, M)
    zc = T.concat([z, ctx_rows], axis=1)  # (R, M+J)
    hidden = T.relu(T.matmul(zc, T.transpose(cfg.w1, (1, 0))))
    weights = T.softmax_rows(T.matmul(hidden, T.transpose(cfg.w2, (1, 0))))  # (R, M)
    fused = T.sum_axis(T.mul(x, T.reshape(weights, (r, 1, m))), axis=2)
    return fused, weights


def cafu(x: Tensor, context: Tensor, cfg: CafuConfig) -> tuple[Tensor, Tensor]:
    """Context-aware fusion of (N, D, M) modal blocks -> (N, D) plus (N, M) gates.

    Per item: mean-pool each modality to an initial weight, append the context
    vector, squeeze through the bottleneck (ReLU between the two mats), softmax
    into per-modality weights, and sum the weighted modality vectors.
    """
    n, d, m = x.shape
    j = context.shape[0]
    if m != cfg.modalities or j != cfg.context_dim:
        raise ShapeError(
            f"fusion input ({m} modalities, context {j}) does not match "
            f"config ({cfg.modalities}, {cfg.context_dim})"
        )
    ctx_rows = T.tile(T.reshape(context, (1, j)), (n, 1))
    return _cafu_rows(x, ctx_rows, cfg)


def encoder_stack(
    x: Tensor,
    store: ParamStore,
    prefix: str,
    cfg: EncoderConfig,
    probe: list | None = None,
) -> Tensor:
    """Transformer encoder over the candidate axis; no positional encoding.

    Accepts (N, w) for one list or (B, N, w) for a stacked batch; attention
    never crosses the batch axis.
    """
    rank2 = x.data.ndim == 2
    if rank2:
        x = T.reshape(x, (1,) + x.shape)
    b, n, field_width = x.shape
    w, heads, hd = cfg.width, cfg.heads, cfg.head_dim
    h = _linear(x, store, f"{prefix}/in")
    inv_sqrt = 1.0 / math.sqrt(hd)
    for i in range(cfg.layers):
        lp = f"{prefix}/layer{i}"
        q = _split_heads(T.matmul(h, store[f"{lp}/wq"]) + store[f"{lp}/wq_b"], heads, hd)
        k = _split_heads(T.matmul(h, store[f"{lp}/wk"]) + store[f"{lp}/wk_b"], heads, hd)
        v = _split_heads(T.matmul(h, store[f"{lp}/wv"]) + store[f"{lp}/wv_b"], heads, hd)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * inv_sqrt
        probs = T.softmax_rows(scores)  # (B, heads, N, N)
        if probe is not None:
            probe.append(("attention_probs", probs.data))
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, n, w))
        attn = T.matmul(ctx, store[f"{lp}/wo"]) + store[f"{lp}/wo_b"]
        h = T.layer_norm(h + attn, store[f"{lp}/ln1_g"], store[f"{lp}/ln1_b"])
        ff = T.relu(T.matmul(h, store[f"{lp}/ffn_w1"]) + store[f"{lp}/ffn_b1"])
        ff = T.matmul(ff, store[f"{lp}/ffn_w2"]) + store[f"{lp}/ffn_b2"]
        h = T.layer_norm(h + ff, store[f"{lp}/ln2_g"], store[f"{lp}/ln2_b"])
    out = _linear(h, store, f"{prefix}/out")
    if rank2:
        out = T.reshape(out, (n, field_width))
    return out


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    b, n, _ = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, head_dim)), (0, 2, 1, 3))


def context_vector(session: SessionExample, model: ModelParams) -> Tensor:
    """Session context: mean query-token embedding ++ age ++ gender."""
    from .encoders import embed_lookup

    feat = model.features(session)
    tok = embed_lookup(model.tables["token"], feat.query_tokens)
    age = embed_lookup(model.tables["age"], [feat.age])
    gender = embed_lookup(model.tables["gender"], [feat.gender])
    dim = model.config.embed_dim
    return T.concat(
        [T.mean_axis(tok, 0), T.reshape(age, (dim,)), T.reshape(gender, (dim,))], axis=0
    )


def _bucketize(values: np.ndarray, mean: float, std: float, buckets: int) -> np.ndarray:
    z = (np.log1p(values) - mean) / std
    return np.clip(((z + 3.0) / 6.0 * buckets).astype(np.intp), 0, buckets - 1)


def _stack_modalities(a: Tensor, b: Tensor) -> Tensor:
    n, d = a.shape
    return T.concat([T.reshape(a, (n, d, 1)), T.reshape(b, (n, d, 1))], axis=2)


def _fuse_rows(
    model: ModelParams,
    i_img: Tensor,
    i_text: Tensor,
    p_img: Tensor,
    p_text: Tensor,
    ctx_rows: Tensor,
    probe: list | None = None,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Variant-dispatched modal fusion over stacked (R, D) rows."""
    store = model.store
    rows = i_text.shape[0]
    if model.variant == "no_image":
        fixed = Tensor(np.tile([0.0, 1.0], (rows, 1)), op="fixed_weights")
        return i_text, p_text, fixed, fixed
    if model.variant == "no_cafu_no_aux":
        i_mo = _linear(T.concat([i_img, i_text], axis=1), store, "fuse_item")
        p_mo = _linear(T.concat([p_img, p_text], axis=1), store, "fuse_pers")
        fixed = Tensor(np.full((rows, 2), 0.5), op="fixed_weights")
        return i_mo, p_mo, fixed, fixed
    i_mo, s_item = _cafu_rows(_stack_modalities(i_img, i_text), ctx_rows, model.cafu_item)
    p_mo, s_pers = _cafu_rows(_stack_modalities(p_img, p_text), ctx_rows, model.cafu_pers)
    if probe is not None:
        probe.append(("cafu_item", s_item.data))
        probe.append(("cafu_pers", s_pers.data))
    return i_mo, p_mo, s_item, s_pers


def forward_batch(
    sessions: list[SessionExample],
    model: ModelParams,
    reprs_list: list[PersonalizedReprs] | None = None,
    probe: list | None = None,
) -> BatchTrace:
    """Score a batch of equally-sized candidate lists in one graph."""
    cfg, store = model.config, model.store
    bsz = len(sessions)
    n = len(sessions[0].candidates)
    if any(len(s.candidates) != n for s in sessions):
        raise ShapeError("all sessions in a batch must have equal candidate counts")
    if reprs_list is None:
        reprs_list = [build_reprs(s, model, probe=probe) for s in sessions]

    ctx_rows = T.concat(
        [
            T.tile(T.reshape(context_vector(s, model), (1, cfg.context_dim)), (n, 1))
            for s in sessions
        ],
        axis=0,
    )  # (B*N, J)
    stack = lambda field: T.concat([getattr(r, field) for r in reprs_list], axis=0)
    i_mo, p_mo, s_item, s_pers = _fuse_rows(
        model, stack("i_img"), stack("i_text"), stack("p_img"), stack("p_text"),
        ctx_rows, probe=probe,
    )

    m_mo = _mlp(T.concat([i_mo, p_mo, ctx_rows], axis=1), store, "mlp_mo")
    a_mo = encoder_stack(
        T.reshape(m_mo, (bsz, n, cfg.mlp_width)), store, "enc_mo", model.enc_cfg, probe=probe
    )

    meta = model.meta
    feats = [model.features(s) for s in sessions]
    price_ids = _bucketize(
        np.concatenate([f.prices for f in feats]),
        meta.price_log_mean, meta.price_log_std, cfg.price_buckets,
    )
    sales_ids = _bucketize(
        np.concatenate([f.sales for f in feats]),
        meta.sales_log_mean, meta.sales_log_std, cfg.price_buckets,
    )
    price_rows = T.reshape(T.gather_rows(store["emb/price"], price_ids), (bsz, n, cfg.field_dim))
    sales_rows = T.reshape(T.gather_rows(store["emb/sales"], sales_ids), (bsz, n, cfg.field_dim))
    a_price = encoder_stack(price_rows, store, "enc_price", model.enc_cfg, probe=probe)
    a_sales = encoder_stack(sales_rows, store, "enc_sales", model.enc_cfg, probe=probe)

    p_id = T.reshape(stack("p_id"), (bsz, n, cfg.embed_dim))
    m_main = _mlp(T.concat([a_mo, a_price, a_sales, p_id], axis=2), store, "mlp_main")
    a_main = encoder_stack(m_main, store, "enc_main", model.enc_cfg, probe=probe)

    y_hat = T.softmax_rows(T.reshape(_mlp(a_main, store, "head_score"), (bsz, n)))
    y_hat_ctr = T.sigmoid(T.reshape(_mlp(a_mo, store, "head_ctr"), (bsz, n)))
    return BatchTrace(
        y_hat=y_hat, y_hat_ctr=y_hat_ctr, s_item=s_item, s_pers=s_pers, list_size=n
    )


def forward_session(
    session: SessionExample,
    reprs: PersonalizedReprs,
    model: ModelParams,
    probe: list | None = None,
) -> ForwardTrace:
    """Score one candidate list; returns scores, click probs, fusion weights."""
    bt = forward_batch([session], model, reprs_list=[reprs], probe=probe)
    n = bt.list_size
    return ForwardTrace(
        y_hat=T.reshape(bt.y_hat, (n,)),
        y_hat_ctr=T.reshape(bt.y_hat_ctr, (n,)),
        s_item=bt.s_item,
        s_pers=bt.s_pers,
    )


def run_forward(
    session: SessionExample, model: ModelParams, probe: list | None = None
) -> ForwardTrace:
    """Convenience: build representations then score."""
    reprs = build_reprs(session, model, probe=probe)
    return forward_session(session, reprs, model, probe=probe)
