"""Session/item data model, seeded synthetic generator, and dataset files.

The generator stands in for production search logs: every session carries a
query, a user profile, a behavior history, and a 30-item candidate list with
click labels and exactly one conversion.  Conversions are driven by a latent
utility mixing image-embedding affinity, query/title token overlap, and price
sensitivity; which signal dominates is tied to the query's category so the
planted structure is recoverable from observable features.

Datasets are line-delimited JSON: a metadata record first, then one catalog
item per line, then one session per line.  Floats round-trip exactly (JSON
uses shortest-repr decimals), so load(save(x)) == x.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Iterable

import numpy as np

FORMAT_VERSION = 1
LIST_SIZE = 30
IMAGE_DIM = 32

ACTION_TYPES = ("click", "order")


class DatasetError(ValueError):
    """Invalid generator config, malformed dataset file, or broken invariant."""


@dataclass
class Item:
    item_id: int
    shop_id: int
    brand_id: int
    category_id: int
    text_feature_ids: list[int]
    image_embedding: list[float]
    price: float
    sales: float


@dataclass
class BehaviorEvent:
    item: Item
    action_type: str
    frequency: int
    recency: float
    category_id: int


@dataclass
class UserProfile:
    age_bucket: int
    gender: int


@dataclass
class Query:
    query_token_ids: list[int]
    category_id: int


@dataclass
class SessionExample:
    query: Query
    user: UserProfile
    history: list[BehaviorEvent]
    candidates: list[Item]
    click_labels: list[int]
    conversion_labels: list[int]


@dataclass
class GeneratorConfig:
    sessions: int
    catalog_size: int = 1200
    n_categories: int = 20
    n_shops: int = 150
    n_brands: int = 250
    tokens_per_category: int = 14
    shared_tokens: int = 60
    n_age_buckets: int = 8
    n_genders: int = 3
    mix: tuple[float, float, float] = (0.6, 0.25, 0.15)  # image / text / price
    max_history: int = 50
    min_history_len: int = 6
    max_history_len: int = 30
    strong_weight: float = 3.0
    weak_weight: float = 0.4
    gumbel_temp: float = 0.35
    click_slope: float = 1.5
    click_offset: float = 1.0

    def __post_init__(self):
        self.mix = tuple(float(m) for m in self.mix)

    @property
    def item_vocab(self) -> int:
        return self.catalog_size + 1  # index 0 reserved for unknown

    @property
    def token_vocab(self) -> int:
        return 1 + self.n_categories * self.tokens_per_category + self.shared_tokens

    def validate(self) -> None:
        if self.sessions < 0:
            raise DatasetError(f"sessions must be >= 0, got {self.sessions}")
        if self.catalog_size <= 0:
            raise DatasetError("catalog_size must be positive")
        if len(self.mix) != 3 or any(m < 0 for m in self.mix):
            raise DatasetError(f"mix must be 3 non-negative weights, got {self.mix}")
        if abs(sum(self.mix) - 1.0) > 1e-9:
            raise DatasetError(f"mix weights must sum to 1, got sum {sum(self.mix)}")
        if self.catalog_size < LIST_SIZE * self.n_categories:
            raise DatasetError(
                f"catalog_size {self.catalog_size} too small for "
                f"{self.n_categories} categories x {LIST_SIZE} candidates"
            )
        if not 0 < self.min_history_len <= self.max_history_len <= self.max_history:
            raise DatasetError("history length bounds inconsistent")


@dataclass
class DatasetMeta:
    format_version: int
    seed: int
    config: GeneratorConfig
    price_log_mean: float
    price_log_std: float
    sales_log_mean: float
    sales_log_std: float

    @property
    def vocab(self) -> dict[str, int]:
        c = self.config
        return {
            "items": c.item_vocab,
            "shops": c.n_shops,
            "brands": c.n_brands,
            "categories": c.n_categories,
            "tokens": c.token_vocab,
            "age_buckets": c.n_age_buckets,
            "genders": c.n_genders,
        }


@dataclass
class Dataset:
    meta: DatasetMeta
    catalog: list[Item]
    sessions: list[SessionExample]


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _category_groups(cfg: GeneratorConfig) -> list[list[int]]:
    """Partition category ids into (image, text, price) groups sized per mix."""
    n = cfg.n_categories
    n_img = max(1, round(cfg.mix[0] * n))
    n_txt = max(1, round(cfg.mix[1] * n))
    n_img = min(n_img, n - 2)
    n_txt = min(n_txt, n - n_img - 1)
    cats = list(range(n))
    return [cats[:n_img], cats[n_img : n_img + n_txt], cats[n_img + n_txt :]]


def _category_tokens(cfg: GeneratorConfig, cat: int) -> range:
    start = 1 + cat * cfg.tokens_per_category
    return range(start, start + cfg.tokens_per_category)


def _shared_tokens(cfg: GeneratorConfig) -> range:
    start = 1 + cfg.n_categories * cfg.tokens_per_category
    return range(start, start + cfg.shared_tokens)


def _gen_catalog(
    cfg: GeneratorConfig, rng: np.random.Generator, centers: np.ndarray
) -> tuple[list[Item], dict[int, list[int]]]:
    catalog: list[Item] = []
    by_category: dict[int, list[int]] = {c: [] for c in range(cfg.n_categories)}
    cat_price_mu = rng.normal(3.5, 0.4, size=cfg.n_categories)
    shared = list(_shared_tokens(cfg))
    for i in range(cfg.catalog_size):
        cat = i % cfg.n_categories  # round-robin keeps every category stocked
        pool = list(_category_tokens(cfg, cat))
        n_tok = int(rng.integers(2, 6))
        n_cat_tok = max(1, n_tok - int(rng.integers(0, 2)))
        tokens = [int(t) for t in rng.choice(pool, size=min(n_cat_tok, len(pool)), replace=False)]
        tokens += [int(t) for t in rng.choice(shared, size=n_tok - len(tokens), replace=True)]
        emb = _unit(0.8 * centers[cat] + 0.6 * rng.normal(0.0, 1.0 / math.sqrt(IMAGE_DIM), IMAGE_DIM))
        item = Item(
            item_id=i + 1,
            shop_id=int(rng.integers(1, cfg.n_shops)),
            brand_id=int(rng.integers(1, cfg.n_brands)),
            category_id=cat,
            text_feature_ids=tokens,
            image_embedding=[float(x) for x in emb],
            price=float(np.exp(rng.normal(cat_price_mu[cat], 0.5))),
            sales=float(np.exp(rng.normal(2.0, 1.0))),
        )
        catalog.append(item)
        by_category[cat].append(i)
    return catalog, by_category


def _zscore(v: np.ndarray) -> np.ndarray:
    return (v - v.mean()) / (v.std() + 1e-9)


def _gen_session(
    cfg: GeneratorConfig,
    rng: np.random.Generator,
    catalog: list[Item],
    by_category: dict[int, list[int]],
    groups: list[list[int]],
    centers: np.ndarray,
    embeddings: np.ndarray,
) -> SessionExample:
    kind = int(rng.choice(3, p=list(cfg.mix)))
    cat = int(rng.choice(groups[kind]))
    pool = list(_category_tokens(cfg, cat))
    query = Query(
        query_token_ids=[int(t) for t in rng.choice(pool, size=int(rng.integers(2, 5)), replace=False)],
        category_id=cat,
    )
    user = UserProfile(
        age_bucket=int(rng.integers(0, cfg.n_age_buckets)),
        gender=int(rng.integers(0, cfg.n_genders)),
    )
    taste = _unit(centers[cat] + 0.9 * rng.normal(0.0, 1.0 / math.sqrt(IMAGE_DIM), IMAGE_DIM))

    history: list[BehaviorEvent] = []
    for _ in range(int(rng.integers(cfg.min_history_len, cfg.max_history_len + 1))):
        ecat = cat if rng.random() < 0.5 else int(rng.integers(0, cfg.n_categories))
        # users engage with items matching their taste: best of a small draw
        cand = rng.choice(by_category[ecat], size=3, replace=False)
        best = max(cand, key=lambda j: float(embeddings[j] @ taste))
        item = catalog[int(best)]
        history.append(
            BehaviorEvent(
                item=item,
                action_type="order" if rng.random() < 0.25 else "click",
                frequency=1 + int(rng.poisson(1.2)),
                recency=float(rng.uniform(0.0, 60.0)),
                category_id=item.category_id,
            )
        )

    cand_idx = rng.choice(by_category[cat], size=LIST_SIZE, replace=False)
    candidates = [catalog[int(j)] for j in cand_idx]

    img_score = np.array([embeddings[int(j)] @ taste for j in cand_idx])
    qtok = set(query.query_token_ids)
    txt_score = np.array(
        [len(qtok.intersection(it.text_feature_ids)) / len(qtok) for it in candidates]
    )
    prc_score = -np.array([math.log1p(it.price) for it in candidates])
    signals = np.stack([_zscore(img_score), _zscore(txt_score), _zscore(prc_score)])

    weights = np.full(3, cfg.weak_weight)
    weights[kind] = cfg.strong_weight
    utility = weights @ signals
    gumbel = -np.log(-np.log(rng.uniform(1e-12, 1.0, LIST_SIZE)))
    conv = int(np.argmax(utility + cfg.gumbel_temp * gumbel))

    uz = _zscore(utility)
    p_click = 1.0 / (1.0 + np.exp(-cfg.click_slope * (uz - cfg.click_offset)))
    clicks = (rng.uniform(0.0, 1.0, LIST_SIZE) < p_click).astype(int)
    clicks[conv] = 1
    conversions = np.zeros(LIST_SIZE, dtype=int)
    conversions[conv] = 1

    return SessionExample(
        query=query,
        user=user,
        history=history,
        candidates=candidates,
        click_labels=[int(c) for c in clicks],
        conversion_labels=[int(c) for c in conversions],
    )


def gen_dataset(config: GeneratorConfig, seed: int) -> Dataset:
    """Deterministic synthetic dataset: pure function of (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    centers = np.stack(
        [_unit(rng.normal(0.0, 1.0, IMAGE_DIM)) for _ in range(config.n_categories)]
    )
    catalog, by_category = _gen_catalog(config, rng, centers)
    embeddings = np.array([it.image_embedding for it in catalog])
    groups = _category_groups(config)

    log_prices = np.log1p([it.price for it in catalog])
    log_sales = np.log1p([it.sales for it in catalog])
    meta = DatasetMeta(
        format_version=FORMAT_VERSION,
        seed=seed,
        config=config,
        price_log_mean=float(log_prices.mean()),
        price_log_std=float(log_prices.std() + 1e-9),
        sales_log_mean=float(log_sales.mean()),
        sales_log_std=float(log_sales.std() + 1e-9),
    )
    sessions = [
        _gen_session(config, rng, catalog, by_category, groups, centers, embeddings)
        for _ in range(config.sessions)
    ]
    ds = Dataset(meta=meta, catalog=catalog, sessions=sessions)
    validate_dataset(ds)
    return ds


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate_session(s: SessionExample, meta: DatasetMeta, where: str = "session") -> None:
    if len(s.candidates) != LIST_SIZE:
        raise DatasetError(f"{where}: candidates != {LIST_SIZE} (got {len(s.candidates)})")
    if len(s.click_labels) != LIST_SIZE or len(s.conversion_labels) != LIST_SIZE:
        raise DatasetError(f"{where}: label lists must have length {LIST_SIZE}")
    if sum(s.conversion_labels) != 1 or any(c not in (0, 1) for c in s.conversion_labels):
        raise DatasetError(f"{where}: conversion labels must be one-hot")
    for conv, clk in zip(s.conversion_labels, s.click_labels):
        if conv == 1 and clk != 1:
            raise DatasetError(f"{where}: converted item must also be clicked")
    if len(s.history) > meta.config.max_history:
        raise DatasetError(
            f"{where}: history length {len(s.history)} exceeds max {meta.config.max_history}"
        )
    vocab = meta.vocab
    if not 0 <= s.query.category_id < vocab["categories"]:
        raise DatasetError(f"{where}: query category {s.query.category_id} out of range")
    for ev in s.history:
        if ev.action_type not in ACTION_TYPES:
            raise DatasetError(f"{where}: unknown action_type {ev.action_type!r}")
        if ev.frequency < 1:
            raise DatasetError(f"{where}: frequency must be >= 1")
        if not (math.isfinite(ev.recency) and ev.recency >= 0):
            raise DatasetError(f"{where}: recency must be finite and non-negative")
    for it in s.candidates:
        if not 0 < it.item_id < vocab["items"]:
            raise DatasetError(f"{where}: item_id {it.item_id} out of range")


def validate_dataset(ds: Dataset) -> None:
    for i, s in enumerate(ds.sessions):
        validate_session(s, ds.meta, where=f"session {i}")


def filter_history(history: list[BehaviorEvent], query_category: int) -> list[BehaviorEvent]:
    """Order-preserving subsequence of events matching the query's category."""
    return [ev for ev in history if ev.category_id == query_category]


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def _item_record(it: Item) -> dict:
    return {"record": "item", **asdict(it)}


def _session_record(s: SessionExample) -> dict:
    return {
        "record": "session",
        "query": asdict(s.query),
        "user": asdict(s.user),
        "history": [
            {
                "item_id": ev.item.item_id,
                "action_type": ev.action_type,
                "frequency": ev.frequency,
                "recency": ev.recency,
                "category_id": ev.category_id,
            }
            for ev in s.history
        ],
        "candidate_ids": [it.item_id for it in s.candidates],
        "click_labels": s.click_labels,
        "conversion_labels": s.conversion_labels,
    }


def save_dataset(ds: Dataset, path: str) -> None:
    cfg = asdict(ds.meta.config)
    cfg["mix"] = list(cfg["mix"])
    meta = {
        "record": "meta",
        "format_version": ds.meta.format_version,
        "seed": ds.meta.seed,
        "config": cfg,
        "vocab": ds.meta.vocab,
        "price_log_mean": ds.meta.price_log_mean,
        "price_log_std": ds.meta.price_log_std,
        "sales_log_mean": ds.meta.sales_log_mean,
        "sales_log_std": ds.meta.sales_log_std,
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(meta) + "\n")
        for it in ds.catalog:
            f.write(json.dumps(_item_record(it)) + "\n")
        for s in ds.sessions:
            f.write(json.dumps(_session_record(s)) + "\n")


def _require(rec: dict, key: str, ln: int):
    try:
        return rec[key]
    except KeyError:
        raise DatasetError(f"line {ln}: missing field {key!r}") from None


def load_dataset(path: str) -> Dataset:
    meta: DatasetMeta | None = None
    catalog: dict[int, Item] = {}
    sessions: list[SessionExample] = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {ln}: malformed record: {e}") from None
            kind = _require(rec, "record", ln)
            if kind == "meta":
                version = _require(rec, "format_version", ln)
                if version != FORMAT_VERSION:
                    raise DatasetError(
                        f"line {ln}: unsupported format_version {version} "
                        f"(expected {FORMAT_VERSION})"
                    )
                cfg = dict(_require(rec, "config", ln))
                cfg["mix"] = tuple(cfg["mix"])
                meta = DatasetMeta(
                    format_version=version,
                    seed=_require(rec, "seed", ln),
                    config=GeneratorConfig(**cfg),
                    price_log_mean=_require(rec, "price_log_mean", ln),
                    price_log_std=_require(rec, "price_log_std", ln),
                    sales_log_mean=_require(rec, "sales_log_mean", ln),
                    sales_log_std=_require(rec, "sales_log_std", ln),
                )
            elif kind == "item":
                if meta is None:
                    raise DatasetError(f"line {ln}: item record before meta record")
                fields = {k: _require(rec, k, ln) for k in (
                    "item_id", "shop_id", "brand_id", "category_id",
                    "text_feature_ids", "image_embedding", "price", "sales",
                )}
                item = Item(**fields)
                catalog[item.item_id] = item
            elif kind == "session":
                if meta is None:
                    raise DatasetError(f"line {ln}: session record before meta record")
                sessions.append(_parse_session(rec, catalog, ln))
            else:
                raise DatasetError(f"line {ln}: unknown record type {kind!r}")
    if meta is None:
        raise DatasetError("line 1: missing meta record")
    ds = Dataset(meta=meta, catalog=[catalog[k] for k in sorted(catalog)], sessions=sessions)
    for i, s in enumerate(ds.sessions):
        validate_session(s, meta, where=f"session {i}")
    return ds


def _parse_session(rec: dict, catalog: dict[int, Item], ln: int) -> SessionExample:
    def item_by_id(iid: int) -> Item:
        try:
            return catalog[iid]
        except KeyError:
            raise DatasetError(f"line {ln}: unknown item_id {iid}") from None

    q = _require(rec, "query", ln)
    u = _require(rec, "user", ln)
    history = [
        BehaviorEvent(
            item=item_by_id(_require(ev, "item_id", ln)),
            action_type=_require(ev, "action_type", ln),
            frequency=_require(ev, "frequency", ln),
            recency=_require(ev, "recency", ln),
            category_id=_require(ev, "category_id", ln),
        )
        for ev in _require(rec, "history", ln)
    ]
    return SessionExample(
        query=Query(
            query_token_ids=_require(q, "query_token_ids", ln),
            category_id=_require(q, "category_id", ln),
        ),
        user=UserProfile(
            age_bucket=_require(u, "age_bucket", ln),
            gender=_require(u, "gender", ln),
        ),
        history=history,
        candidates=[item_by_id(i) for i in _require(rec, "candidate_ids", ln)],
        click_labels=_require(rec, "click_labels", ln),
        conversion_labels=_require(rec, "conversion_labels", ln),
    )
