import pytest

from armmt.data import GeneratorConfig, gen_dataset
from armmt.model import ModelConfig, init_model


def small_gen_config(sessions=30, **kw):
    defaults = dict(
        sessions=sessions,
        catalog_size=240,
        n_categories=8,
        n_shops=20,
        n_brands=30,
        min_history_len=3,
        max_history_len=12,
    )
    defaults.update(kw)
    return GeneratorConfig(**defaults)


def small_model_config(**kw):
    # embed_dim stays 32 to match generated image embeddings
    defaults = dict(
        embed_dim=32,
        enc_layers=1,
        enc_heads=2,
        enc_head_dim=8,
        mlp_width=16,
        din_hidden=8,
        field_dim=8,
        price_buckets=8,
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


@pytest.fixture(scope="session")
def small_dataset():
    return gen_dataset(small_gen_config(), seed=11)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    ds = small_dataset
    return init_model(small_model_config(), ds.meta, ds.catalog, "full", seed=5)


def build_model(ds, variant="full", seed=5, **cfg_kw):
    return init_model(small_model_config(**cfg_kw), ds.meta, ds.catalog, variant, seed)
