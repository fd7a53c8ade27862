import numpy as np
import pytest

from soda.domain import AdRecord, Creative, CtrClass, FeatureBundle, ImageBuffer, TrainingRow
from soda.encoders import EncoderConfig
from soda.fusion import ModelConfig


@pytest.fixture
def schema_small():
    from soda.domain import FeatureSchema

    return FeatureSchema(continuous=("spend", "score"), categorical=("placement",))


def make_record(ad_id="ad1", ctr=0.03, frames=(), **over):
    fields = dict(
        ad_id=ad_id,
        campaign_id="c1",
        adset_id="s1",
        objective="Conversion",
        creative=Creative(
            creative_id=f"{ad_id}:creative",
            headline=over.pop("headline", "fast net"),
            body=over.pop("body", ""),
            call_to_action=over.pop("cta", ""),
            frames=tuple(frames),
            brand=over.pop("brand", "Voltnet"),
        ),
        continuous_features=over.pop("continuous", {"spend": 10.0, "score": 0.5}),
        categorical_features=over.pop("categorical", {"placement": "feed"}),
        observed_ctr=ctr,
    )
    fields.update(over)
    return AdRecord(**fields)


MINI_ENCODER = EncoderConfig(
    d_model=8,
    n_layers=1,
    n_heads=1,
    ffn_dim=16,
    dropout=0.0,
    max_len=8,
    patch_size=8,
    image_size=16,
    cat_vocab_sizes=(3, 2),
    n_continuous=2,
    text_vocab_size=12,
)

MINI_MODEL = ModelConfig(encoder=MINI_ENCODER, d_proj=8, head_hidden=16)


def random_bundle(rng: np.random.Generator, cfg: EncoderConfig = MINI_ENCODER) -> FeatureBundle:
    n_words = int(rng.integers(0, cfg.max_len - 1))
    tokens = np.full(cfg.max_len, 0, dtype=np.int64)
    tokens[0] = 2  # CLS
    tokens[1 : 1 + n_words] = rng.integers(3, cfg.text_vocab_size, size=n_words)
    return FeatureBundle(
        continuous=rng.normal(0, 1, size=cfg.n_continuous).astype(np.float32),
        categorical_ids=np.array(
            [rng.integers(0, s) for s in cfg.cat_vocab_sizes], dtype=np.int64
        ),
        token_ids=tokens,
        image=ImageBuffer.from_array(
            rng.integers(0, 256, size=(cfg.image_size, cfg.image_size, 3)).astype(np.uint8)
        ),
    )


def random_rows(n: int, seed: int = 0, cfg: EncoderConfig = MINI_ENCODER) -> list[TrainingRow]:
    rng = np.random.default_rng(seed)
    return [
        TrainingRow(
            bundle=random_bundle(rng, cfg),
            label=CtrClass(int(rng.integers(3))),
            source_ad_id=f"ad{i}",
            frame_index=0,
        )
        for i in range(n)
    ]
