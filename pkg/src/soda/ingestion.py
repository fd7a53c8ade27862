"""Corpus loading, vocabularies, dataset splits, and the synthetic generator."""
from __future__ import annotations

import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .domain import (
    AdRecord,
    Creative,
    CtrClass,
    FeatureBundle,
    FeatureSchema,
    ImageBuffer,
    PreprocessFailure,
    TrainingRow,
    validate_ad,
)
from .imaging import load_image, resize_image, save_png

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
_RESERVED = (("<pad>", PAD_ID), ("<unk>", UNK_ID), ("<cls>", CLS_ID))

_WORD_RE = re.compile(r"\w+", re.UNICODE)


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class CategoricalField:
    name: str
    values: tuple[str, ...]

    def id_of(self, token: str) -> int:
        try:
            return self.values.index(token)
        except ValueError:
            raise KeyError(f"category value {token!r} not in vocabulary of field {self.name!r}") from None


@dataclass(frozen=True)
class CorpusSchema:
    """The manifest's schema portion; persisted with models so serving can
    preprocess raw ads without the original manifest."""

    corpus_id: str
    continuous: tuple[str, ...]
    categorical: tuple[CategoricalField, ...]
    objectives: tuple[str, ...] = ()

    @property
    def feature_schema(self) -> FeatureSchema:
        return FeatureSchema(
            continuous=self.continuous,
            categorical=tuple(f.name for f in self.categorical),
        )

    @property
    def cat_vocab_sizes(self) -> tuple[int, ...]:
        return tuple(len(f.values) for f in self.categorical)

    def to_dict(self) -> dict:
        return {
            "corpus_id": self.corpus_id,
            "continuous_schema": list(self.continuous),
            "categorical_schema": [{"name": f.name, "values": list(f.values)} for f in self.categorical],
            "objectives": list(self.objectives),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSchema":
        return cls(
            corpus_id=d.get("corpus_id", ""),
            continuous=tuple(d["continuous_schema"]),
            categorical=tuple(
                CategoricalField(name=f["name"], values=tuple(f["values"]))
                for f in d["categorical_schema"]
            ),
            objectives=tuple(d.get("objectives", [])),
        )


@dataclass(frozen=True)
class CorpusManifest:
    corpus_id: str
    records_path: str
    images_dir: str
    continuous_schema: tuple[str, ...]
    categorical_schema: tuple[CategoricalField, ...]
    objectives: tuple[str, ...] = ()

    @property
    def schema(self) -> CorpusSchema:
        return CorpusSchema(
            corpus_id=self.corpus_id,
            continuous=self.continuous_schema,
            categorical=self.categorical_schema,
            objectives=self.objectives,
        )

    @property
    def feature_schema(self) -> FeatureSchema:
        return self.schema.feature_schema

    @property
    def cat_vocab_sizes(self) -> tuple[int, ...]:
        return self.schema.cat_vocab_sizes

    def to_dict(self) -> dict:
        return {
            "corpus_id": self.corpus_id,
            "records_path": self.records_path,
            "images_dir": self.images_dir,
            "continuous_schema": list(self.continuous_schema),
            "categorical_schema": [
                {"name": f.name, "values": list(f.values)} for f in self.categorical_schema
            ],
            "objectives": list(self.objectives),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusManifest":
        return cls(
            corpus_id=d["corpus_id"],
            records_path=d["records_path"],
            images_dir=d["images_dir"],
            continuous_schema=tuple(d["continuous_schema"]),
            categorical_schema=tuple(
                CategoricalField(name=f["name"], values=tuple(f["values"]))
                for f in d["categorical_schema"]
            ),
            objectives=tuple(d.get("objectives", [])),
        )

    @classmethod
    def load(cls, path: str) -> "CorpusManifest":
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
        base = os.path.dirname(os.path.abspath(path))
        # manifest paths are relative to the manifest file
        for key in ("records_path", "images_dir"):
            if not os.path.isabs(d[key]):
                d[key] = os.path.join(base, d[key])
        return cls.from_dict(d)

    def save(self, path: str) -> None:
        base = os.path.dirname(os.path.abspath(path))
        d = self.to_dict()
        for key in ("records_path", "images_dir"):
            d[key] = os.path.relpath(d[key], base)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")


class Vocabulary:
    """Word-level token table with reserved <pad>=0, <unk>=1, <cls>=2."""

    def __init__(self, tokens: Sequence[str], max_size: int):
        if max_size < len(_RESERVED) + 1:
            raise ValueError(f"max_size must be >= {len(_RESERVED) + 1}")
        self.max_size = max_size
        self.token_to_id: dict[str, int] = {tok: i for tok, i in _RESERVED}
        for tok in tokens:
            if len(self.token_to_id) >= max_size:
                break
            if tok not in self.token_to_id:
                self.token_to_id[tok] = len(self.token_to_id)
        self.id_to_token = [t for t, _ in sorted(self.token_to_id.items(), key=lambda kv: kv[1])]

    def __len__(self) -> int:
        return len(self.token_to_id)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def to_dict(self) -> dict:
        return {"max_size": self.max_size, "tokens": self.id_to_token[len(_RESERVED):]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tokens=d["tokens"], max_size=d["max_size"])


def words_of(text: str) -> list[str]:
    """Lowercased words split on whitespace and punctuation."""
    return _WORD_RE.findall(text.lower())


def build_vocab(records: Iterable[AdRecord], max_size: int) -> Vocabulary:
    """Rank corpus words by frequency, ties broken lexicographically."""
    counts: Counter[str] = Counter()
    for rec in records:
        counts.update(words_of(rec.creative.joined_text()))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(tokens=[t for t, _ in ranked], max_size=max_size)


class _DirFrameResolver:
    def __init__(self, images_dir: str):
        self.images_dir = images_dir

    def resolvable(self, ref: str) -> bool:
        return os.path.isfile(os.path.join(self.images_dir, ref))


_RECORD_FIELDS = (
    "ad_id",
    "campaign_id",
    "adset_id",
    "objective",
    "brand",
    "headline",
    "body",
    "call_to_action",
    "frames",
    "continuous",
    "categorical",
    "observed_ctr",
)


def record_to_json_dict(rec: AdRecord) -> dict:
    return {
        "ad_id": rec.ad_id,
        "campaign_id": rec.campaign_id,
        "adset_id": rec.adset_id,
        "objective": rec.objective,
        "brand": rec.creative.brand,
        "headline": rec.creative.headline,
        "body": rec.creative.body,
        "call_to_action": rec.creative.call_to_action,
        "frames": list(rec.creative.frames),
        "continuous": dict(rec.continuous_features),
        "categorical": dict(rec.categorical_features),
        "observed_ctr": rec.observed_ctr,
    }


def record_from_json_dict(d: dict) -> AdRecord:
    missing = [k for k in _RECORD_FIELDS if k not in d]
    if missing:
        raise ValueError(f"record missing fields: {', '.join(missing)}")
    ad_id = str(d["ad_id"])
    creative = Creative(
        creative_id=f"{ad_id}:creative",
        headline=str(d["headline"]),
        body=str(d["body"]),
        call_to_action=str(d["call_to_action"]),
        frames=tuple(str(f) for f in d["frames"]),
        brand=str(d["brand"]),
    )
    ctr = d["observed_ctr"]
    return AdRecord(
        ad_id=ad_id,
        campaign_id=str(d["campaign_id"]),
        adset_id=str(d["adset_id"]),
        objective=str(d["objective"]),
        creative=creative,
        continuous_features={str(k): float(v) for k, v in d["continuous"].items()},
        categorical_features={str(k): str(v) for k, v in d["categorical"].items()},
        observed_ctr=None if ctr is None else float(ctr),
    )


def load_corpus(manifest: CorpusManifest) -> list[AdRecord]:
    """Read the JSON-lines records file; every record is validated on the way in.

    Raises ParseError with the 1-based line number for malformed lines, and the
    validation error (including unresolvable image references) otherwise.
    """
    resolver = _DirFrameResolver(manifest.images_dir)
    records: list[AdRecord] = []
    with open(manifest.records_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
                record = record_from_json_dict(payload)
            except (json.JSONDecodeError, ValueError, TypeError, AttributeError) as exc:
                raise ParseError(line_no, str(exc)) from exc
            validate_ad(record, manifest.feature_schema, frame_resolver=resolver)
            records.append(record)
    return records


def save_corpus(records: Sequence[AdRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json_dict(rec), ensure_ascii=False))
            fh.write("\n")


# --- synthetic corpus ---------------------------------------------------

POSITIVE_KEYWORDS = ("unbeatable", "blazing", "exclusive", "bonus")
NEGATIVE_KEYWORDS = ("boring", "sluggish", "pricey", "restricted")
_NEUTRAL_WORDS = ("everyday", "standard", "regular", "classic")
_PRODUCTS = ("home broadband", "mobile plan", "fiber bundle", "5g upgrade", "streaming pack")
_CTAS = ("Sign up today", "Learn more", "Get started", "Shop now")
_BRAND_POOL = (
    "Voltnet", "Skyband", "Lumicell", "AeroLink", "Quantawave", "Nimbustel",
    "Corewire", "Zephyrnet", "Pulsar Mobile", "Bluepeak", "Gridline", "Vantum",
)
_PLACEMENTS = ("feed", "stories", "reels")
_DEVICES = ("mobile", "desktop", "tablet")
_AGE_BANDS = ("18-24", "25-34", "35-44", "45+")
_OBJECTIVES = ("Conversion", "Traffic", "Awareness")

# class-conditional CTR ranges are disjoint with gaps, so refitted tertiles
# land inside the gaps and label recovery is exact
_CTR_RANGES = {
    CtrClass.BELOW_AVERAGE: (0.002, 0.008),
    CtrClass.AVERAGE: (0.012, 0.018),
    CtrClass.ABOVE_AVERAGE: (0.022, 0.048),
}


@dataclass(frozen=True)
class SyntheticSpec:
    n_ads: int
    n_brands: int = 4
    image_size: int = 64
    signal_quadrant_strength: float = 0.8
    tabular_signal_strength: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_ads < 3:
            raise ValueError("n_ads must be >= 3")
        if self.n_brands < 1:
            raise ValueError("n_brands must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        for name in ("signal_quadrant_strength", "tabular_signal_strength"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


def _class_counts_for_exact_recovery(n: int) -> tuple[int, int, int]:
    """Class sizes such that interpolated tertiles of the disjoint CTR ranges
    reproduce the latent classes exactly: the 1/3 (2/3) quantile must fall at
    or inside the gap between consecutive class ranges."""
    def boundary(h: float) -> int:
        return int(h) if float(h).is_integer() else int(np.ceil(h))

    b1 = boundary((n - 1) / 3.0)
    b2 = boundary(2.0 * (n - 1) / 3.0)
    return b1, b2 - b1, n - b2


def generate_synthetic(spec: SyntheticSpec, out_dir: str) -> tuple[CorpusManifest, list[AdRecord]]:
    """Write a deterministic synthetic corpus with planted multimodal signal.

    Above-average ads get a bright top-left image quadrant plus a positive
    headline keyword; below-average ads a dark quadrant plus a negative
    keyword; average ads neither. One continuous feature carries weak class
    correlation. observed_ctr is drawn from class-disjoint ranges so tertile
    bucketing recovers the latent class exactly.
    """
    rng = np.random.default_rng(spec.seed)
    os.makedirs(out_dir, exist_ok=True)
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)

    n = spec.n_ads
    n_below, n_avg, n_above = _class_counts_for_exact_recovery(n)
    latent = np.array(
        [CtrClass.BELOW_AVERAGE] * n_below + [CtrClass.AVERAGE] * n_avg + [CtrClass.ABOVE_AVERAGE] * n_above
    )
    rng.shuffle(latent)

    brands = tuple(
        _BRAND_POOL[i] if i < len(_BRAND_POOL) else f"Brand{i:02d}" for i in range(spec.n_brands)
    )
    quadrant_shift = spec.signal_quadrant_strength * 255.0 * 0.5
    half = spec.image_size // 2

    records: list[AdRecord] = []
    for i in range(n):
        cls = CtrClass(int(latent[i]))
        ad_id = f"ad{i:05d}"
        brand = brands[i % len(brands)]
        product = _PRODUCTS[int(rng.integers(len(_PRODUCTS)))]

        if cls is CtrClass.ABOVE_AVERAGE:
            keyword = POSITIVE_KEYWORDS[int(rng.integers(len(POSITIVE_KEYWORDS)))]
        elif cls is CtrClass.BELOW_AVERAGE:
            keyword = NEGATIVE_KEYWORDS[int(rng.integers(len(NEGATIVE_KEYWORDS)))]
        else:
            keyword = _NEUTRAL_WORDS[int(rng.integers(len(_NEUTRAL_WORDS)))]
        headline = f"{brand}: {keyword} {product} offer"
        body = f"Upgrade your {product} with {brand} and stay connected all day."
        cta = _CTAS[int(rng.integers(len(_CTAS)))]

        n_frames = int(rng.integers(1, 4))
        frames = []
        for f in range(n_frames):
            base = rng.integers(40, 216, size=(spec.image_size, spec.image_size, 3)).astype(np.float64)
            if cls is CtrClass.ABOVE_AVERAGE:
                base[:half, :half, :] += quadrant_shift
            elif cls is CtrClass.BELOW_AVERAGE:
                base[:half, :half, :] -= quadrant_shift
            pixels = np.clip(base, 0, 255).astype(np.uint8)
            fname = f"{ad_id}_f{f}.png"
            save_png(ImageBuffer.from_array(pixels), os.path.join(images_dir, fname))
            frames.append(fname)

        lo, hi = _CTR_RANGES[cls]
        ctr = float(rng.uniform(lo, hi))
        engagement = float(rng.normal(0.0, 1.0) + 2.0 * spec.tabular_signal_strength * (int(cls) - 1))

        records.append(
            AdRecord(
                ad_id=ad_id,
                campaign_id=f"cmp-{brand.lower().replace(' ', '')}",
                adset_id=f"as{i % 7:02d}",
                objective=str(rng.choice(_OBJECTIVES, p=[0.5, 0.3, 0.2])),
                creative=Creative(
                    creative_id=f"{ad_id}:creative",
                    headline=headline,
                    body=body,
                    call_to_action=cta,
                    frames=tuple(frames),
                    brand=brand,
                ),
                continuous_features={
                    "spend_usd": float(np.round(rng.uniform(50, 5000), 2)),
                    "impressions_k": float(np.round(rng.uniform(1, 500), 1)),
                    "engagement_score": float(np.round(engagement, 6)),
                },
                categorical_features={
                    "placement": str(rng.choice(_PLACEMENTS)),
                    "device": str(rng.choice(_DEVICES)),
                    "age_band": str(rng.choice(_AGE_BANDS)),
                },
                observed_ctr=ctr,
            )
        )

    records_path = os.path.join(out_dir, "records.jsonl")
    save_corpus(records, records_path)
    manifest = CorpusManifest(
        corpus_id=f"synthetic-{spec.seed}-{n}",
        records_path=records_path,
        images_dir=images_dir,
        continuous_schema=("spend_usd", "impressions_k", "engagement_score"),
        categorical_schema=(
            CategoricalField("placement", _PLACEMENTS),
            CategoricalField("device", _DEVICES),
            CategoricalField("age_band", _AGE_BANDS),
        ),
        objectives=_OBJECTIVES,
    )
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest, records


# --- splitting -----------------------------------------------------------


def split_dataset(
    rows: Sequence[TrainingRow], ratios: tuple[float, float, float], seed: int
) -> tuple[list[TrainingRow], list[TrainingRow], list[TrainingRow]]:
    """Split by source ad id so all frames of one ad land in the same split.

    Sizes follow largest-remainder allocation and stay within one ad of the
    exact ratios.
    """
    if not rows:
        raise EmptyInput("no rows to split")
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be positive and sum to 1, got {ratios}")

    ad_ids: list[str] = []
    seen = set()
    for row in rows:
        if row.source_ad_id not in seen:
            seen.add(row.source_ad_id)
            ad_ids.append(row.source_ad_id)

    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(ad_ids)))
    shuffled = [ad_ids[i] for i in order]

    n = len(shuffled)
    raw = [r * n for r in ratios]
    counts = [int(np.floor(x)) for x in raw]
    remainder = n - sum(counts)
    by_frac = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in range(remainder):
        counts[by_frac[i]] += 1

    assignment: dict[str, int] = {}
    start = 0
    for split_idx, count in enumerate(counts):
        for ad_id in shuffled[start : start + count]:
            assignment[ad_id] = split_idx
        start += count

    out: tuple[list[TrainingRow], list[TrainingRow], list[TrainingRow]] = ([], [], [])
    for row in rows:
        out[assignment[row.source_ad_id]].append(row)
    return out


# --- bundle building ------------------------------------------------------


class BundleBuilder:
    """Preprocessing context shared by training, evaluation, and serving.

    Maps a validated ad plus one frame reference to a FeatureBundle; None as
    the frame reference selects the all-zero blank frame.
    """

    def __init__(
        self,
        schema: CorpusSchema,
        images_dir: str,
        vocab: Vocabulary,
        max_len: int = 64,
        image_size: int = 64,
    ):
        self.schema = schema
        self.images_dir = images_dir
        self.vocab = vocab
        self.max_len = max_len
        self.image_size = image_size

    @classmethod
    def for_manifest(
        cls, manifest: CorpusManifest, vocab: Vocabulary, max_len: int = 64, image_size: int = 64
    ) -> "BundleBuilder":
        return cls(manifest.schema, manifest.images_dir, vocab, max_len=max_len, image_size=image_size)

    def bundle(self, record: AdRecord, frame_ref: str | None) -> FeatureBundle:
        from .encoders import tokenize  # local import keeps torch off the synth path

        continuous = np.array(
            [float(record.continuous_features[name]) for name in self.schema.continuous],
            dtype=np.float32,
        )
        categorical_ids = np.array(
            [f.id_of(record.categorical_features[f.name]) for f in self.schema.categorical],
            dtype=np.int64,
        )
        token_ids = tokenize(record.creative.joined_text(), self.vocab, self.max_len)

        if frame_ref is None:
            image = ImageBuffer.blank(self.image_size)
        else:
            path = os.path.join(self.images_dir, frame_ref)
            try:
                image = resize_image(load_image(path), self.image_size)
            except (OSError, ValueError) as exc:
                raise PreprocessFailure(f"cannot read frame {path!r}: {exc}") from exc
        return FeatureBundle(
            continuous=continuous,
            categorical_ids=categorical_ids,
            token_ids=token_ids,
            image=image,
        )

    def rows_for(self, record: AdRecord, label: CtrClass) -> list[TrainingRow]:
        from .domain import expand_creative

        return expand_creative(record, label, self)
