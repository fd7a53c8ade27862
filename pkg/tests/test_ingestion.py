import hashlib
import json
import os

import numpy as np
import pytest

from soda.bucketing import bucketize, fit_thresholds
from soda.domain import AdValidationError, CtrClass, ViolationCode
from soda.ingestion import (
    BundleBuilder,
    CorpusManifest,
    EmptyInput,
    ParseError,
    SyntheticSpec,
    Vocabulary,
    build_vocab,
    generate_synthetic,
    load_corpus,
    split_dataset,
)

from conftest import make_record


def tree_digest(root: str) -> str:
    """Order-independent digest of every file's relative path and bytes."""
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


class TestBuildVocab:
    def test_worked_example(self):
        records = [make_record("a", headline="fast net"), make_record("b", headline="fast game")]
        vocab = build_vocab(records, max_size=10)
        assert vocab.token_to_id == {"<pad>": 0, "<unk>": 1, "<cls>": 2, "fast": 3, "game": 4, "net": 5}

    def test_empty_corpus_reserved_only(self):
        vocab = build_vocab([], max_size=10)
        assert len(vocab) == 3

    def test_max_size_truncates_to_most_frequent(self):
        records = [make_record("a", headline="fast net"), make_record("b", headline="fast game")]
        vocab = build_vocab(records, max_size=4)
        assert len(vocab) == 4
        assert "fast" in vocab.token_to_id

    def test_ids_dense_bijection(self):
        records = [make_record("a", headline="alpha beta gamma delta alpha")]
        vocab = build_vocab(records, max_size=50)
        ids = sorted(vocab.token_to_id.values())
        assert ids == list(range(len(vocab)))

    def test_roundtrip_serialization(self):
        records = [make_record("a", headline="one two three")]
        vocab = build_vocab(records, max_size=10)
        again = Vocabulary.from_dict(vocab.to_dict())
        assert again.token_to_id == vocab.token_to_id

    def test_min_size_guard(self):
        with pytest.raises(ValueError):
            Vocabulary([], max_size=3)


class TestSyntheticGeneration:
    def test_deterministic_trees(self, tmp_path):
        spec = SyntheticSpec(n_ads=30, seed=7)
        generate_synthetic(spec, str(tmp_path / "one"))
        generate_synthetic(spec, str(tmp_path / "two"))
        assert tree_digest(str(tmp_path / "one")) == tree_digest(str(tmp_path / "two"))

    def test_balanced_classes_for_divisible_n(self, tmp_path):
        _, records = generate_synthetic(SyntheticSpec(n_ads=30, seed=3), str(tmp_path / "c"))
        thresholds = fit_thresholds([r.observed_ctr for r in records])
        labels = [bucketize(r.observed_ctr, thresholds) for r in records]
        counts = [labels.count(c) for c in CtrClass]
        assert counts == [10, 10, 10]

    def test_bucketizer_recovers_latent_classes_exactly(self, tmp_path):
        from soda.ingestion import NEGATIVE_KEYWORDS, POSITIVE_KEYWORDS

        _, records = generate_synthetic(SyntheticSpec(n_ads=300, seed=7), str(tmp_path / "c"))
        thresholds = fit_thresholds([r.observed_ctr for r in records])
        for rec in records:
            label = bucketize(rec.observed_ctr, thresholds)
            headline = rec.creative.headline.lower()
            has_pos = any(k in headline for k in POSITIVE_KEYWORDS)
            has_neg = any(k in headline for k in NEGATIVE_KEYWORDS)
            if label is CtrClass.ABOVE_AVERAGE:
                assert has_pos and not has_neg
            elif label is CtrClass.BELOW_AVERAGE:
                assert has_neg and not has_pos
            else:
                assert not has_pos and not has_neg

    def test_exact_recovery_for_non_divisible_n(self, tmp_path):
        for n in (301, 302):
            _, records = generate_synthetic(SyntheticSpec(n_ads=n, seed=5), str(tmp_path / f"c{n}"))
            thresholds = fit_thresholds([r.observed_ctr for r in records])
            # disjoint CTR ranges identify the latent class directly
            for rec in records:
                latent = (
                    CtrClass.BELOW_AVERAGE
                    if rec.observed_ctr < 0.01
                    else CtrClass.AVERAGE
                    if rec.observed_ctr < 0.02
                    else CtrClass.ABOVE_AVERAGE
                )
                assert bucketize(rec.observed_ctr, thresholds) is latent

    def test_quadrant_brightness_signal(self, tmp_path):
        from soda.imaging import load_image

        manifest, records = generate_synthetic(SyntheticSpec(n_ads=30, seed=2), str(tmp_path / "c"))
        thresholds = fit_thresholds([r.observed_ctr for r in records])
        for rec in records[:12]:
            label = bucketize(rec.observed_ctr, thresholds)
            img = load_image(os.path.join(manifest.images_dir, rec.creative.frames[0]))
            half = img.height // 2
            quad = img.pixels[:half, :half].mean()
            rest = img.pixels[half:, half:].mean()
            if label is CtrClass.ABOVE_AVERAGE:
                assert quad > rest + 50
            elif label is CtrClass.BELOW_AVERAGE:
                assert quad < rest - 50

    def test_loader_roundtrip(self, tmp_path):
        manifest, records = generate_synthetic(SyntheticSpec(n_ads=12, seed=1), str(tmp_path / "c"))
        loaded = load_corpus(manifest)
        assert loaded == records

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(n_ads=10, signal_quadrant_strength=1.5)


class TestLoadCorpus:
    def _manifest(self, tmp_path, lines):
        records_path = tmp_path / "records.jsonl"
        records_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        images = tmp_path / "images"
        images.mkdir(exist_ok=True)
        return CorpusManifest(
            corpus_id="t",
            records_path=str(records_path),
            images_dir=str(images),
            continuous_schema=("spend",),
            categorical_schema=(),
            objectives=("Conversion",),
        )

    def _line(self, ad_id, frames=()):
        return json.dumps(
            {
                "ad_id": ad_id,
                "campaign_id": "c",
                "adset_id": "s",
                "objective": "Conversion",
                "brand": "B",
                "headline": "h",
                "body": "",
                "call_to_action": "",
                "frames": list(frames),
                "continuous": {"spend": 1.0},
                "categorical": {},
                "observed_ctr": 0.02,
            }
        )

    def test_two_wellformed_lines(self, tmp_path):
        manifest = self._manifest(tmp_path, [self._line("a1"), self._line("a2")])
        records = load_corpus(manifest)
        assert [r.ad_id for r in records] == ["a1", "a2"]

    def test_malformed_line_cites_line_number(self, tmp_path):
        manifest = self._manifest(tmp_path, [self._line("a1"), self._line("a2"), "{broken"])
        with pytest.raises(ParseError) as err:
            load_corpus(manifest)
        assert err.value.line_no == 3

    def test_missing_record_field_is_parse_error(self, tmp_path):
        bad = json.dumps({"ad_id": "x"})
        manifest = self._manifest(tmp_path, [bad])
        with pytest.raises(ParseError) as err:
            load_corpus(manifest)
        assert "missing fields" in str(err.value)

    def test_missing_image_raises_unresolvable(self, tmp_path):
        manifest = self._manifest(tmp_path, [self._line("a1", frames=["nope.png"])])
        with pytest.raises(AdValidationError) as err:
            load_corpus(manifest)
        assert ViolationCode.UNRESOLVABLE_IMAGE in err.value.codes()
        assert "nope.png" in str(err.value)

    def test_manifest_roundtrip(self, tmp_path):
        manifest = self._manifest(tmp_path, [self._line("a1")])
        path = tmp_path / "manifest.json"
        manifest.save(str(path))
        again = CorpusManifest.load(str(path))
        assert again.corpus_id == manifest.corpus_id
        assert os.path.samefile(again.records_path, manifest.records_path)


class TestSplitDataset:
    def _rows(self, n_ads, frames_per_ad=1):
        rows = []
        from conftest import random_rows

        base = random_rows(n_ads, seed=1)
        for i, r in enumerate(base):
            for f in range(frames_per_ad):
                rows.append(
                    type(r)(bundle=r.bundle, label=r.label, source_ad_id=r.source_ad_id, frame_index=f)
                )
        return rows

    def test_eight_one_one(self):
        rows = self._rows(10)
        train, val, test = split_dataset(rows, (0.8, 0.1, 0.1), seed=0)
        assert (len(train), len(val), len(test)) == (8, 1, 1)

    def test_frames_stay_together(self):
        rows = self._rows(9, frames_per_ad=3)
        splits = split_dataset(rows, (0.5, 0.25, 0.25), seed=4)
        for split in splits:
            ads = {r.source_ad_id for r in split}
            for other in splits:
                if other is not split:
                    assert ads.isdisjoint({r.source_ad_id for r in other})
        assert sum(len(s) for s in splits) == len(rows)
        for split in splits:
            counts = {}
            for r in split:
                counts[r.source_ad_id] = counts.get(r.source_ad_id, 0) + 1
            assert all(v == 3 for v in counts.values())

    def test_deterministic(self):
        rows = self._rows(20)
        a = split_dataset(rows, (0.8, 0.1, 0.1), seed=9)
        b = split_dataset(rows, (0.8, 0.1, 0.1), seed=9)
        assert a == b

    def test_ratio_validation(self):
        rows = self._rows(5)
        with pytest.raises(ValueError):
            split_dataset(rows, (0.8, 0.1, 0.2), seed=0)

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            split_dataset([], (0.8, 0.1, 0.1), seed=0)


class TestBundleBuilder:
    def test_builds_from_synthetic_corpus(self, tmp_path):
        manifest, records = generate_synthetic(SyntheticSpec(n_ads=6, seed=4), str(tmp_path / "c"))
        vocab = build_vocab(records, max_size=100)
        builder = BundleBuilder.for_manifest(manifest, vocab, max_len=16, image_size=32)
        bundle = builder.bundle(records[0], records[0].creative.frames[0])
        assert bundle.continuous.shape == (3,)
        assert bundle.categorical_ids.shape == (3,)
        assert bundle.token_ids.shape == (16,)
        assert bundle.image.height == bundle.image.width == 32

    def test_blank_frame(self, tmp_path):
        manifest, records = generate_synthetic(SyntheticSpec(n_ads=3, seed=4), str(tmp_path / "c"))
        vocab = build_vocab(records, max_size=100)
        builder = BundleBuilder.for_manifest(manifest, vocab, image_size=32)
        bundle = builder.bundle(records[0], None)
        assert bundle.image.pixels.sum() == 0

    def test_unknown_category_value_raises(self, tmp_path):
        manifest, records = generate_synthetic(SyntheticSpec(n_ads=3, seed=4), str(tmp_path / "c"))
        vocab = build_vocab(records, max_size=100)
        builder = BundleBuilder.for_manifest(manifest, vocab)
        rec = make_record(
            continuous={"spend_usd": 1.0, "impressions_k": 1.0, "engagement_score": 0.0},
            categorical={"placement": "billboard", "device": "mobile", "age_band": "18-24"},
        )
        with pytest.raises(KeyError):
            builder.bundle(rec, None)
