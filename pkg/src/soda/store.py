"""File-backed store: ads, content-addressed images, models, insights,
reports, and job records. All writes are write-temp-then-rename atomic."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from typing import Iterable, Sequence

from .domain import AdRecord, validate_ad
from .ingestion import CorpusSchema, record_from_json_dict, record_to_json_dict


class UnknownAd(KeyError):
    pass


def atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str, payload) -> None:
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


class FileStore:
    """Desk-scale persistent state rooted at one directory.

    Layout: ads.jsonl, schema.json, images/ (content-addressed by SHA-256),
    models/<name>/, insights/, reports/, jobs/.
    """

    def __init__(self, root: str):
        self.root = os.path.abspath(root)
        for sub in ("images", "models", "insights", "reports", "jobs"):
            os.makedirs(os.path.join(self.root, sub), exist_ok=True)
        self.ads_path = os.path.join(self.root, "ads.jsonl")
        self.images_dir = os.path.join(self.root, "images")
        self.models_dir = os.path.join(self.root, "models")
        self.insights_dir = os.path.join(self.root, "insights")
        self.reports_dir = os.path.join(self.root, "reports")
        self.jobs_dir = os.path.join(self.root, "jobs")
        self._ads: dict[str, AdRecord] = {}
        self._order: list[str] = []
        self._load_ads()

    # -- ads ----------------------------------------------------------------

    def _load_ads(self) -> None:
        if not os.path.exists(self.ads_path):
            return
        with open(self.ads_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = record_from_json_dict(json.loads(line))
                if record.ad_id not in self._ads:
                    self._order.append(record.ad_id)
                self._ads[record.ad_id] = record

    def _flush_ads(self) -> None:
        lines = [json.dumps(record_to_json_dict(self._ads[a])) for a in self._order]
        atomic_write_text(self.ads_path, "\n".join(lines) + ("\n" if lines else ""))

    def put_ad(self, record: AdRecord) -> None:
        """Insert or replace; frame references must already be stored images."""
        schema = self.schema
        if schema is not None:
            validate_ad(record, schema.feature_schema, frame_resolver=self._resolver())
        if record.ad_id not in self._ads:
            self._order.append(record.ad_id)
        self._ads[record.ad_id] = record
        self._flush_ads()

    def get_ad(self, ad_id: str) -> AdRecord:
        try:
            return self._ads[ad_id]
        except KeyError:
            raise UnknownAd(ad_id) from None

    def has_ad(self, ad_id: str) -> bool:
        return ad_id in self._ads

    def list_ads(self) -> list[AdRecord]:
        return [self._ads[a] for a in self._order]

    def ads_for_brand(self, brand: str) -> list[AdRecord]:
        return [r for r in self.list_ads() if r.creative.brand == brand]

    def _resolver(self):
        store = self

        class _Resolver:
            def resolvable(self, ref: str) -> bool:
                return os.path.isfile(os.path.join(store.images_dir, ref))

        return _Resolver()

    # -- schema ---------------------------------------------------------------

    @property
    def schema_path(self) -> str:
        return os.path.join(self.root, "schema.json")

    @property
    def schema(self) -> CorpusSchema | None:
        if not os.path.exists(self.schema_path):
            return None
        with open(self.schema_path, "r", encoding="utf-8") as fh:
            return CorpusSchema.from_dict(json.load(fh))

    def put_schema(self, schema: CorpusSchema) -> None:
        atomic_write_json(self.schema_path, schema.to_dict())

    # -- images ---------------------------------------------------------------

    def put_image(self, data: bytes) -> str:
        """Store bytes content-addressed; returns the image name."""
        name = hashlib.sha256(data).hexdigest() + ".png"
        path = os.path.join(self.images_dir, name)
        if not os.path.exists(path):
            atomic_write_bytes(path, data)
        return name

    def image_path(self, name: str) -> str:
        return os.path.join(self.images_dir, name)

    def has_image(self, name: str) -> bool:
        return os.path.isfile(self.image_path(name))

    # -- ingest ---------------------------------------------------------------

    def ingest_corpus(self, records: Sequence[AdRecord], images_dir: str, schema: CorpusSchema) -> int:
        """Copy a corpus in, rewriting frame references to content-addressed
        image names."""
        self.put_schema(schema)
        for record in records:
            new_frames = []
            for ref in record.creative.frames:
                with open(os.path.join(images_dir, ref), "rb") as fh:
                    new_frames.append(self.put_image(fh.read()))
            creative = type(record.creative)(
                creative_id=record.creative.creative_id,
                headline=record.creative.headline,
                body=record.creative.body,
                call_to_action=record.creative.call_to_action,
                frames=tuple(new_frames),
                brand=record.creative.brand,
            )
            rec = type(record)(
                ad_id=record.ad_id,
                campaign_id=record.campaign_id,
                adset_id=record.adset_id,
                objective=record.objective,
                creative=creative,
                continuous_features=record.continuous_features,
                categorical_features=record.categorical_features,
                observed_ctr=record.observed_ctr,
            )
            if rec.ad_id not in self._ads:
                self._order.append(rec.ad_id)
            self._ads[rec.ad_id] = rec
        self._flush_ads()
        return len(records)

    # -- misc paths -------------------------------------------------------------

    def model_path(self, name: str) -> str:
        return os.path.join(self.models_dir, name)

    def list_models(self) -> list[str]:
        return sorted(
            d
            for d in os.listdir(self.models_dir)
            if os.path.isdir(os.path.join(self.models_dir, d))
        )

    def job_path(self, job_id: str) -> str:
        return os.path.join(self.jobs_dir, job_id + ".json")
