"""Serving logic shared by the HTTP API and the CLI: ad scoring, heatmap
generation, and the background analysis runner."""
from __future__ import annotations

import base64
import binascii
import io
import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import AdRecord, CtrClass, FeatureBundle, ImageBuffer, validate_ad
from .fusion import FusionModel, load_model
from .imaging import load_image, resize_image
from .ingestion import BundleBuilder, record_from_json_dict
from .llm.backends import LlmBackend, MockImageBackend, RemoteChat, ScriptedMock, offline_responder
from .llm.pipeline import (
    DEFAULT_FEW_SHOT_PROMPTS,
    brand_persona_analysis,
    comparative_analysis,
    extract_many,
    generate_image_prompt,
    generate_persona_image,
    generate_user_persona,
    insights_to_table,
    resolve_clock,
)
from .llm.templates import builtin_templates
from .saliency import SaliencyMap, render_overlay, rollout, upsample
from .store import FileStore

DATA_URI_PREFIX = "data:"


def make_backend(name: str, store: FileStore | None = None) -> LlmBackend:
    if name == "mock":
        return ScriptedMock(default_responder=offline_responder)
    if name == "remote":
        audit = os.path.join(store.root, "llm_audit.jsonl") if store is not None else None
        return RemoteChat(audit_log_path=audit)
    raise ValueError(f"unknown backend {name!r}; expected 'mock' or 'remote'")


def decode_frame_ref(ref: str, store: FileStore | None, images_dir: str | None = None) -> bytes:
    """A frame reference is a stored image name, a plain file under a corpus
    images directory, or a base64 data URI."""
    if ref.startswith(DATA_URI_PREFIX):
        try:
            _, b64 = ref.split(",", 1)
            return base64.b64decode(b64, validate=True)
        except (ValueError, binascii.Error) as exc:
            raise ValueError(f"malformed data URI frame: {exc}") from exc
    candidates = []
    if store is not None:
        candidates.append(store.image_path(ref))
    if images_dir:
        candidates.append(os.path.join(images_dir, ref))
    for path in candidates:
        if os.path.isfile(path):
            with open(path, "rb") as fh:
                return fh.read()
    raise FileNotFoundError(f"cannot resolve image frame {ref!r}")


class ModelService:
    """One loaded model plus the preprocessing context to score raw ads."""

    def __init__(self, model: FusionModel, store: FileStore | None = None, images_dir: str | None = None):
        if model.schema is None:
            raise ValueError("model artifact carries no corpus schema; retrain with one")
        self.model = model
        self.store = store
        self.images_dir = images_dir
        enc = model.config.encoder
        self.builder = BundleBuilder(
            schema=model.schema,
            images_dir=store.images_dir if store is not None else (images_dir or ""),
            vocab=model.vocab,
            max_len=enc.max_len,
            image_size=enc.image_size,
        )

    @classmethod
    def open(
        cls, model_path: str, store: FileStore | None = None, images_dir: str | None = None
    ) -> "ModelService":
        return cls(load_model(model_path), store=store, images_dir=images_dir)

    def _frame_bytes(self, ref: str) -> bytes:
        return decode_frame_ref(ref, self.store, self.images_dir)

    def _frame_buffer(self, ref: str | None) -> ImageBuffer:
        size = self.model.config.encoder.image_size
        if ref is None:
            return ImageBuffer.blank(size)
        data = self._frame_bytes(ref)
        from PIL import Image

        with Image.open(io.BytesIO(data)) as im:
            buf = ImageBuffer.from_array(np.asarray(im.convert("RGB"), dtype=np.uint8))
        return resize_image(buf, size)

    def bundles_for(self, record: AdRecord) -> list[FeatureBundle]:
        refs: Sequence[str | None] = record.creative.frames or (None,)
        bundles = []
        for ref in refs:
            image = self._frame_buffer(ref)
            base = self.builder.bundle(record, None)  # tabular/text parts; blank image
            bundles.append(
                FeatureBundle(
                    continuous=base.continuous,
                    categorical_ids=base.categorical_ids,
                    token_ids=base.token_ids,
                    image=image,
                )
            )
        return bundles

    def validate(self, record: AdRecord) -> AdRecord:
        return validate_ad(record, self.model.schema.feature_schema)

    def score(self, record: AdRecord) -> dict:
        """Per-ad prediction: frame probabilities averaged before argmax."""
        bundles = self.bundles_for(record)
        probs = self.model.predict_proba_many(bundles).mean(axis=0)
        probs = probs / probs.sum()
        predicted = CtrClass(int(np.argmax(probs)))
        return {
            "ad_id": record.ad_id,
            "model_id": self.model.model_id,
            "probabilities": [float(p) for p in probs],
            "class_order": [c.label for c in CtrClass],
            "predicted_class": predicted.label,
            "n_frames_scored": len(bundles),
        }

    def heatmap(self, record: AdRecord, frame: int = 0, alpha: float = 0.5):
        """Overlay + saliency grid for one frame at the banner's native size."""
        if not record.creative.frames:
            raise ValueError(f"ad {record.ad_id!r} has no image frames")
        if not 0 <= frame < len(record.creative.frames):
            raise IndexError(
                f"frame {frame} out of range; ad has {len(record.creative.frames)} frames"
            )
        ref = record.creative.frames[frame]
        bundles = self.bundles_for(record)
        result = self.model.forward(bundles[frame], capture_attention=True)
        saliency = rollout(result.attention)

        data = self._frame_bytes(ref)
        from PIL import Image

        with Image.open(io.BytesIO(data)) as im:
            banner = ImageBuffer.from_array(np.asarray(im.convert("RGB"), dtype=np.uint8))
        field = upsample(saliency, banner.height, banner.width)
        overlay = render_overlay(banner, field, alpha=alpha)
        return overlay, saliency, result


def record_from_payload(payload: dict) -> AdRecord:
    return record_from_json_dict(payload)


# --- background analysis runner ----------------------------------------------


def _records_for_brands(store: FileStore, brands: Sequence[str] | None) -> list[AdRecord]:
    if brands:
        records = [r for b in brands for r in store.ads_for_brand(b)]
        missing = [b for b in brands if not store.ads_for_brand(b)]
        if missing:
            raise ValueError(f"no stored ads for brands: {missing}")
        return records
    return store.list_ads()


def analysis_runner(kind: str, params: dict, store: FileStore) -> str:
    """Executes one analysis job; returns the result path relative to the
    store root. Used by the job executor and exercised directly in tests."""
    templates = builtin_templates()
    backend = make_backend(params.get("backend", "mock"), store)
    workers = int(params.get("workers", 4))
    clock = resolve_clock(backend)

    if kind == "extraction":
        brands = params.get("brands")
        records = _records_for_brands(store, brands)
        if not records:
            raise ValueError("no ads in store to extract from")
        insights = extract_many(
            records, backend, templates["extract-ad-insights"], workers=workers
        )
        tag = params.get("tag", "insights")
        out = os.path.join(store.insights_dir, f"{tag}.csv")
        insights_to_table(insights, out)
        return os.path.relpath(out, store.root)

    if kind == "brand_persona":
        brand = params["brand"]
        records = _records_for_brands(store, [brand])
        insights = extract_many(records, backend, templates["extract-ad-insights"], workers=workers)
        report = brand_persona_analysis(
            brand, insights, backend, templates["brand-persona-analysis"], clock=clock
        )
        out = os.path.join(store.reports_dir, f"brand_persona_{_slug(brand)}.json")
        _write_json(out, report.model_dump())
        return os.path.relpath(out, store.root)

    if kind == "comparative":
        brands = list(params["brands"])
        by_brand = {}
        for brand in brands:
            records = store.ads_for_brand(brand)
            if not records:
                raise ValueError(f"no stored ads for brand {brand!r}")
            by_brand[brand] = extract_many(
                records, backend, templates["extract-ad-insights"], workers=workers
            )
        report = comparative_analysis(
            by_brand, backend, templates["comparative-analysis"], clock=clock
        )
        out = os.path.join(store.reports_dir, f"comparative_{_slug('_'.join(brands))}.json")
        _write_json(out, report.model_dump())
        return os.path.relpath(out, store.root)

    if kind == "persona_batch":
        interest_sets = params["interest_sets"]
        if not interest_sets:
            raise ValueError("persona_batch needs at least one interest list")
        image_backend = MockImageBackend()
        personas = []
        for interests in interest_sets:
            persona = generate_user_persona(
                interests, backend, templates["user-persona-generation"], clock=clock
            )
            spec = generate_image_prompt(
                persona, list(DEFAULT_FEW_SHOT_PROMPTS), backend, templates["image-prompt-generation"]
            )
            image_ref = generate_persona_image(spec, image_backend, store.images_dir)
            persona = persona.model_copy(update={"image_prompt": spec, "image_ref": image_ref})
            personas.append(persona.model_dump())
        out = os.path.join(store.reports_dir, f"personas_{len(personas)}.json")
        _write_json(out, {"personas": personas})
        return os.path.relpath(out, store.root)

    raise ValueError(f"unknown analysis kind {kind!r}")


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() else "-" for c in text.lower()).strip("-")[:60]


def _write_json(path: str, payload) -> None:
    from .store import atomic_write_json

    atomic_write_json(path, payload)
