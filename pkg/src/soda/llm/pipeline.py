"""Per-ad insight extraction with schema repair, tabular storage, and the
aggregate analyses: brand persona, comparative, user personas, image prompts.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from typing import Callable, Mapping, Sequence

from pydantic import ValidationError

from ..domain import AdRecord
from .backends import ImageBackend, ImageBackendError, LlmBackend
from .records import (
    AdInsightPayload,
    AdInsightRecord,
    ARCHETYPES,
    BrandPersonaPayload,
    BrandPersonaReport,
    ComparativePayload,
    ComparativeReport,
    ImagePromptPayload,
    ImagePromptSpec,
    INSIGHT_CSV_COLUMNS,
    TONES,
    UserPersona,
    UserPersonaPayload,
)
from .templates import PromptTemplate, render_prompt

EPOCH_ISO = "1970-01-01T00:00:00+00:00"


class ExtractionFailed(RuntimeError):
    def __init__(self, ad_id: str, attempts: Sequence[str]):
        self.ad_id = ad_id
        self.attempts = list(attempts)
        super().__init__(f"extraction failed for ad {ad_id!r} after {len(attempts)} attempts")


class AnalysisFailed(RuntimeError):
    pass


class UnknownAdReference(AnalysisFailed):
    pass


class UnknownBrand(AnalysisFailed):
    pass


def resolve_clock(backend: LlmBackend, clock: Callable[[], str] | None = None) -> Callable[[], str]:
    """Timestamps for reports: injected clock wins; deterministic backends get
    a fixed epoch so repeated runs are byte-identical; otherwise wall clock."""
    if clock is not None:
        return clock
    if getattr(backend, "deterministic", False):
        return lambda: EPOCH_ISO
    return lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")


def _parse_json_object(text: str) -> dict:
    data = json.loads(text.strip())
    if not isinstance(data, dict):
        raise ValueError(f"expected a JSON object, got {type(data).__name__}")
    return data


def _short_error(exc: Exception, limit: int = 600) -> str:
    msg = str(exc)
    return msg if len(msg) <= limit else msg[:limit] + "..."


def _repair_prompt(user_text: str, error: str) -> str:
    return (
        f"{user_text}\n\nYour previous response was invalid: {error}\n"
        "Respond again with exactly one valid JSON object."
    )


def extraction_prompt(ad: AdRecord, template: PromptTemplate) -> tuple[str, str]:
    """The exact (system, user) texts the extraction op sends for an ad."""
    ad_json = json.dumps(
        {
            "ad_id": ad.ad_id,
            "brand": ad.creative.brand,
            "headline": ad.creative.headline,
            "body": ad.creative.body,
            "call_to_action": ad.creative.call_to_action,
            "objective": ad.objective,
            "campaign_id": ad.campaign_id,
        },
        sort_keys=True,
    )
    variables = {
        "ad_json": ad_json,
        "archetypes": ", ".join(ARCHETYPES),
        "tones": ", ".join(TONES),
    }
    return render_prompt(template, variables)


def extract_insights(
    ad: AdRecord,
    backend: LlmBackend,
    template: PromptTemplate,
    max_retries: int = 2,
) -> AdInsightRecord:
    """Extract the standardized insight fields for one ad at temperature 0.

    Invalid completions are re-prompted with the validation error appended,
    up to max_retries; the returned record carries the retry count used.
    """
    system_text, user_text = extraction_prompt(ad, template)

    attempts: list[str] = []
    prompt = user_text
    for attempt in range(max_retries + 1):
        completion = backend.complete(system_text, prompt, temperature=0.0, seed_tag=ad.ad_id)
        attempts.append(completion)
        try:
            payload = AdInsightPayload.model_validate(_parse_json_object(completion))
        except (ValueError, ValidationError) as exc:
            prompt = _repair_prompt(user_text, _short_error(exc))
            continue
        return AdInsightRecord(
            ad_id=ad.ad_id,
            retry_count=attempt,
            backend_id=backend.backend_id,
            prompt_version=template.version,
            **payload.model_dump(),
        )
    raise ExtractionFailed(ad.ad_id, attempts)


def extract_many(
    ads: Sequence[AdRecord],
    backend: LlmBackend,
    template: PromptTemplate,
    max_retries: int = 2,
    workers: int = 4,
) -> list[AdInsightRecord]:
    """Extraction over a batch with bounded parallelism, results in input order."""
    if workers <= 1 or len(ads) <= 1:
        return [extract_insights(ad, backend, template, max_retries) for ad in ads]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(extract_insights, ad, backend, template, max_retries) for ad in ads]
        return [f.result() for f in futures]


def insights_csv_text(records: Sequence[AdInsightRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
    writer.writerow(INSIGHT_CSV_COLUMNS)
    for rec in records:
        d = rec.model_dump()
        writer.writerow([d[col] for col in INSIGHT_CSV_COLUMNS])
    return buf.getvalue()


def insights_to_table(records: Sequence[AdInsightRecord], path: str) -> int:
    """Write one CSV row per record under the fixed documented header."""
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(insights_csv_text(records))
    except OSError as exc:
        raise IOError(f"cannot write insight table {path!r}: {exc}") from exc
    return len(records)


def load_insights_table(path: str) -> list[AdInsightRecord]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            row["retry_count"] = int(row["retry_count"])
            row["prompt_version"] = int(row["prompt_version"])
            out.append(AdInsightRecord.model_validate(row))
    return out


def brand_persona_prompt(
    brand: str, records: Sequence[AdInsightRecord], template: PromptTemplate
) -> tuple[str, str]:
    ad_ids = [r.ad_id for r in records]
    return render_prompt(
        template,
        {"brand": brand, "ad_ids": json.dumps(ad_ids), "insights_csv": insights_csv_text(records)},
    )


def brand_persona_analysis(
    brand: str,
    records: Sequence[AdInsightRecord],
    backend: LlmBackend,
    template: PromptTemplate,
    clock: Callable[[], str] | None = None,
) -> BrandPersonaReport:
    """Summarize one brand's values, goals, and primary persona from its
    extracted insights; supporting ad ids must come from the inputs (one
    repair retry, then UnknownAdReference)."""
    if not records:
        raise ValueError(f"no insight records for brand {brand!r}")
    now = resolve_clock(backend, clock)
    ad_ids = [r.ad_id for r in records]
    system_text, user_text = brand_persona_prompt(brand, records, template)

    prompt = user_text
    last_error: Exception | None = None
    for _attempt in range(2):
        completion = backend.complete(system_text, prompt, temperature=0.0, seed_tag=brand)
        try:
            payload = BrandPersonaPayload.model_validate(_parse_json_object(completion))
        except (ValueError, ValidationError) as exc:
            last_error = AnalysisFailed(f"brand persona for {brand!r}: {_short_error(exc)}")
            prompt = _repair_prompt(user_text, _short_error(exc))
            continue
        unknown = [a for a in payload.primary_persona.supporting_ad_ids if a not in ad_ids]
        if unknown:
            last_error = UnknownAdReference(
                f"brand persona for {brand!r} cites unknown ad ids: {unknown}"
            )
            prompt = _repair_prompt(
                user_text, f"supporting_ad_ids {unknown} are not in AD_IDS; use only listed ids"
            )
            continue
        return BrandPersonaReport(
            brand=brand, generated_at=now(), input_ad_ids=ad_ids, **payload.model_dump()
        )
    raise last_error if last_error is not None else AnalysisFailed("brand persona analysis failed")


def comparative_prompt(
    records_by_brand: Mapping[str, Sequence[AdInsightRecord]], template: PromptTemplate
) -> tuple[str, str]:
    brands = list(records_by_brand.keys())
    all_records = [r for b in brands for r in records_by_brand[b]]
    return render_prompt(
        template,
        {"brands": json.dumps(brands), "insights_csv": insights_csv_text(all_records)},
    )


def comparative_analysis(
    records_by_brand: Mapping[str, Sequence[AdInsightRecord]],
    backend: LlmBackend,
    template: PromptTemplate,
    clock: Callable[[], str] | None = None,
) -> ComparativeReport:
    """Contrast 2-8 brands; any brand named outside the input set triggers one
    repair retry, then UnknownBrand."""
    brands = list(records_by_brand.keys())
    if not 2 <= len(brands) <= 8:
        raise ValueError(f"comparative analysis needs 2-8 brands, got {len(brands)}")
    for b, recs in records_by_brand.items():
        if not recs:
            raise ValueError(f"brand {b!r} has no insight records")
    now = resolve_clock(backend, clock)
    system_text, user_text = comparative_prompt(records_by_brand, template)

    prompt = user_text
    last_error: Exception | None = None
    for _attempt in range(2):
        completion = backend.complete(system_text, prompt, temperature=0.0, seed_tag=",".join(brands))
        try:
            payload = ComparativePayload.model_validate(_parse_json_object(completion))
        except (ValueError, ValidationError) as exc:
            last_error = AnalysisFailed(f"comparative analysis: {_short_error(exc)}")
            prompt = _repair_prompt(user_text, _short_error(exc))
            continue
        named = [p.brand for p in payload.positioning]
        unknown = [b for b in named if b not in brands]
        if unknown:
            last_error = UnknownBrand(f"comparative analysis names unknown brands: {unknown}")
            prompt = _repair_prompt(
                user_text, f"brands {unknown} are not in BRANDS; mention only listed brands"
            )
            continue
        return ComparativeReport(
            brands=brands,
            record_counts={b: len(records_by_brand[b]) for b in brands},
            generated_at=now(),
            **payload.model_dump(),
        )
    raise last_error if last_error is not None else AnalysisFailed("comparative analysis failed")


PERSONA_TEMPERATURE = 0.7


def user_persona_prompt(interests: Sequence[str], template: PromptTemplate) -> tuple[str, str]:
    return render_prompt(template, {"interests": json.dumps([str(i) for i in interests])})


def image_prompt_inputs(
    persona: UserPersona, few_shot_examples: Sequence[str], template: PromptTemplate
) -> tuple[str, str]:
    return render_prompt(
        template,
        {"narrative": persona.narrative, "examples": json.dumps([str(e) for e in few_shot_examples])},
    )


def generate_user_persona(
    interests: Sequence[str],
    backend: LlmBackend,
    template: PromptTemplate,
    clock: Callable[[], str] | None = None,
) -> UserPersona:
    """Invent a plausible audience member for an interest list (temperature
    0.7, recorded on the persona); interests are echoed verbatim."""
    interests = [str(i) for i in interests]
    if not interests:
        raise ValueError("interests must be non-empty")
    system_text, user_text = user_persona_prompt(interests, template)

    prompt = user_text
    last_error: Exception | None = None
    for _attempt in range(2):
        completion = backend.complete(
            system_text, prompt, temperature=PERSONA_TEMPERATURE, seed_tag=",".join(interests)
        )
        try:
            payload = UserPersonaPayload.model_validate(_parse_json_object(completion))
        except (ValueError, ValidationError) as exc:
            last_error = AnalysisFailed(f"user persona: {_short_error(exc)}")
            prompt = _repair_prompt(user_text, _short_error(exc))
            continue
        persona_id = "persona-" + hashlib.sha256(
            ("|".join(interests) + "|" + payload.name).encode("utf-8")
        ).hexdigest()[:10]
        return UserPersona(
            persona_id=persona_id,
            interests=interests,
            temperature=PERSONA_TEMPERATURE,
            **payload.model_dump(),
        )
    raise last_error if last_error is not None else AnalysisFailed("user persona generation failed")


def generate_image_prompt(
    persona: UserPersona,
    few_shot_examples: Sequence[str],
    backend: LlmBackend,
    template: PromptTemplate,
) -> ImagePromptSpec:
    """Turn a persona narrative plus example prompts into a text-image prompt."""
    examples = [str(e) for e in few_shot_examples]
    if not examples:
        raise ValueError("need at least one few-shot example prompt")
    system_text, user_text = image_prompt_inputs(persona, examples, template)

    prompt = user_text
    last_error: Exception | None = None
    for _attempt in range(2):
        completion = backend.complete(system_text, prompt, temperature=0.0, seed_tag=persona.persona_id)
        try:
            payload = ImagePromptPayload.model_validate(_parse_json_object(completion))
        except (ValueError, ValidationError) as exc:
            last_error = AnalysisFailed(f"image prompt: {_short_error(exc)}")
            prompt = _repair_prompt(user_text, _short_error(exc))
            continue
        return ImagePromptSpec(source_persona_id=persona.persona_id, **payload.model_dump())
    raise last_error if last_error is not None else AnalysisFailed("image prompt generation failed")


DEFAULT_FEW_SHOT_PROMPTS = (
    "portrait of a young engineer in a sunlit studio, candid, 35mm photo",
    "headshot of a smiling teacher in front of a bookshelf, natural light",
)


def generate_persona_image(spec: ImagePromptSpec, image_backend: ImageBackend, out_dir: str) -> str:
    """Render the persona illustration through the pluggable image backend and
    store it content-addressed; returns the stored file name."""
    try:
        data = image_backend.generate(spec.prompt_text)
    except Exception as exc:
        raise ImageBackendError(f"image backend failed: {exc}", spec=spec) from exc
    os.makedirs(out_dir, exist_ok=True)
    name = hashlib.sha256(data).hexdigest()[:16] + ".png"
    path = os.path.join(out_dir, name)
    if not os.path.exists(path):
        with open(path, "wb") as fh:
            fh.write(data)
    return name
