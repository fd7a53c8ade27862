"""Schemas for structured LLM outputs: per-ad insights, brand and comparative
reports, user personas, and text-image prompt specs.

The *Payload models are exactly what the model must emit (strict JSON, closed
vocabularies); the full records add pipeline-side provenance fields.
"""
from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

ARCHETYPES = (
    "Innocent",
    "Everyman",
    "Hero",
    "Outlaw",
    "Explorer",
    "Creator",
    "Ruler",
    "Magician",
    "Lover",
    "Caregiver",
    "Jester",
    "Sage",
)

TONES = ("informative", "playful", "urgent", "aspirational", "reassuring", "humorous")

Archetype = Literal[
    "Innocent",
    "Everyman",
    "Hero",
    "Outlaw",
    "Explorer",
    "Creator",
    "Ruler",
    "Magician",
    "Lover",
    "Caregiver",
    "Jester",
    "Sage",
]
Tone = Literal["informative", "playful", "urgent", "aspirational", "reassuring", "humorous"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AdInsightPayload(_Strict):
    product: str = Field(min_length=1)
    advertised_offer: str
    human_need: str
    human_insight: str
    archetype: Archetype
    tone: Tone
    target_audience: str
    topical_category: str
    call_to_action: str


class AdInsightRecord(AdInsightPayload):
    ad_id: str
    retry_count: int = Field(ge=0, default=0)
    backend_id: str = ""
    prompt_version: int = 1


INSIGHT_CSV_COLUMNS = (
    "ad_id",
    "product",
    "advertised_offer",
    "human_need",
    "human_insight",
    "archetype",
    "tone",
    "target_audience",
    "topical_category",
    "call_to_action",
    "retry_count",
    "backend_id",
    "prompt_version",
)


class BrandGoal(_Strict):
    value: str
    goal: str


class PrimaryPersona(_Strict):
    name: str = Field(min_length=1)
    description: str = Field(min_length=1)
    supporting_ad_ids: list[str] = Field(min_length=1)


class BrandPersonaPayload(_Strict):
    brand_values: list[str] = Field(min_length=1)
    goals: list[BrandGoal]
    primary_persona: PrimaryPersona


class BrandPersonaReport(BrandPersonaPayload):
    brand: str
    generated_at: str
    input_ad_ids: list[str]


class BrandPositioning(_Strict):
    brand: str
    summary: str = Field(min_length=1)


class ComparativePayload(_Strict):
    positioning: list[BrandPositioning] = Field(min_length=2)
    distinguishing_factors: list[str] = Field(min_length=1)


class ComparativeReport(ComparativePayload):
    brands: list[str] = Field(min_length=2, max_length=8)
    record_counts: dict[str, int]
    generated_at: str


class UserPersonaPayload(_Strict):
    name: str = Field(min_length=1)
    age_range: str = Field(min_length=1)
    occupation: str = Field(min_length=1)
    narrative: str = Field(min_length=1)


class ImagePromptPayload(_Strict):
    prompt_text: str = Field(min_length=1)
    negative_prompt: Optional[str] = None
    style_tags: list[str] = Field(default_factory=list)


class ImagePromptSpec(ImagePromptPayload):
    source_persona_id: str


class UserPersona(UserPersonaPayload):
    persona_id: str
    interests: list[str] = Field(min_length=1)
    temperature: float
    image_prompt: Optional[ImagePromptSpec] = None
    image_ref: Optional[str] = None
