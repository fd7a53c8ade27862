"""Core domain model: ads, creatives, CTR classes, and training rows.

All types are immutable after validation and safe to share across threads.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np


class CtrClass(enum.IntEnum):
    """Performance bucket of an ad, ordered worst to best."""

    BELOW_AVERAGE = 0
    AVERAGE = 1
    ABOVE_AVERAGE = 2

    @property
    def label(self) -> str:
        return _CLASS_LABELS[self]


_CLASS_LABELS = {
    CtrClass.BELOW_AVERAGE: "below average",
    CtrClass.AVERAGE: "average",
    CtrClass.ABOVE_AVERAGE: "above average",
}

CLASS_ORDER = (CtrClass.BELOW_AVERAGE, CtrClass.AVERAGE, CtrClass.ABOVE_AVERAGE)


@dataclass(frozen=True)
class ImageBuffer:
    """An RGB image; pixels is an H x W x 3 uint8 array."""

    height: int
    width: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"image dimensions must be positive, got {self.height}x{self.width}")
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.shape != (self.height, self.width, 3):
            raise ValueError(f"pixel array shape {px.shape} does not match {self.height}x{self.width}x3")
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "ImageBuffer":
        px = np.asarray(pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 array, got shape {px.shape}")
        return cls(height=px.shape[0], width=px.shape[1], pixels=px)

    @classmethod
    def blank(cls, size: int) -> "ImageBuffer":
        """The reserved all-zero frame used for creatives without images."""
        return cls(height=size, width=size, pixels=np.zeros((size, size, 3), dtype=np.uint8))


@dataclass(frozen=True)
class Creative:
    creative_id: str
    headline: str = ""
    body: str = ""
    call_to_action: str = ""
    frames: tuple[str, ...] = ()
    brand: str = ""

    def joined_text(self) -> str:
        """Headline, body, and call to action joined with single spaces."""
        return " ".join(part for part in (self.headline, self.body, self.call_to_action))


@dataclass(frozen=True)
class AdRecord:
    ad_id: str
    campaign_id: str
    adset_id: str
    objective: str
    creative: Creative
    continuous_features: Mapping[str, float] = field(default_factory=dict)
    categorical_features: Mapping[str, str] = field(default_factory=dict)
    observed_ctr: float | None = None


@dataclass(frozen=True)
class FeatureBundle:
    """Model-facing encoded inputs for one (ad, frame) pair."""

    continuous: np.ndarray       # float32, corpus schema order
    categorical_ids: np.ndarray  # int64, one id per categorical field
    token_ids: np.ndarray        # int64, length = max_len
    image: ImageBuffer           # resized to the model input size


@dataclass(frozen=True)
class TrainingRow:
    bundle: FeatureBundle
    label: CtrClass
    source_ad_id: str
    frame_index: int = 0


class ViolationCode(str, enum.Enum):
    MISSING_FIELD = "missing_field"
    CTR_OUT_OF_RANGE = "ctr_out_of_range"
    SCHEMA_MISMATCH = "schema_mismatch"
    UNRESOLVABLE_IMAGE = "unresolvable_image"


@dataclass(frozen=True)
class FieldViolation:
    code: ViolationCode
    field: str
    message: str


class AdValidationError(ValueError):
    """Raised by validate_ad; carries every violated field, not just the first."""

    def __init__(self, ad_id: str, violations: Sequence[FieldViolation]):
        self.ad_id = ad_id
        self.violations = tuple(violations)
        lines = ", ".join(f"{v.field}: {v.message}" for v in self.violations)
        super().__init__(f"ad {ad_id!r} failed validation: {lines}")

    def codes(self) -> set[ViolationCode]:
        return {v.code for v in self.violations}


class PreprocessFailure(RuntimeError):
    """An image frame could not be read or converted during expansion."""


class FrameResolver(Protocol):
    """Resolves a creative's frame reference to a readable image, or reports failure."""

    def resolvable(self, ref: str) -> bool: ...


class Preprocessor(Protocol):
    """Turns a validated ad plus one frame into a model-ready FeatureBundle.

    frame_ref is None for the blank-frame sentinel.
    """

    def bundle(self, record: AdRecord, frame_ref: str | None) -> FeatureBundle: ...


@dataclass(frozen=True)
class FeatureSchema:
    """The fixed per-corpus tabular schema every record must conform to."""

    continuous: tuple[str, ...]
    categorical: tuple[str, ...]


def validate_ad(
    record: AdRecord,
    schema: FeatureSchema,
    frame_resolver: FrameResolver | None = None,
) -> AdRecord:
    """Check every invariant of an AdRecord against the corpus schema.

    Returns the record unchanged if valid; otherwise raises AdValidationError
    listing all violations. Idempotent: a validated record revalidates clean.
    """
    violations: list[FieldViolation] = []

    for name, value in (
        ("ad_id", record.ad_id),
        ("campaign_id", record.campaign_id),
        ("adset_id", record.adset_id),
    ):
        if not value:
            violations.append(FieldViolation(ViolationCode.MISSING_FIELD, name, "must be non-empty"))
    if not record.creative.creative_id:
        violations.append(
            FieldViolation(ViolationCode.MISSING_FIELD, "creative.creative_id", "must be non-empty")
        )

    if record.observed_ctr is not None:
        ctr = record.observed_ctr
        if not np.isfinite(ctr) or ctr < 0.0 or ctr > 1.0:
            violations.append(
                FieldViolation(
                    ViolationCode.CTR_OUT_OF_RANGE,
                    "observed_ctr",
                    f"{ctr} outside [0, 1]",
                )
            )

    violations.extend(_schema_violations("continuous", record.continuous_features, schema.continuous))
    violations.extend(_schema_violations("categorical", record.categorical_features, schema.categorical))

    if frame_resolver is not None:
        for i, ref in enumerate(record.creative.frames):
            if not frame_resolver.resolvable(ref):
                violations.append(
                    FieldViolation(
                        ViolationCode.UNRESOLVABLE_IMAGE,
                        f"creative.frames[{i}]",
                        f"image reference {ref!r} cannot be resolved",
                    )
                )

    if violations:
        raise AdValidationError(record.ad_id, violations)
    return record


def _schema_violations(
    kind: str, features: Mapping[str, object], expected: tuple[str, ...]
) -> list[FieldViolation]:
    have = set(features.keys())
    want = set(expected)
    out = []
    for name in sorted(want - have):
        out.append(
            FieldViolation(ViolationCode.SCHEMA_MISMATCH, f"{kind}.{name}", "missing from record")
        )
    for name in sorted(have - want):
        out.append(
            FieldViolation(ViolationCode.SCHEMA_MISMATCH, f"{kind}.{name}", "not in corpus schema")
        )
    return out


def expand_creative(
    record: AdRecord, label: CtrClass, preprocess: Preprocessor
) -> list[TrainingRow]:
    """One TrainingRow per image frame; a frameless creative yields a single
    row built on the reserved all-zero blank frame.

    All rows share the record's tabular/text features and label.
    """
    frames: Sequence[str | None] = record.creative.frames or (None,)
    rows = []
    for index, ref in enumerate(frames):
        bundle = preprocess.bundle(record, ref)
        rows.append(
            TrainingRow(bundle=bundle, label=label, source_ad_id=record.ad_id, frame_index=index)
        )
    return rows
