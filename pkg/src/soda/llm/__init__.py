from .backends import (
    ImageBackendError,
    LlmBackend,
    MockImageBackend,
    RemoteChat,
    ScriptedMock,
    offline_responder,
)
from .pipeline import (
    AnalysisFailed,
    ExtractionFailed,
    UnknownAdReference,
    UnknownBrand,
    brand_persona_analysis,
    comparative_analysis,
    extract_insights,
    extract_many,
    generate_image_prompt,
    generate_persona_image,
    generate_user_persona,
    insights_to_table,
    load_insights_table,
)
from .records import (
    ARCHETYPES,
    AdInsightRecord,
    BrandPersonaReport,
    ComparativeReport,
    ImagePromptSpec,
    TONES,
    UserPersona,
)
from .templates import MissingPlaceholder, PromptTemplate, builtin_templates, render_prompt
