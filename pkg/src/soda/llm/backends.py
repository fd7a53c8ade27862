"""Completion and image backends: a deterministic scripted mock for tests and
offline runs, and an OpenAI-compatible HTTP client with an audit log."""
from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from typing import Callable, Protocol, Sequence

from .records import ARCHETYPES, TONES


class LlmBackend(Protocol):
    backend_id: str
    deterministic: bool

    def complete(
        self,
        system_text: str,
        user_text: str,
        temperature: float = 0.0,
        max_tokens: int = 1024,
        seed_tag: str = "",
    ) -> str: ...


class ScriptedMock:
    """Replays canned responses keyed by a hash of (system, user, temperature).

    Each key holds a response sequence; successive calls consume it and the
    last entry repeats once exhausted. A repair re-prompt extends the original
    user text, so sequences also serve retries via prefix matching. When no
    script matches, the default responder (if any) synthesizes a reply.
    """

    deterministic = True

    def __init__(
        self,
        default_responder: Callable[[str, str], str] | None = None,
        backend_id: str = "scripted-mock",
    ):
        self.backend_id = backend_id
        self._default = default_responder
        self._entries: list[dict] = []
        self._by_key: dict[str, dict] = {}
        self._lock = threading.Lock()
        self.calls: list[dict] = []

    @staticmethod
    def key_for(system_text: str, user_text: str, temperature: float = 0.0) -> str:
        payload = json.dumps([system_text, user_text, round(temperature, 6)], sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def script(
        self, system_text: str, user_text: str, responses: Sequence[str], temperature: float = 0.0
    ) -> None:
        entry = {
            "key": self.key_for(system_text, user_text, temperature),
            "system": system_text,
            "user": user_text,
            "temperature": round(temperature, 6),
            "responses": list(responses),
            "cursor": 0,
        }
        with self._lock:
            self._entries.append(entry)
            self._by_key[entry["key"]] = entry

    def _match(self, system_text: str, user_text: str, temperature: float) -> dict | None:
        key = self.key_for(system_text, user_text, temperature)
        entry = self._by_key.get(key)
        if entry is not None:
            return entry
        # a repair re-prompt appends the validation error to the original user
        # text; fall back to the longest scripted prefix
        best = None
        for candidate in self._entries:
            if (
                candidate["system"] == system_text
                and candidate["temperature"] == round(temperature, 6)
                and user_text.startswith(candidate["user"])
            ):
                if best is None or len(candidate["user"]) > len(best["user"]):
                    best = candidate
        return best

    def complete(
        self,
        system_text: str,
        user_text: str,
        temperature: float = 0.0,
        max_tokens: int = 1024,
        seed_tag: str = "",
    ) -> str:
        with self._lock:
            self.calls.append(
                {
                    "system": system_text,
                    "user": user_text,
                    "temperature": temperature,
                    "seed_tag": seed_tag,
                }
            )
            entry = self._match(system_text, user_text, temperature)
            if entry is not None:
                responses = entry["responses"]
                idx = min(entry["cursor"], len(responses) - 1)
                entry["cursor"] += 1
                return responses[idx]
        if self._default is not None:
            return self._default(system_text, user_text)
        raise KeyError(
            f"no scripted response for prompt hash {self.key_for(system_text, user_text, temperature)[:12]}"
        )

    @property
    def n_calls(self) -> int:
        return len(self.calls)


class RemoteChat:
    """OpenAI-compatible chat-completions client.

    Endpoint and key come from SODA_LLM_URL / SODA_LLM_KEY unless given.
    Every request/response pair (including failures) is appended to the
    JSON-lines audit log.
    """

    deterministic = False

    def __init__(
        self,
        url: str | None = None,
        api_key: str | None = None,
        model: str = "gpt-3.5-turbo",
        audit_log_path: str | None = None,
        timeout: float = 60.0,
        min_request_interval: float = 0.0,
    ):
        self.url = url or os.environ.get("SODA_LLM_URL", "")
        if not self.url:
            raise ValueError("no endpoint URL: pass url= or set SODA_LLM_URL")
        self.api_key = api_key if api_key is not None else os.environ.get("SODA_LLM_KEY", "")
        self.model = model
        self.backend_id = f"remote:{model}"
        self.audit_log_path = audit_log_path
        self.timeout = timeout
        self.min_request_interval = min_request_interval
        self._lock = threading.Lock()
        self._last_request = 0.0

    def _audit(self, request: dict, response: object, error: str | None) -> None:
        if not self.audit_log_path:
            return
        entry = {"ts": time.time(), "request": request, "response": response, "error": error}
        with self._lock:
            with open(self.audit_log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True))
                fh.write("\n")

    def complete(
        self,
        system_text: str,
        user_text: str,
        temperature: float = 0.0,
        max_tokens: int = 1024,
        seed_tag: str = "",
    ) -> str:
        import requests

        if self.min_request_interval > 0:
            with self._lock:
                wait = self._last_request + self.min_request_interval - time.monotonic()
                if wait > 0:
                    time.sleep(wait)
                self._last_request = time.monotonic()

        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system_text},
                {"role": "user", "content": user_text},
            ],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(self.url, json=payload, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except Exception as exc:
            self._audit(payload, None, str(exc))
            raise
        self._audit(payload, body, None)
        return text


# --- deterministic offline responder ---------------------------------------
#
# Synthesizes schema-valid completions for the shipped templates so whole
# pipelines can run with the mock backend on arbitrary corpora. Dispatch is on
# the "Task:" marker each template carries; all output is a pure function of
# the prompt text.

_TASK_RE = re.compile(r"^Task:\s*(\S+)", re.MULTILINE)


def _line_value(user_text: str, label: str) -> str:
    m = re.search(rf"^{re.escape(label)}:\s*(.*)$", user_text, re.MULTILINE)
    return m.group(1).strip() if m else ""


def _hash_int(*parts: str) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()[:8], "big")


_VALUE_POOL = ("reliability", "innovation", "care", "speed", "simplicity", "value for money")
_GOAL_POOL = (
    "build lasting trust with households",
    "stand out against slower competitors",
    "make customers feel looked after",
    "win performance-minded users",
    "reduce decision friction at signup",
    "attract budget-conscious switchers",
)
_AUDIENCE_POOL = (
    "young professionals upgrading their home setup",
    "families managing several connected devices",
    "students on a tight budget",
    "remote workers who depend on stable connectivity",
    "gamers chasing low latency",
    "retirees who want simple service",
)
_FIRST_NAMES = ("Alex", "Jordan", "Sam", "Riley", "Casey", "Morgan", "Dana", "Robin")
_OCCUPATIONS = (
    "UX designer",
    "logistics coordinator",
    "nurse",
    "graduate student",
    "freelance photographer",
    "sales engineer",
    "teacher",
    "barista",
)
_AGE_RANGES = ("18-24", "25-34", "35-44", "45-54")


def offline_responder(system_text: str, user_text: str) -> str:
    match = _TASK_RE.search(system_text)
    task = match.group(1) if match else ""
    if task == "ad-insight-extraction":
        return _respond_extraction(user_text)
    if task == "brand-persona-analysis":
        return _respond_brand_persona(user_text)
    if task == "comparative-analysis":
        return _respond_comparative(user_text)
    if task == "user-persona-generation":
        return _respond_user_persona(user_text)
    if task == "image-prompt-generation":
        return _respond_image_prompt(user_text)
    raise KeyError(f"offline responder cannot handle task {task!r}")


def _respond_extraction(user_text: str) -> str:
    raw = _line_value(user_text, "AD")
    try:
        ad = json.loads(raw)
    except json.JSONDecodeError:
        ad = {}
    ad_id = str(ad.get("ad_id", ""))
    brand = str(ad.get("brand", "the brand"))
    headline = str(ad.get("headline", ""))
    cta = str(ad.get("call_to_action", "")) or "Learn more"
    h = _hash_int(ad_id, headline)

    product = headline.split(":", 1)[1].strip() if ":" in headline else (headline or "general offer")
    payload = {
        "product": product or "general offer",
        "advertised_offer": f"{brand} promotes {product or 'its service'}",
        "human_need": f"People want dependable {product or 'service'} without surprises.",
        "human_insight": f"Choosing {brand} feels safer when the benefit is spelled out up front.",
        "archetype": ARCHETYPES[h % len(ARCHETYPES)],
        "tone": TONES[(h // len(ARCHETYPES)) % len(TONES)],
        "target_audience": _AUDIENCE_POOL[(h // 100) % len(_AUDIENCE_POOL)],
        "topical_category": "telecommunications" if "broadband" in headline.lower() or "plan" in headline.lower() else "consumer services",
        "call_to_action": cta,
    }
    return json.dumps(payload, sort_keys=True)


def _respond_brand_persona(user_text: str) -> str:
    brand = _line_value(user_text, "BRAND")
    try:
        ad_ids = json.loads(_line_value(user_text, "AD_IDS"))
    except json.JSONDecodeError:
        ad_ids = []
    h = _hash_int(brand)
    values = [_VALUE_POOL[(h + i) % len(_VALUE_POOL)] for i in range(3)]
    payload = {
        "brand_values": values,
        "goals": [
            {"value": v, "goal": _GOAL_POOL[(h + i) % len(_GOAL_POOL)]} for i, v in enumerate(values)
        ],
        "primary_persona": {
            "name": ARCHETYPES[h % len(ARCHETYPES)],
            "description": (
                f"{brand} speaks like a {ARCHETYPES[h % len(ARCHETYPES)].lower()}: it leads with "
                f"{values[0]} and keeps its promises concrete."
            ),
            "supporting_ad_ids": [str(a) for a in ad_ids[:2]] or ["unknown"],
        },
    }
    return json.dumps(payload, sort_keys=True)


def _respond_comparative(user_text: str) -> str:
    try:
        brands = [str(b) for b in json.loads(_line_value(user_text, "BRANDS"))]
    except json.JSONDecodeError:
        brands = []
    positioning = []
    for b in brands:
        h = _hash_int(b)
        positioning.append(
            {
                "brand": b,
                "summary": f"{b} leans on {_VALUE_POOL[h % len(_VALUE_POOL)]} and targets "
                f"{_AUDIENCE_POOL[h % len(_AUDIENCE_POOL)]}.",
            }
        )
    payload = {
        "positioning": positioning,
        "distinguishing_factors": [
            "distinct primary brand values across the set",
            "different target audiences for the same product category",
            f"{brands[0] if brands else 'one brand'} emphasizes outcomes while others emphasize price",
        ],
    }
    return json.dumps(payload, sort_keys=True)


def _respond_user_persona(user_text: str) -> str:
    raw = _line_value(user_text, "INTERESTS")
    try:
        interests = [str(i) for i in json.loads(raw)]
    except json.JSONDecodeError:
        interests = [raw] if raw else ["everyday life"]
    h = _hash_int(*interests)
    name = f"{_FIRST_NAMES[h % len(_FIRST_NAMES)]} T."
    narrative = f"{name} spends evenings on {interests[0]}"
    if len(interests) > 1:
        narrative += f" and keeps up with {', '.join(interests[1:])}"
    narrative += ", scrolls short reviews before buying anything, and values services that just work."
    payload = {
        "name": name,
        "age_range": _AGE_RANGES[(h // 7) % len(_AGE_RANGES)],
        "occupation": _OCCUPATIONS[(h // 11) % len(_OCCUPATIONS)],
        "narrative": narrative,
    }
    return json.dumps(payload, sort_keys=True)


def _respond_image_prompt(user_text: str) -> str:
    narrative = _line_value(user_text, "NARRATIVE")
    subject = narrative.split(",")[0].strip() or "a person at home"
    payload = {
        "prompt_text": f"portrait of {subject}, at a tidy desk with soft window light, 50mm photo",
        "negative_prompt": "blurry, deformed hands, text artifacts",
        "style_tags": ["photorealistic", "warm light", "shallow depth of field"],
    }
    return json.dumps(payload, sort_keys=True)


# --- image backends ---------------------------------------------------------


class ImageBackendError(RuntimeError):
    def __init__(self, message: str, spec=None):
        super().__init__(message)
        self.spec = spec


class ImageBackend(Protocol):
    backend_id: str

    def generate(self, prompt_text: str) -> bytes: ...


class MockImageBackend:
    """Renders a deterministic placeholder: an 8x8 block pattern derived from
    the SHA-256 of the prompt text."""

    backend_id = "mock-image"

    def __init__(self, size: int = 128):
        self.size = size

    def generate(self, prompt_text: str) -> bytes:
        import numpy as np

        from ..domain import ImageBuffer
        from ..imaging import png_bytes

        digest = hashlib.sha256(prompt_text.encode("utf-8")).digest()
        cells = 8
        cell = self.size // cells
        pixels = np.zeros((self.size, self.size, 3), dtype=np.uint8)
        for i in range(cells):
            for j in range(cells):
                b = digest[(i * cells + j) % len(digest)]
                color = (
                    (b * 7) % 256,
                    (b * 13 + digest[0]) % 256,
                    (b * 29 + digest[1]) % 256,
                )
                pixels[i * cell : (i + 1) * cell, j * cell : (j + 1) * cell] = color
        return png_bytes(ImageBuffer.from_array(pixels))
