import csv
import io
import json

import pytest

from soda.llm.backends import (
    ImageBackendError,
    MockImageBackend,
    RemoteChat,
    ScriptedMock,
    offline_responder,
)
from soda.llm.pipeline import (
    AnalysisFailed,
    DEFAULT_FEW_SHOT_PROMPTS,
    ExtractionFailed,
    UnknownAdReference,
    UnknownBrand,
    brand_persona_analysis,
    brand_persona_prompt,
    comparative_analysis,
    comparative_prompt,
    extract_insights,
    extract_many,
    extraction_prompt,
    generate_image_prompt,
    generate_persona_image,
    generate_user_persona,
    image_prompt_inputs,
    insights_to_table,
    load_insights_table,
    user_persona_prompt,
)
from soda.llm.records import AdInsightRecord, ARCHETYPES, TONES
from soda.llm.templates import (
    MissingPlaceholder,
    PromptTemplate,
    builtin_templates,
    parse_template,
    render_prompt,
)

from conftest import make_record

TPL = builtin_templates()

VALID_PAYLOAD = {
    "product": "home broadband",
    "advertised_offer": "12 months at half price",
    "human_need": "People need fast, reliable internet at home.",
    "human_insight": "A visible discount makes switching feel safe.",
    "archetype": "Caregiver",
    "tone": "reassuring",
    "target_audience": "families with several connected devices",
    "topical_category": "telecommunications",
    "call_to_action": "Sign up today",
}


def make_insight(ad_id="ad1", **over) -> AdInsightRecord:
    payload = dict(VALID_PAYLOAD)
    payload.update(over)
    return AdInsightRecord(ad_id=ad_id, retry_count=0, backend_id="t", prompt_version=1, **payload)


class TestRenderPrompt:
    def _tpl(self, user="Analyze: {headline}", required=("headline",)):
        return PromptTemplate(
            template_id="t", version=1, system_text="sys", user_text=user, required=tuple(required)
        )

    def test_substitution(self):
        _, user = render_prompt(self._tpl(), {"headline": "Up your game"})
        assert user == "Analyze: Up your game"

    def test_missing_placeholder(self):
        with pytest.raises(MissingPlaceholder) as err:
            render_prompt(self._tpl(), {})
        assert err.value.name == "headline"

    def test_escaped_braces(self):
        tpl = self._tpl(user="{{literal}} {headline}", required=("headline",))
        _, user = render_prompt(tpl, {"headline": "x"})
        assert user == "{literal} x"

    def test_extra_vars_ignored(self):
        _, user = render_prompt(self._tpl(), {"headline": "a", "unused": "b"})
        assert user == "Analyze: a"

    def test_required_placeholder_must_exist_in_template(self):
        with pytest.raises(Exception):
            PromptTemplate(
                template_id="t", version=1, system_text="s", user_text="no vars", required=("gone",)
            )

    def test_front_matter_parsing(self):
        raw = "---\ntemplate_id: demo\nversion: 3\nrequired: [x]\n---\n[system]\nS\n[user]\nU {x}\n"
        tpl = parse_template(raw)
        assert tpl.template_id == "demo" and tpl.version == 3
        assert tpl.system_text == "S" and tpl.user_text == "U {x}"

    def test_builtin_templates_present(self):
        assert {
            "extract-ad-insights",
            "brand-persona-analysis",
            "comparative-analysis",
            "user-persona-generation",
            "image-prompt-generation",
        } <= set(TPL)


class TestScriptedMock:
    def test_exact_key_lookup(self):
        mock = ScriptedMock()
        mock.script("s", "u", ["one"])
        assert mock.complete("s", "u") == "one"

    def test_sequence_consumption_and_repeat(self):
        mock = ScriptedMock()
        mock.script("s", "u", ["one", "two"])
        assert mock.complete("s", "u") == "one"
        assert mock.complete("s", "u") == "two"
        assert mock.complete("s", "u") == "two"

    def test_prefix_match_serves_repair_prompts(self):
        mock = ScriptedMock()
        mock.script("s", "base prompt", ["first", "second"])
        assert mock.complete("s", "base prompt") == "first"
        assert mock.complete("s", "base prompt\n\nYour previous response was invalid: x") == "second"

    def test_unscripted_raises_without_default(self):
        with pytest.raises(KeyError):
            ScriptedMock().complete("s", "u")

    def test_default_responder_fallback(self):
        mock = ScriptedMock(default_responder=lambda s, u: "fallback")
        assert mock.complete("s", "u") == "fallback"

    def test_call_count(self):
        mock = ScriptedMock(default_responder=lambda s, u: "x")
        mock.complete("a", "b")
        mock.complete("a", "c")
        assert mock.n_calls == 2


class TestExtractInsights:
    def _ad(self):
        return make_record("ad9", headline="Voltnet: blazing home broadband offer")

    def test_valid_first_try(self):
        ad = self._ad()
        tpl = TPL["extract-ad-insights"]
        mock = ScriptedMock()
        system, user = extraction_prompt(ad, tpl)
        mock.script(system, user, [json.dumps(VALID_PAYLOAD)])
        record = extract_insights(ad, mock, tpl)
        assert record.retry_count == 0
        assert record.ad_id == "ad9"
        assert record.archetype == "Caregiver"
        assert record.backend_id == "scripted-mock"
        assert mock.n_calls == 1

    def test_invalid_archetype_then_valid(self):
        ad = self._ad()
        tpl = TPL["extract-ad-insights"]
        mock = ScriptedMock()
        bad = dict(VALID_PAYLOAD, archetype="Warrior")
        system, user = extraction_prompt(ad, tpl)
        mock.script(system, user, [json.dumps(bad), json.dumps(VALID_PAYLOAD)])
        record = extract_insights(ad, mock, tpl)
        assert record.retry_count == 1
        assert mock.n_calls == 2
        # the repair prompt carried the validation error back to the model
        assert "invalid" in mock.calls[1]["user"]

    def test_triple_failure(self):
        ad = self._ad()
        tpl = TPL["extract-ad-insights"]
        mock = ScriptedMock()
        system, user = extraction_prompt(ad, tpl)
        mock.script(system, user, ["not json at all"])
        with pytest.raises(ExtractionFailed) as err:
            extract_insights(ad, mock, tpl, max_retries=2)
        assert len(err.value.attempts) == 3
        assert mock.n_calls == 3

    def test_non_object_json_is_invalid(self):
        ad = self._ad()
        tpl = TPL["extract-ad-insights"]
        mock = ScriptedMock()
        system, user = extraction_prompt(ad, tpl)
        mock.script(system, user, ["[1, 2]", json.dumps(VALID_PAYLOAD)])
        assert extract_insights(ad, mock, tpl).retry_count == 1

    def test_offline_responder_extraction(self):
        ad = self._ad()
        mock = ScriptedMock(default_responder=offline_responder)
        record = extract_insights(ad, mock, TPL["extract-ad-insights"])
        assert record.archetype in ARCHETYPES and record.tone in TONES
        assert record.retry_count == 0

    def test_extract_many_order_and_parallel(self):
        ads = [make_record(f"ad{i}", headline=f"Voltnet: offer {i}") for i in range(8)]
        mock = ScriptedMock(default_responder=offline_responder)
        records = extract_many(ads, mock, TPL["extract-ad-insights"], workers=4)
        assert [r.ad_id for r in records] == [a.ad_id for a in ads]


class TestInsightsTable:
    def test_empty_records_header_only(self, tmp_path):
        path = str(tmp_path / "insights.csv")
        assert insights_to_table([], path) == 0
        lines = open(path, encoding="utf-8").read().splitlines()
        assert len(lines) == 1 and lines[0].startswith("ad_id,")

    def test_comma_field_quoted_roundtrip(self, tmp_path):
        rec = make_insight(product="fiber, 1 Gbps")
        path = str(tmp_path / "insights.csv")
        insights_to_table([rec], path)
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["product"] == "fiber, 1 Gbps"
        again = load_insights_table(path)
        assert again[0].product == "fiber, 1 Gbps"

    def test_n_plus_one_lines(self, tmp_path):
        records = [make_insight(f"ad{i}") for i in range(5)]
        path = str(tmp_path / "insights.csv")
        assert insights_to_table(records, path) == 5
        assert len(open(path, encoding="utf-8").read().splitlines()) == 6


class TestBrandPersona:
    def _records(self):
        return [make_insight("ad1"), make_insight("ad2"), make_insight("ad3")]

    def _payload(self, ids):
        return {
            "brand_values": ["care", "reliability"],
            "goals": [{"value": "care", "goal": "make customers feel looked after"}],
            "primary_persona": {
                "name": "Caregiver",
                "description": "Protective and reassuring, always it keeps families connected.",
                "supporting_ad_ids": ids,
            },
        }

    def test_caregiver_report(self):
        records = self._records()
        tpl = TPL["brand-persona-analysis"]
        mock = ScriptedMock()
        system, user = brand_persona_prompt("Voltnet", records, tpl)
        mock.script(system, user, [json.dumps(self._payload(["ad1", "ad2"]))])
        report = brand_persona_analysis("Voltnet", records, mock, tpl)
        assert report.primary_persona.name == "Caregiver"
        assert report.primary_persona.supporting_ad_ids == ["ad1", "ad2"]
        assert report.brand == "Voltnet"
        assert set(report.primary_persona.supporting_ad_ids) <= set(report.input_ad_ids)
        assert report.generated_at == "1970-01-01T00:00:00+00:00"  # mock runs pin the clock

    def test_unknown_ad_id_then_corrected(self):
        records = self._records()
        tpl = TPL["brand-persona-analysis"]
        mock = ScriptedMock()
        system, user = brand_persona_prompt("Voltnet", records, tpl)
        mock.script(
            system,
            user,
            [json.dumps(self._payload(["ghost"])), json.dumps(self._payload(["ad3"]))],
        )
        report = brand_persona_analysis("Voltnet", records, mock, tpl)
        assert report.primary_persona.supporting_ad_ids == ["ad3"]
        assert mock.n_calls == 2

    def test_unknown_ad_id_after_repair_fails(self):
        records = self._records()
        tpl = TPL["brand-persona-analysis"]
        mock = ScriptedMock()
        system, user = brand_persona_prompt("Voltnet", records, tpl)
        mock.script(system, user, [json.dumps(self._payload(["ghost"]))])
        with pytest.raises(UnknownAdReference):
            brand_persona_analysis("Voltnet", records, mock, tpl)

    def test_empty_records_precondition(self):
        with pytest.raises(ValueError):
            brand_persona_analysis("Voltnet", [], ScriptedMock(), TPL["brand-persona-analysis"])

    def test_schema_failure_after_repair(self):
        records = self._records()
        tpl = TPL["brand-persona-analysis"]
        mock = ScriptedMock()
        system, user = brand_persona_prompt("Voltnet", records, tpl)
        mock.script(system, user, ["garbage"])
        with pytest.raises(AnalysisFailed):
            brand_persona_analysis("Voltnet", records, mock, tpl)


class TestComparative:
    def _by_brand(self, brands):
        return {b: [make_insight(f"{b}-ad{i}") for i in range(2)] for b in brands}

    def test_four_brand_report(self):
        brands = ["Voltnet", "Skyband", "Lumicell", "AeroLink"]
        by_brand = self._by_brand(brands)
        mock = ScriptedMock(default_responder=offline_responder)
        report = comparative_analysis(by_brand, mock, TPL["comparative-analysis"])
        assert report.brands == brands
        assert len(report.positioning) == 4
        assert {p.brand for p in report.positioning} == set(brands)
        assert report.record_counts == {b: 2 for b in brands}

    def test_one_brand_precondition(self):
        with pytest.raises(ValueError):
            comparative_analysis(self._by_brand(["Solo"]), ScriptedMock(), TPL["comparative-analysis"])

    def test_nine_brands_precondition(self):
        with pytest.raises(ValueError):
            comparative_analysis(
                self._by_brand([f"B{i}" for i in range(9)]), ScriptedMock(), TPL["comparative-analysis"]
            )

    def test_fifth_brand_then_corrected(self):
        brands = ["A", "B"]
        by_brand = self._by_brand(brands)
        tpl = TPL["comparative-analysis"]
        bad = {
            "positioning": [
                {"brand": "A", "summary": "value first"},
                {"brand": "Intruder", "summary": "should not be here"},
            ],
            "distinguishing_factors": ["price"],
        }
        good = {
            "positioning": [
                {"brand": "A", "summary": "value first"},
                {"brand": "B", "summary": "premium positioning"},
            ],
            "distinguishing_factors": ["price", "tone"],
        }
        mock = ScriptedMock()
        system, user = comparative_prompt(by_brand, tpl)
        mock.script(system, user, [json.dumps(bad), json.dumps(good)])
        report = comparative_analysis(by_brand, mock, tpl)
        assert mock.n_calls == 2
        assert {p.brand for p in report.positioning} == {"A", "B"}

    def test_unknown_brand_after_repair_fails(self):
        brands = ["A", "B"]
        by_brand = self._by_brand(brands)
        tpl = TPL["comparative-analysis"]
        bad = {
            "positioning": [
                {"brand": "A", "summary": "x"},
                {"brand": "Intruder", "summary": "y"},
            ],
            "distinguishing_factors": ["z"],
        }
        mock = ScriptedMock()
        system, user = comparative_prompt(by_brand, tpl)
        mock.script(system, user, [json.dumps(bad)])
        with pytest.raises(UnknownBrand):
            comparative_analysis(by_brand, mock, tpl)


class TestUserPersona:
    def test_interests_echoed(self):
        mock = ScriptedMock(default_responder=offline_responder)
        persona = generate_user_persona(["gaming", "home broadband"], mock, TPL["user-persona-generation"])
        assert persona.interests == ["gaming", "home broadband"]
        assert persona.temperature == 0.7
        assert persona.narrative

    def test_empty_interests_precondition(self):
        with pytest.raises(ValueError):
            generate_user_persona([], ScriptedMock(), TPL["user-persona-generation"])

    def test_mock_determinism(self):
        def run():
            mock = ScriptedMock(default_responder=offline_responder)
            return generate_user_persona(["hiking"], mock, TPL["user-persona-generation"])

        assert run() == run()

    def test_temperature_recorded_in_mock_call(self):
        mock = ScriptedMock(default_responder=offline_responder)
        generate_user_persona(["music"], mock, TPL["user-persona-generation"])
        assert mock.calls[0]["temperature"] == 0.7


class TestImagePrompt:
    def _persona(self):
        mock = ScriptedMock(default_responder=offline_responder)
        return generate_user_persona(["gaming"], mock, TPL["user-persona-generation"])

    def test_scripted_prompt_text(self):
        persona = self._persona()
        tpl = TPL["image-prompt-generation"]
        want = "portrait of a young gamer at a desk setup, warm light"
        mock = ScriptedMock()
        system, user = image_prompt_inputs(persona, list(DEFAULT_FEW_SHOT_PROMPTS), tpl)
        mock.script(
            system, user, [json.dumps({"prompt_text": want, "negative_prompt": None, "style_tags": []})]
        )
        spec = generate_image_prompt(persona, list(DEFAULT_FEW_SHOT_PROMPTS), mock, tpl)
        assert spec.prompt_text == want
        assert spec.source_persona_id == persona.persona_id

    def test_empty_few_shot_precondition(self):
        with pytest.raises(ValueError):
            generate_image_prompt(self._persona(), [], ScriptedMock(), TPL["image-prompt-generation"])

    def test_offline_responder_path(self):
        persona = self._persona()
        mock = ScriptedMock(default_responder=offline_responder)
        spec = generate_image_prompt(
            persona, list(DEFAULT_FEW_SHOT_PROMPTS), mock, TPL["image-prompt-generation"]
        )
        assert spec.prompt_text.startswith("portrait of")


class TestPersonaImage:
    def _spec(self, text="portrait of a hiker, golden hour"):
        from soda.llm.records import ImagePromptSpec

        return ImagePromptSpec(prompt_text=text, source_persona_id="persona-x")

    def test_mock_backend_deterministic(self, tmp_path):
        backend = MockImageBackend()
        a = backend.generate(self._spec().prompt_text)
        b = backend.generate(self._spec().prompt_text)
        assert a == b

    def test_different_prompts_different_bytes(self):
        backend = MockImageBackend()
        assert backend.generate("one prompt") != backend.generate("another prompt")

    def test_stored_reference(self, tmp_path):
        name = generate_persona_image(self._spec(), MockImageBackend(), str(tmp_path))
        assert (tmp_path / name).exists()
        assert name.endswith(".png")

    def test_backend_failure_wrapped(self, tmp_path):
        class Exploding:
            backend_id = "boom"

            def generate(self, prompt_text):
                raise RuntimeError("no gpu")

        spec = self._spec()
        with pytest.raises(ImageBackendError) as err:
            generate_persona_image(spec, Exploding(), str(tmp_path))
        assert err.value.spec is spec


class TestRemoteChat:
    def test_requires_url(self, monkeypatch):
        monkeypatch.delenv("SODA_LLM_URL", raising=False)
        with pytest.raises(ValueError):
            RemoteChat()

    def test_audit_log_counts_calls(self, tmp_path, monkeypatch):
        audit = str(tmp_path / "audit.jsonl")

        class FakeResponse:
            status_code = 200

            def raise_for_status(self):
                pass

            def json(self):
                return {"choices": [{"message": {"content": "hi"}}]}

        calls = []

        def fake_post(url, json=None, headers=None, timeout=None):
            calls.append((url, json))
            return FakeResponse()

        import requests

        monkeypatch.setattr(requests, "post", fake_post)
        chat = RemoteChat(url="http://llm.example/v1/chat/completions", api_key="k", audit_log_path=audit)
        assert chat.complete("sys", "one") == "hi"
        assert chat.complete("sys", "two") == "hi"
        lines = open(audit, encoding="utf-8").read().splitlines()
        assert len(lines) == len(calls) == 2
        entry = json.loads(lines[0])
        assert entry["request"]["messages"][0]["content"] == "sys"
        assert entry["error"] is None

    def test_failed_call_still_audited(self, tmp_path, monkeypatch):
        audit = str(tmp_path / "audit.jsonl")

        def fake_post(url, json=None, headers=None, timeout=None):
            raise ConnectionError("down")

        import requests

        monkeypatch.setattr(requests, "post", fake_post)
        chat = RemoteChat(url="http://llm.example/x", audit_log_path=audit)
        with pytest.raises(ConnectionError):
            chat.complete("s", "u")
        lines = open(audit, encoding="utf-8").read().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["error"]
