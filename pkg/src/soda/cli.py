"""Batch CLI: synth, ingest, train, eval, score, heatmap, analyze, persona,
serve. Exit codes: 0 success, 1 domain errors, 2 usage errors."""
from __future__ import annotations

import json
import os
import sys

import click

from .store import atomic_write_json


class DomainError(click.ClickException):
    """Domain failures exit 1 with the message on stderr."""

    exit_code = 1


def _wrap_domain_errors(fn):
    import functools

    @functools.wraps(fn)
    def inner(*args, **kwargs):
        from .domain import AdValidationError, PreprocessFailure
        from .fusion import CorruptArtifact, DivergenceError, EmptyDataset, VersionMismatch
        from .ingestion import EmptyInput, ParseError
        from .llm.pipeline import AnalysisFailed, ExtractionFailed
        from .store import UnknownAd

        try:
            return fn(*args, **kwargs)
        except (
            AdValidationError,
            PreprocessFailure,
            ParseError,
            EmptyInput,
            EmptyDataset,
            DivergenceError,
            CorruptArtifact,
            VersionMismatch,
            AnalysisFailed,
            ExtractionFailed,
            UnknownAd,
            FileNotFoundError,
            ValueError,
            KeyError,
            OSError,
        ) as exc:
            raise DomainError(f"{type(exc).__name__}: {exc}") from exc

    return inner


@click.group()
def main():
    """Ad-analysis workbench: CTR scoring, attention heatmaps, LLM insights."""


@main.command()
@click.option("--n", "n_ads", type=int, required=True, help="number of ads")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--brands", type=int, default=4, show_default=True)
@click.option("--image-size", type=int, default=64, show_default=True)
@_wrap_domain_errors
def synth(n_ads, seed, out_dir, brands, image_size):
    """Generate a deterministic synthetic corpus with planted signal."""
    from .ingestion import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(n_ads=n_ads, n_brands=brands, image_size=image_size, seed=seed)
    manifest, records = generate_synthetic(spec, out_dir)
    click.echo(f"wrote {len(records)} ads to {out_dir} (manifest.json, records.jsonl, images/)")


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--store", "store_root", type=click.Path(), required=True)
@_wrap_domain_errors
def ingest(manifest_path, store_root):
    """Load a corpus into a file store (images become content-addressed)."""
    from .ingestion import CorpusManifest, load_corpus
    from .store import FileStore

    manifest = CorpusManifest.load(manifest_path)
    records = load_corpus(manifest)
    store = FileStore(store_root)
    n = store.ingest_corpus(records, manifest.images_dir, manifest.schema)
    click.echo(f"ingested {n} ads into {store.root}")


def _prepare_rows(manifest, vocab, max_len, image_size, records=None):
    """Corpus -> labeled training rows plus per-ad objective map."""
    from .bucketing import bucketize, fit_thresholds
    from .ingestion import BundleBuilder, load_corpus

    records = records if records is not None else load_corpus(manifest)
    with_ctr = [r for r in records if r.observed_ctr is not None]
    if len(with_ctr) < 3:
        raise ValueError("corpus needs at least 3 ads with observed_ctr to fit thresholds")
    thresholds = fit_thresholds(
        [r.observed_ctr for r in with_ctr], fitted_on=manifest.corpus_id
    )
    builder = BundleBuilder.for_manifest(manifest, vocab, max_len=max_len, image_size=image_size)
    rows = []
    for record in with_ctr:
        label = bucketize(record.observed_ctr, thresholds)
        rows.extend(builder.rows_for(record, label))
    objectives = {r.ad_id: r.objective for r in records}
    return rows, thresholds, objectives


@main.command()
@click.option("--corpus", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--model", "model_dir", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=100, show_default=True)
@click.option("--lr", type=float, default=0.05, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--d-model", type=int, default=64, show_default=True)
@click.option("--d-proj", type=int, default=64, show_default=True)
@click.option("--dropout", type=float, default=0.1, show_default=True)
@click.option("--max-len", type=int, default=64, show_default=True)
@click.option("--image-size", type=int, default=64, show_default=True)
@click.option("--vocab-size", type=int, default=2000, show_default=True)
@click.option("--val-ratio", type=float, default=0.1, show_default=True)
@click.option("--test-ratio", type=float, default=0.1, show_default=True)
@click.option("--hpo", "hpo_trials", type=int, default=0, show_default=True, help="TPE trials (0 = off)")
@click.option("--hpo-epochs", type=int, default=12, show_default=True)
@_wrap_domain_errors
def train(
    manifest_path,
    model_dir,
    epochs,
    lr,
    batch_size,
    seed,
    d_model,
    d_proj,
    dropout,
    max_len,
    image_size,
    vocab_size,
    val_ratio,
    test_ratio,
    hpo_trials,
    hpo_epochs,
):
    """Train the fusion CTR classifier on a corpus manifest."""
    from .bucketing import evaluate_model
    from .encoders import EncoderConfig
    from .fusion import ModelConfig, TrainConfig, save_model, train_fusion
    from .ingestion import CorpusManifest, build_vocab, load_corpus, split_dataset
    from .reporting import save_loss_curve

    manifest = CorpusManifest.load(manifest_path)
    records = load_corpus(manifest)
    vocab = build_vocab(records, max_size=vocab_size)
    rows, thresholds, objectives = _prepare_rows(manifest, vocab, max_len, image_size, records)

    train_ratio = 1.0 - val_ratio - test_ratio
    train_rows, val_rows, _ = split_dataset(rows, (train_ratio, val_ratio, test_ratio), seed=seed)

    def model_config(d_proj_=d_proj, dropout_=dropout):
        return ModelConfig(
            encoder=EncoderConfig(
                d_model=d_model,
                dropout=dropout_,
                max_len=max_len,
                image_size=image_size,
                cat_vocab_sizes=manifest.cat_vocab_sizes,
                n_continuous=len(manifest.continuous_schema),
                text_vocab_size=len(vocab),
            ),
            d_proj=d_proj_,
        )

    chosen = {"learning_rate": lr, "d_proj": d_proj, "dropout": dropout, "batch_size": batch_size}
    if hpo_trials > 0:
        from .reporting import save_tpe_convergence
        from .tpe import TpeConfig, default_search_space, optimize, save_history

        def objective(cfg):
            model, _ = train_fusion(
                train_rows,
                TrainConfig(
                    learning_rate=cfg["learning_rate"],
                    epochs=hpo_epochs,
                    batch_size=int(cfg["batch_size"]),
                    seed=seed,
                ),
                model_config(int(cfg["d_proj"]), float(cfg["dropout"])),
                vocab,
                thresholds,
            )
            report = evaluate_model(model, val_rows, thresholds)
            return -report.macro_f1_all

        best, history = optimize(objective, default_search_space(), hpo_trials, TpeConfig(seed=seed))
        chosen.update(best.config)
        os.makedirs(model_dir, exist_ok=True)
        save_history(history, os.path.join(model_dir, "hpo_history.jsonl"))
        save_tpe_convergence(history, os.path.join(model_dir, "hpo_convergence.png"))
        click.echo(f"hpo best: {best.config} (val macro-F1 {-best.objective:.4f})")

    cfg = TrainConfig(
        learning_rate=float(chosen["learning_rate"]),
        epochs=epochs,
        batch_size=int(chosen["batch_size"]),
        seed=seed,
    )
    model, history = train_fusion(
        train_rows,
        cfg,
        model_config(int(chosen["d_proj"]), float(chosen["dropout"])),
        vocab,
        thresholds,
        schema=manifest.schema,
        progress=lambda e, l: click.echo(f"epoch {e + 1}/{epochs} loss {l:.4f}", err=True)
        if (e + 1) % max(1, epochs // 10) == 0
        else None,
    )
    save_model(model, model_dir)
    atomic_write_json(
        os.path.join(model_dir, "train_summary.json"),
        {
            "loss_history": history,
            "config": {
                "learning_rate": cfg.learning_rate,
                "epochs": cfg.epochs,
                "batch_size": cfg.batch_size,
                "seed": cfg.seed,
            },
            "n_train_rows": len(train_rows),
            "n_val_rows": len(val_rows),
        },
    )
    save_loss_curve(history, os.path.join(model_dir, "loss_curve.png"))
    if val_rows:
        report = evaluate_model(model, val_rows, thresholds, objectives=objectives)
        click.echo(f"validation macro-F1: {report.macro_f1_all:.4f}")
    click.echo(f"saved model to {model_dir}")


@main.command("eval")
@click.option("--corpus", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--model", "model_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--split", type=click.Choice(["all", "test"]), default="all", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="split seed (with --split test)")
@click.option("--val-ratio", type=float, default=0.1, show_default=True)
@click.option("--test-ratio", type=float, default=0.1, show_default=True)
@_wrap_domain_errors
def eval_cmd(manifest_path, model_dir, out_path, split, seed, val_ratio, test_ratio):
    """Evaluate a model on a corpus; writes JSON, per-class CSV, and a figure."""
    from .bucketing import evaluate_model
    from .fusion import load_model
    from .ingestion import CorpusManifest, split_dataset
    from .reporting import save_confusion_matrix, save_eval_csv

    manifest = CorpusManifest.load(manifest_path)
    model = load_model(model_dir)
    enc = model.config.encoder
    rows, _, objectives = _prepare_rows(manifest, model.vocab, enc.max_len, enc.image_size)
    if split == "test":
        _, _, rows = split_dataset(rows, (1.0 - val_ratio - test_ratio, val_ratio, test_ratio), seed)
    report = evaluate_model(model, rows, model.thresholds, objectives=objectives)
    atomic_write_json(out_path, report.to_dict())
    base = os.path.splitext(out_path)[0]
    save_eval_csv(report, base + ".csv")
    save_confusion_matrix(report, base + "_confusion.png")
    conv = "n/a" if report.macro_f1_conversion is None else f"{report.macro_f1_conversion:.4f}"
    click.echo(f"macro-F1 all: {report.macro_f1_all:.4f}  conversion: {conv}  n={report.n_eval}")


def _load_ad_for_cli(ad, store_root, manifest_path):
    """Resolve --ad as a stored id, a corpus ad id, or a JSON file path."""
    from .ingestion import CorpusManifest, load_corpus, record_from_json_dict
    from .store import FileStore

    if os.path.isfile(ad):
        with open(ad, "r", encoding="utf-8") as fh:
            return record_from_json_dict(json.load(fh)), None
    if store_root:
        store = FileStore(store_root)
        return store.get_ad(ad), store
    if manifest_path:
        manifest = CorpusManifest.load(manifest_path)
        for record in load_corpus(manifest):
            if record.ad_id == ad:
                return record, manifest
        raise KeyError(f"ad {ad!r} not in corpus")
    raise ValueError("pass --store or --corpus to resolve an ad id, or --ad a JSON file")


@main.command()
@click.option("--ad", required=True, help="ad id (with --store/--corpus) or path to an ad JSON file")
@click.option("--model", "model_dir", type=click.Path(exists=True), required=True)
@click.option("--store", "store_root", type=click.Path(), default=None)
@click.option("--corpus", "manifest_path", type=click.Path(exists=True), default=None)
@_wrap_domain_errors
def score(ad, model_dir, store_root, manifest_path):
    """Score one ad; prints the prediction payload as JSON."""
    record, source = _load_ad_for_cli(ad, store_root, manifest_path)
    svc = _service_for_source(model_dir, source)
    svc.validate(record)
    click.echo(json.dumps(svc.score(record), indent=2, sort_keys=True))


def _service_for_source(model_dir, source):
    from .ingestion import CorpusManifest
    from .service import ModelService
    from .store import FileStore

    if isinstance(source, FileStore):
        return ModelService.open(model_dir, store=source)
    if isinstance(source, CorpusManifest):
        return ModelService.open(model_dir, images_dir=source.images_dir)
    return ModelService.open(model_dir)


@main.command()
@click.option("--ad", required=True)
@click.option("--model", "model_dir", type=click.Path(exists=True), required=True)
@click.option("--store", "store_root", type=click.Path(), default=None)
@click.option("--corpus", "manifest_path", type=click.Path(exists=True), default=None)
@click.option("--alpha", type=float, default=0.5, show_default=True)
@click.option("--frame", type=int, default=0, show_default=True)
@click.option("--out", "out_prefix", type=click.Path(), required=True)
@_wrap_domain_errors
def heatmap(ad, model_dir, store_root, manifest_path, alpha, frame, out_prefix):
    """Write <out>.png (overlay) and <out>.json (saliency grid sidecar)."""
    from .saliency import export_heatmap

    record, source = _load_ad_for_cli(ad, store_root, manifest_path)
    svc = _service_for_source(model_dir, source)
    overlay, saliency, _ = svc.heatmap(record, frame=frame, alpha=alpha)
    os.makedirs(os.path.dirname(os.path.abspath(out_prefix)), exist_ok=True)
    png_path, json_path = export_heatmap(
        overlay, saliency, out_prefix, model_id=svc.model.model_id, ad_id=record.ad_id
    )
    click.echo(f"wrote {png_path} and {json_path}")


@main.command()
@click.option(
    "--kind",
    type=click.Choice(["insights", "brand-persona", "comparative", "personas"]),
    required=True,
)
@click.option("--corpus", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--brand", "brands", multiple=True, help="brand name (repeatable)")
@click.option("--backend", type=click.Choice(["mock", "remote"]), default="mock", show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--interests", default="", help="for --kind personas: comma lists, ';' separated")
@click.option("--workers", type=int, default=4, show_default=True)
@_wrap_domain_errors
def analyze(kind, manifest_path, brands, backend, out_dir, interests, workers):
    """Run the LLM analysis pipeline over a corpus manifest."""
    from .ingestion import CorpusManifest, load_corpus
    from .llm.backends import MockImageBackend
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
    from .service import make_backend

    manifest = CorpusManifest.load(manifest_path)
    records = load_corpus(manifest)
    os.makedirs(out_dir, exist_ok=True)
    templates = builtin_templates()
    llm = make_backend(backend)
    clock = resolve_clock(llm)

    def extract_for(subset):
        return extract_many(subset, llm, templates["extract-ad-insights"], workers=workers)

    if kind == "insights":
        subset = [r for r in records if not brands or r.creative.brand in brands]
        n = insights_to_table(extract_for(subset), os.path.join(out_dir, "insights.csv"))
        click.echo(f"wrote {n} insight rows to {out_dir}/insights.csv")
        return

    if kind == "brand-persona":
        if len(brands) != 1:
            raise ValueError("brand-persona needs exactly one --brand")
        brand = brands[0]
        subset = [r for r in records if r.creative.brand == brand]
        if not subset:
            raise ValueError(f"no ads for brand {brand!r} in corpus")
        report = brand_persona_analysis(
            brand, extract_for(subset), llm, templates["brand-persona-analysis"], clock=clock
        )
        out = os.path.join(out_dir, f"brand_persona_{brand.lower()}.json")
        atomic_write_json(out, report.model_dump())
        click.echo(f"wrote {out}")
        return

    if kind == "comparative":
        use = list(brands) or sorted({r.creative.brand for r in records})[:4]
        by_brand = {}
        for brand in use:
            subset = [r for r in records if r.creative.brand == brand]
            if not subset:
                raise ValueError(f"no ads for brand {brand!r} in corpus")
            by_brand[brand] = extract_for(subset)
        report = comparative_analysis(by_brand, llm, templates["comparative-analysis"], clock=clock)
        out = os.path.join(out_dir, "comparative.json")
        atomic_write_json(out, report.model_dump())
        click.echo(f"wrote {out}")
        return

    # personas
    sets = [part.split(",") for part in interests.split(";") if part.strip()]
    if not sets:
        raise ValueError("--kind personas needs --interests 'a,b;c,d'")
    personas = []
    for interest_list in sets:
        persona = generate_user_persona(
            [i.strip() for i in interest_list], llm, templates["user-persona-generation"], clock=clock
        )
        spec = generate_image_prompt(
            persona, list(DEFAULT_FEW_SHOT_PROMPTS), llm, templates["image-prompt-generation"]
        )
        image_ref = generate_persona_image(spec, MockImageBackend(), os.path.join(out_dir, "images"))
        personas.append(
            persona.model_copy(update={"image_prompt": spec, "image_ref": image_ref}).model_dump()
        )
    out = os.path.join(out_dir, "personas.json")
    atomic_write_json(out, {"personas": personas})
    click.echo(f"wrote {out} and {len(personas)} persona images")


@main.command()
@click.option("--interests", required=True, help="comma-separated interest list")
@click.option("--backend", type=click.Choice(["mock", "remote"]), default="mock", show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@_wrap_domain_errors
def persona(interests, backend, out_dir):
    """Generate one user persona (plus image prompt and mock image)."""
    from .llm.backends import MockImageBackend
    from .llm.pipeline import (
        DEFAULT_FEW_SHOT_PROMPTS,
        generate_image_prompt,
        generate_persona_image,
        generate_user_persona,
        resolve_clock,
    )
    from .llm.templates import builtin_templates
    from .service import make_backend

    templates = builtin_templates()
    llm = make_backend(backend)
    interest_list = [i.strip() for i in interests.split(",") if i.strip()]
    p = generate_user_persona(interest_list, llm, templates["user-persona-generation"])
    spec = generate_image_prompt(
        p, list(DEFAULT_FEW_SHOT_PROMPTS), llm, templates["image-prompt-generation"]
    )
    p = p.model_copy(update={"image_prompt": spec})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        image_ref = generate_persona_image(spec, MockImageBackend(), out_dir)
        p = p.model_copy(update={"image_ref": image_ref})
        atomic_write_json(os.path.join(out_dir, f"{p.persona_id}.json"), p.model_dump())
    click.echo(json.dumps(p.model_dump(), indent=2, sort_keys=True))


@main.command()
@click.option("--store", "store_root", type=click.Path(), required=True, envvar="SODA_STORE")
@click.option("--port", type=int, default=8000, show_default=True, envvar="SODA_PORT")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--model", "default_model", default=None, help="default model name under store/models")
@click.option("--frontend", "frontend_dir", type=click.Path(), default=None)
@_wrap_domain_errors
def serve(store_root, port, host, default_model, frontend_dir):
    """Serve the HTTP API (and the UI, when built) over a store."""
    import uvicorn

    from .api import create_app

    app = create_app(store_root, default_model=default_model, frontend_dir=frontend_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
