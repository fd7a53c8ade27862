"""Wide-and-deep fusion head over the three branch encoders, with plain-SGD
training, finite-difference gradient verification, and model persistence."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .bucketing import BucketThresholds, flatten_features
from .domain import CLASS_ORDER, CtrClass, FeatureBundle, TrainingRow
from .encoders import (
    AttentionTrace,
    EncoderConfig,
    TabularEncoder,
    TextEncoder,
    VisionEncoder,
    init_parameters,
    patchify,
    trace_from_tensors,
)
from .ingestion import CorpusSchema, Vocabulary

PARAMS_MAGIC = b"SODM"
FORMAT_VERSION = 1
PROB_FLOOR = 1e-12


class EmptyDataset(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


class ShapeMismatch(ValueError):
    pass


class VersionMismatch(RuntimeError):
    pass


class CorruptArtifact(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    d_proj: int = 64
    head_hidden: int = 128

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "d_proj": self.d_proj, "head_hidden": self.head_hidden}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig.from_dict(d["encoder"]),
            d_proj=d["d_proj"],
            head_hidden=d["head_hidden"],
        )


@dataclass(frozen=True)
class NormalizationStats:
    cont_mean: np.ndarray
    cont_std: np.ndarray
    image_mean: np.ndarray  # per channel, [0,1] scale
    image_std: np.ndarray

    def to_dict(self) -> dict:
        return {
            "cont_mean": self.cont_mean.tolist(),
            "cont_std": self.cont_std.tolist(),
            "image_mean": self.image_mean.tolist(),
            "image_std": self.image_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            cont_mean=np.asarray(d["cont_mean"], dtype=np.float32),
            cont_std=np.asarray(d["cont_std"], dtype=np.float32),
            image_mean=np.asarray(d["image_mean"], dtype=np.float32),
            image_std=np.asarray(d["image_std"], dtype=np.float32),
        )


@dataclass(frozen=True)
class PredictionResult:
    probabilities: np.ndarray
    predicted_class: CtrClass
    branch_embeddings: dict[str, np.ndarray]
    attention: AttentionTrace | None = None


def loss(probabilities: Sequence[float], label: CtrClass) -> float:
    """Cross-entropy of the label's probability, floored at 1e-12 before log."""
    p = max(float(np.asarray(probabilities)[int(label)]), PROB_FLOOR)
    return -math.log(p)


def fit_stats(rows: Sequence[TrainingRow]) -> NormalizationStats:
    """Corpus-fit continuous mean/std and per-channel image mean/std (on the
    [0,1] pixel scale); zero stds are left at 1 by consumers."""
    cont = np.stack([np.asarray(r.bundle.continuous, dtype=np.float64) for r in rows])
    pixels = np.stack([r.bundle.image.pixels for r in rows]).astype(np.float64) / 255.0
    return NormalizationStats(
        cont_mean=cont.mean(axis=0).astype(np.float32),
        cont_std=cont.std(axis=0).astype(np.float32),
        image_mean=pixels.mean(axis=(0, 1, 2)).astype(np.float32),
        image_std=pixels.std(axis=(0, 1, 2)).astype(np.float32),
    )


class FusionNet(nn.Module):
    """Branch encoders -> per-branch projections -> concat -> hidden -> 3 logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        self.tabular = TabularEncoder(enc)
        self.text = TextEncoder(enc)
        self.vision = VisionEncoder(enc)
        self.proj_tabular = nn.Linear(enc.d_model, cfg.d_proj)
        self.proj_text = nn.Linear(enc.d_model, cfg.d_proj)
        self.proj_image = nn.Linear(enc.d_model, cfg.d_proj)
        self.head = nn.Sequential(
            nn.Linear(3 * cfg.d_proj, cfg.head_hidden),
            nn.GELU(),
            nn.Linear(cfg.head_hidden, 3),
        )

    def forward(self, cont, cats, tokens, patches, capture_attention: bool = False):
        e_tab = self.tabular(cont, cats)
        e_txt = self.text(tokens)
        e_img, traces = self.vision(patches, capture_attention=capture_attention)
        fused = torch.cat(
            [self.proj_tabular(e_tab), self.proj_text(e_txt), self.proj_image(e_img)], dim=1
        )
        logits = self.head(fused)
        return logits, {"tabular": e_tab, "text": e_txt, "image": e_img}, traces

    def set_stats(self, stats: NormalizationStats) -> None:
        dtype = self.tabular.cont_mean.dtype
        self.tabular.cont_mean = torch.as_tensor(stats.cont_mean, dtype=dtype)
        self.tabular.cont_std = torch.as_tensor(stats.cont_std, dtype=dtype)
        self.vision.channel_mean = torch.as_tensor(stats.image_mean, dtype=dtype)
        self.vision.channel_std = torch.as_tensor(stats.image_std, dtype=dtype)


def _collate(rows: Sequence[TrainingRow], patch_size: int, dtype=torch.float32):
    cont = torch.as_tensor(
        np.stack([np.asarray(r.bundle.continuous, dtype=np.float32) for r in rows]), dtype=dtype
    )
    cats = torch.as_tensor(np.stack([r.bundle.categorical_ids for r in rows]), dtype=torch.int64)
    tokens = torch.as_tensor(np.stack([r.bundle.token_ids for r in rows]), dtype=torch.int64)
    patches = torch.as_tensor(
        np.stack([patchify(r.bundle.image, patch_size) for r in rows]), dtype=dtype
    )
    labels = torch.as_tensor(np.array([int(r.label) for r in rows]), dtype=torch.int64)
    return cont, cats, tokens, patches, labels


def _batch_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    probs = logits.softmax(dim=-1)
    p = probs.gather(1, labels[:, None]).squeeze(1).clamp_min(PROB_FLOOR)
    return -p.log().mean()


class FusionModel:
    """A trained (or freshly initialized) model plus everything inference
    needs: vocabulary, bucket thresholds, normalization stats, and config."""

    def __init__(
        self,
        net: FusionNet,
        vocab: Vocabulary,
        thresholds: BucketThresholds,
        stats: NormalizationStats,
        seed: int,
        model_id: str = "",
        schema: CorpusSchema | None = None,
    ):
        self.net = net.eval()
        self.vocab = vocab
        self.thresholds = thresholds
        self.stats = stats
        self.seed = seed
        self.model_id = model_id
        self.schema = schema

    @property
    def config(self) -> ModelConfig:
        return self.net.cfg

    def _check_bundle(self, bundle: FeatureBundle) -> None:
        enc = self.config.encoder
        if len(bundle.continuous) != enc.n_continuous:
            raise ShapeMismatch(
                f"expected {enc.n_continuous} continuous features, got {len(bundle.continuous)}"
            )
        if len(bundle.categorical_ids) != len(enc.cat_vocab_sizes):
            raise ShapeMismatch(
                f"expected {len(enc.cat_vocab_sizes)} categorical ids, got {len(bundle.categorical_ids)}"
            )
        if len(bundle.token_ids) != enc.max_len:
            raise ShapeMismatch(f"expected {enc.max_len} token ids, got {len(bundle.token_ids)}")
        if bundle.image.height != enc.image_size or bundle.image.width != enc.image_size:
            raise ShapeMismatch(
                f"expected {enc.image_size}x{enc.image_size} image, got "
                f"{bundle.image.height}x{bundle.image.width}"
            )

    def forward(self, bundle: FeatureBundle, capture_attention: bool = False) -> PredictionResult:
        self._check_bundle(bundle)
        row = TrainingRow(bundle=bundle, label=CtrClass.AVERAGE, source_ad_id="", frame_index=0)
        cont, cats, tokens, patches, _ = _collate([row], self.config.encoder.patch_size)
        with torch.no_grad():
            logits, branches, traces = self.net(cont, cats, tokens, patches, capture_attention)
            probs = logits.softmax(dim=-1)[0].numpy().astype(np.float64)
        probs = probs / probs.sum()
        return PredictionResult(
            probabilities=probs,
            predicted_class=CtrClass(int(np.argmax(probs))),
            branch_embeddings={k: v[0].numpy() for k, v in branches.items()},
            attention=trace_from_tensors(traces) if capture_attention else None,
        )

    def predict_proba(self, bundle: FeatureBundle) -> np.ndarray:
        return self.forward(bundle).probabilities

    def predict_proba_many(self, bundles: Sequence[FeatureBundle], chunk: int = 256) -> np.ndarray:
        rows = [
            TrainingRow(bundle=b, label=CtrClass.AVERAGE, source_ad_id="", frame_index=0)
            for b in bundles
        ]
        out = []
        with torch.no_grad():
            for start in range(0, len(rows), chunk):
                cont, cats, tokens, patches, _ = _collate(
                    rows[start : start + chunk], self.config.encoder.patch_size
                )
                logits, _, _ = self.net(cont, cats, tokens, patches)
                out.append(logits.softmax(dim=-1).numpy().astype(np.float64))
        return np.concatenate(out, axis=0)


def build_model(
    model_cfg: ModelConfig,
    vocab: Vocabulary,
    thresholds: BucketThresholds,
    stats: NormalizationStats,
    seed: int,
    schema: CorpusSchema | None = None,
) -> FusionModel:
    net = FusionNet(model_cfg)
    init_parameters(net, seed)
    net.set_stats(stats)
    return FusionModel(net, vocab, thresholds, stats, seed, schema=schema)


def train_fusion(
    rows: Sequence[TrainingRow],
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    vocab: Vocabulary,
    thresholds: BucketThresholds,
    stats: NormalizationStats | None = None,
    schema: CorpusSchema | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[FusionModel, list[float]]:
    """Plain SGD (no momentum) on mean cross-entropy over shuffled mini-batches.

    Deterministic given train_cfg.seed; returns exactly epochs loss entries.
    """
    if not rows:
        raise EmptyDataset("no training rows")
    stats = stats if stats is not None else fit_stats(rows)
    model = build_model(model_cfg, vocab, thresholds, stats, seed=train_cfg.seed, schema=schema)
    net = model.net.train()
    torch.manual_seed(train_cfg.seed)

    cont, cats, tokens, patches, labels = _collate(rows, model_cfg.encoder.patch_size)
    n = len(rows)
    opt = torch.optim.SGD(net.parameters(), lr=train_cfg.learning_rate)
    rng = np.random.default_rng(train_cfg.seed)

    history: list[float] = []
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n) if train_cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = torch.as_tensor(order[start : start + train_cfg.batch_size])
            logits, _, _ = net(cont[idx], cats[idx], tokens[idx], patches[idx])
            batch_loss = _batch_loss(logits, labels[idx])
            if not torch.isfinite(batch_loss):
                raise DivergenceError(f"loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            batch_loss.backward()
            opt.step()
            total += float(batch_loss.detach()) * len(idx)
        history.append(total / n)
        if progress is not None:
            progress(epoch, history[-1])
    net.eval()
    return model, history


def check_gradients(
    model: FusionModel,
    batch: Sequence[TrainingRow],
    epsilon: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between the analytic gradient of the mean batch loss
    and central finite differences over a random coordinate sample, in 64-bit.

    Relative error per coordinate: |g_a - g_n| / max(1e-8, |g_a| + |g_n|).
    Intended for small batches (a handful of rows) of a miniature model.
    """
    net = copy.deepcopy(model.net).double().eval()
    cont, cats, tokens, patches, labels = _collate(
        batch, model.config.encoder.patch_size, dtype=torch.float64
    )

    def compute_loss() -> torch.Tensor:
        logits, _, _ = net(cont, cats, tokens, patches)
        return _batch_loss(logits, labels)

    net.zero_grad()
    compute_loss().backward()
    named = sorted(
        ((name, p) for name, p in net.named_parameters() if p.requires_grad),
        key=lambda kv: kv[0],
    )
    sizes = [p.numel() for _, p in named]
    total = int(sum(sizes))
    starts = np.cumsum([0] + sizes)

    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(n_coords, total), replace=False)

    max_err = 0.0
    with torch.no_grad():
        for coord in coords:
            t_idx = int(np.searchsorted(starts, coord, side="right") - 1)
            local = int(coord - starts[t_idx])
            param = named[t_idx][1]
            flat = param.view(-1)
            g_a = float(param.grad.view(-1)[local])
            original = float(flat[local])
            flat[local] = original + epsilon
            up = float(compute_loss())
            flat[local] = original - epsilon
            down = float(compute_loss())
            flat[local] = original
            g_n = (up - down) / (2.0 * epsilon)
            err = abs(g_a - g_n) / max(1e-8, abs(g_a) + abs(g_n))
            max_err = max(max_err, err)
    return max_err


# --- persistence ----------------------------------------------------------


def _write_params_bin(path: str, state: dict[str, torch.Tensor], seed: int) -> None:
    tensors = []
    payload = bytearray()
    for name in sorted(state.keys()):
        arr = state[name].detach().cpu().numpy()
        raw = arr.tobytes()
        tensors.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = {
        "tensors": tensors,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
        "seed": seed,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def _read_params_bin(path: str) -> tuple[dict[str, torch.Tensor], int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != PARAMS_MAGIC:
        raise CorruptArtifact(f"{path}: not a model parameter file")
    version = int.from_bytes(blob[4:8], "little")
    if version > FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    header_len = int.from_bytes(blob[8:16], "little")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArtifact(f"{path}: unreadable header: {exc}") from exc
    payload = blob[16 + header_len :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptArtifact(f"{path}: payload checksum mismatch")
    state = {}
    for spec in header["tensors"]:
        raw = payload[spec["offset"] : spec["offset"] + spec["nbytes"]]
        if len(raw) != spec["nbytes"]:
            raise CorruptArtifact(f"{path}: truncated tensor {spec['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"]).copy()
        state[spec["name"]] = torch.as_tensor(arr)
    return state, int(header.get("seed", 0))


def save_model(model: FusionModel, path: str) -> None:
    """Write the artifact directory: params.bin (checksummed tensors) plus
    vocab.json, thresholds.json, stats.json, and config.json."""
    os.makedirs(path, exist_ok=True)
    if not model.model_id:
        model.model_id = os.path.basename(os.path.normpath(path))
    _write_params_bin(os.path.join(path, "params.bin"), model.net.state_dict(), model.seed)
    for fname, payload in (
        ("vocab.json", model.vocab.to_dict()),
        ("thresholds.json", model.thresholds.to_dict()),
        ("stats.json", model.stats.to_dict()),
        (
            "config.json",
            {
                "format_version": FORMAT_VERSION,
                "model_id": model.model_id,
                "seed": model.seed,
                "model": model.config.to_dict(),
                "corpus_schema": model.schema.to_dict() if model.schema is not None else None,
            },
        ),
    ):
        with open(os.path.join(path, fname), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")


def load_model(path: str) -> FusionModel:
    with open(os.path.join(path, "config.json"), "r", encoding="utf-8") as fh:
        config = json.load(fh)
    if config.get("format_version", 0) > FORMAT_VERSION:
        raise VersionMismatch(
            f"artifact format {config.get('format_version')} is newer than supported {FORMAT_VERSION}"
        )
    with open(os.path.join(path, "vocab.json"), "r", encoding="utf-8") as fh:
        vocab = Vocabulary.from_dict(json.load(fh))
    with open(os.path.join(path, "thresholds.json"), "r", encoding="utf-8") as fh:
        thresholds = BucketThresholds.from_dict(json.load(fh))
    with open(os.path.join(path, "stats.json"), "r", encoding="utf-8") as fh:
        stats = NormalizationStats.from_dict(json.load(fh))

    state, seed = _read_params_bin(os.path.join(path, "params.bin"))
    net = FusionNet(ModelConfig.from_dict(config["model"]))
    net.load_state_dict(state)
    schema_dict = config.get("corpus_schema")
    return FusionModel(
        net,
        vocab,
        thresholds,
        stats,
        seed=seed,
        model_id=config.get("model_id", ""),
        schema=CorpusSchema.from_dict(schema_dict) if schema_dict else None,
    )


# --- flattened-feature MLP baseline ----------------------------------------


class MlpBaseline:
    """Single-hidden-layer classifier on the same flattened low-level feature
    vector the kNN baseline uses."""

    def __init__(self, net: nn.Module, cont_mean, cont_std, cat_sizes, vocab_size):
        self.net = net.eval()
        self.cont_mean = cont_mean
        self.cont_std = cont_std
        self.cat_sizes = cat_sizes
        self.vocab_size = vocab_size

    def _vec(self, bundle: FeatureBundle) -> np.ndarray:
        return flatten_features(bundle, self.cont_mean, self.cont_std, self.cat_sizes, self.vocab_size)

    def predict_proba(self, bundle: FeatureBundle) -> np.ndarray:
        return self.predict_proba_many([bundle])[0]

    def predict_proba_many(self, bundles: Sequence[FeatureBundle]) -> np.ndarray:
        x = torch.as_tensor(np.stack([self._vec(b) for b in bundles]), dtype=torch.float32)
        with torch.no_grad():
            return self.net(x).softmax(dim=-1).numpy().astype(np.float64)


def train_mlp_baseline(
    rows: Sequence[TrainingRow],
    train_cfg: TrainConfig,
    cat_sizes: Sequence[int],
    vocab_size: int,
    hidden: int = 128,
) -> tuple[MlpBaseline, list[float]]:
    if not rows:
        raise EmptyDataset("no training rows")
    from .bucketing import KnnIndex

    index = KnnIndex(rows, cat_sizes=cat_sizes, vocab_size=vocab_size)
    x = torch.as_tensor(index.matrix, dtype=torch.float32)
    y = torch.as_tensor(np.array([int(r.label) for r in rows]), dtype=torch.int64)

    net = nn.Sequential(nn.Linear(x.shape[1], hidden), nn.GELU(), nn.Linear(hidden, 3))
    init_parameters(net, train_cfg.seed)
    torch.manual_seed(train_cfg.seed)
    opt = torch.optim.SGD(net.parameters(), lr=train_cfg.learning_rate)
    rng = np.random.default_rng(train_cfg.seed)

    n = len(rows)
    history = []
    net.train()
    for _epoch in range(train_cfg.epochs):
        order = rng.permutation(n) if train_cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = torch.as_tensor(order[start : start + train_cfg.batch_size])
            batch_loss = _batch_loss(net(x[idx]), y[idx])
            if not torch.isfinite(batch_loss):
                raise DivergenceError(f"MLP loss became non-finite at epoch {_epoch}")
            opt.zero_grad()
            batch_loss.backward()
            opt.step()
            total += float(batch_loss.detach()) * len(idx)
        history.append(total / n)
    net.eval()
    return (
        MlpBaseline(net, index.cont_mean, index.cont_std, index.cat_sizes, index.vocab_size),
        history,
    )
