"""Four-stage hierarchical classification with a quarantine stage.

Detection decides malicious vs benign. Samples called malicious go through
the threat-type, family and behavior classifiers, each of which may also
answer "benign". Any such disagreement routes the sample to the quarantine
classifier, which issues the final malware/benign decision.

Training follows the same data flow: each stage is trained on one part of
its input and validated on the other, and only the validation samples it
calls malicious are handed to the next stage.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import gbdt
from .dataset import (
    BENIGN,
    OTHER,
    LabeledSample,
    SplitSpec,
    apply_family_vocabulary,
    group_families,
    is_validation,
)
from .gbdt import DegenerateLabels, GbdtModel, ModelFormatError, TrainParams
from .metrics import StageReport, stage_report
from .vectorizer import VOCAB_SIZE, FeatureLayout, LayoutMismatch, build_import_vocabulary, layout_manifest, vectorize

log = logging.getLogger(__name__)

DETECTION, THREAT_TYPE, FAMILY, BEHAVIOR, QUARANTINE = STAGES = (
    "detection", "threat_type", "family", "behavior", "quarantine",
)
TAXONOMIC = (THREAT_TYPE, FAMILY, BEHAVIOR)
MALICIOUS = "malicious"
UNKNOWN = "unknown"
BINARY_VOCAB = [BENIGN, MALICIOUS]

# verdict JSON uses "type" for the threat-type stage
_JSON_STAGE = {DETECTION: "detection", THREAT_TYPE: "type", FAMILY: "family", BEHAVIOR: "behavior",
               QUARANTINE: "quarantine"}

PIPELINE_MAGIC = b"PLNE"
PIPELINE_FORMAT_VERSION = 1

# the pipeline works in float32 feature space, like the FVEC container
FEATURE_DTYPE = np.float32


class TrainingError(ValueError):
    pass


class InsufficientSamples(TrainingError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class VersionMismatch(ModelFormatError):
    pass


@dataclass
class PipelineConfig:
    split: SplitSpec = field(default_factory=SplitSpec)
    params: dict[str, TrainParams] = field(default_factory=lambda: {s: TrainParams() for s in STAGES})
    family_top_k: int = 20
    min_stage_samples: int = 200
    min_class_samples: int = 2
    quarantine_floor: int = 200
    grid: dict[str, list] = field(default_factory=dict)

    def params_for(self, stage: str) -> TrainParams:
        return self.params.get(stage) or TrainParams()


@dataclass
class PipelineModel:
    layout: FeatureLayout
    models: dict[str, Optional[GbdtModel]]
    vocabularies: dict[str, list[str]]
    metadata: dict = field(default_factory=dict)

    @property
    def layout_version(self) -> int:
        return self.layout.version

    def stage_available(self, stage: str) -> bool:
        return self.models.get(stage) is not None


# -- routing -------------------------------------------------------------------

def route_quarantine(stage_labels: dict[str, Optional[str]]) -> bool:
    """True when detection said malicious and an executed taxonomic stage said benign."""
    if stage_labels.get(DETECTION) != MALICIOUS:
        return False
    return any(stage_labels.get(s) == BENIGN for s in TAXONOMIC)


@dataclass
class Verdict:
    sha256: str
    stages: dict[str, dict]  # stage -> {"label", "probs"}
    quarantined: bool
    final: dict

    def stage_label(self, stage: str) -> Optional[str]:
        out = self.stages.get(stage)
        return out["label"] if out else None

    def to_dict(self) -> dict:
        stages = {}
        for stage, out in self.stages.items():
            key = _JSON_STAGE[stage]
            if stage in (DETECTION, QUARANTINE):
                stages[key] = {"label": out["label"], "p": out["probs"][MALICIOUS]}
            else:
                stages[key] = {"label": out["label"], "probs": out["probs"]}
        return {"sha256": self.sha256, "stages": stages, "quarantined": self.quarantined, "final": self.final}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def assemble_verdict(sha256: str, stages: dict[str, dict], quarantine: Optional[dict] = None) -> Verdict:
    """Combine per-stage outputs into the final decision.

    ``stages`` maps stage name to ``{"label", "probs"}`` for every stage that
    ran. ``quarantine`` is the quarantine output, required when routing fires.
    """
    labels = {s: out["label"] for s, out in stages.items()}
    stages = dict(stages)
    if labels.get(DETECTION) != MALICIOUS:
        return Verdict(sha256, {DETECTION: stages[DETECTION]}, False, {"malware": 0})
    quarantined = route_quarantine(labels)
    final: dict = {"malware": 1}
    if quarantined:
        if quarantine is None:
            raise ValueError("sample routed to quarantine without a quarantine output")
        stages[QUARANTINE] = quarantine
        if quarantine["label"] != MALICIOUS:
            return Verdict(sha256, stages, True, {"malware": 0})
    for stage in TAXONOMIC:
        if stage in labels:
            final[stage] = UNKNOWN if labels[stage] == BENIGN else labels[stage]
    return Verdict(sha256, stages, quarantined, final)


def _binary_output(p_malicious: float) -> dict:
    p = float(p_malicious)
    return {"label": MALICIOUS if p >= 0.5 else BENIGN, "probs": {BENIGN: 1.0 - p, MALICIOUS: p}}


def _multiclass_output(probs: np.ndarray, vocab: Sequence[str]) -> dict:
    return {"label": vocab[int(np.argmax(probs))], "probs": {v: float(p) for v, p in zip(vocab, probs)}}


def _as_features(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None, :]
    return X.astype(FEATURE_DTYPE, copy=False)


def classify_many(model: PipelineModel, X, sha256s: Sequence[str]) -> list[Verdict]:
    """Run the pipeline on a matrix of feature vectors."""
    X = _as_features(X)
    if X.shape[1] != model.layout.total_length:
        raise LayoutMismatch(f"vectors have {X.shape[1]} features, layout expects {model.layout.total_length}")
    n = X.shape[0]
    if n == 0:
        return []
    det = model.models[DETECTION].predict_proba(X)[:, 1]
    outputs: list[dict] = [{DETECTION: _binary_output(p)} for p in det]
    flagged = np.flatnonzero(det >= 0.5)
    if flagged.size:
        for stage in TAXONOMIC:
            m = model.models.get(stage)
            if m is None:
                continue
            probs = m.predict_proba(X[flagged])
            for i, row in zip(flagged, probs):
                outputs[i][stage] = _multiclass_output(row, model.vocabularies[stage])
    routed = [i for i in flagged if route_quarantine({s: o["label"] for s, o in outputs[i].items()})]
    quarantine = {}
    if routed:
        qp = model.models[QUARANTINE].predict_proba(X[routed])[:, 1]
        quarantine = {i: _binary_output(p) for i, p in zip(routed, qp)}
    return [assemble_verdict(sha256s[i], outputs[i], quarantine.get(i)) for i in range(n)]


def classify(model: PipelineModel, vector, sha256: str = "") -> Verdict:
    values = getattr(vector, "values", vector)
    return classify_many(model, np.asarray(values)[None, :], [sha256])[0]


def quarantine_report(verdicts: Iterable[Verdict], truth: dict[str, int]) -> dict:
    """Quarantine counters against ground-truth malware labels keyed by sha256."""
    verdicts = list(verdicts)
    quarantined = rec_benign = rec_mal = 0
    for v in verdicts:
        if not v.quarantined:
            continue
        quarantined += 1
        t = truth.get(v.sha256)
        if t == 0 and v.final["malware"] == 0 and v.stage_label(DETECTION) == MALICIOUS:
            rec_benign += 1
        elif t == 1 and v.final["malware"] == 1:
            rec_mal += 1
    return {
        "samples": len(verdicts),
        "quarantined": quarantined,
        "share": quarantined / len(verdicts) if verdicts else 0.0,
        "recovered_benign": rec_benign,
        "recovered_malicious": rec_mal,
    }


# -- training ------------------------------------------------------------------

def stage_seed(seed: int, stage: str) -> int:
    """Independent split seed per stage, so validation halves do not line up."""
    digest = hashlib.sha256(f"{seed}/{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class _StageFit:
    model: GbdtModel
    vocab: list[str]
    report: StageReport
    val_idx: np.ndarray
    val_pred: list[str]


def _truth_label(sample: LabeledSample, stage: str) -> Optional[str]:
    if sample.labels.malware == 0:
        return BENIGN
    return getattr(sample.labels, stage)


def _fit(stage: str, X, idx: np.ndarray, labels: list[str], vocab: list[str], objective: str,
         cfg: PipelineConfig, train_mask: np.ndarray, inputs: int) -> _StageFit:
    index = {v: i for i, v in enumerate(vocab)}
    y = np.array([index[l] for l in labels], dtype=np.intp)
    tr, va = idx[train_mask], idx[~train_mask]
    ytr, yva = y[train_mask], y[~train_mask]
    if len(np.unique(ytr)) < 2:
        raise DegenerateLabels(f"{stage}: training split holds a single class")
    if len(va) == 0:
        raise InsufficientSamples(stage, "validation split is empty")
    params = cfg.params_for(stage)
    if cfg.grid:
        params, model = gbdt.grid_search(X[tr], ytr, objective, params, cfg.grid, (X[va], yva), len(vocab))
        log.info("%s: grid picked %s", stage, params)
    else:
        model = gbdt.train(X[tr], ytr, objective, params, (X[va], yva), len(vocab))
    probs = model.predict_proba(X[va])
    pred = [vocab[i] for i in probs.argmax(axis=1)]
    truth = [labels[i] for i in np.flatnonzero(~train_mask)]
    report = stage_report(pred, truth, probs, vocab, inputs=inputs)
    log.info("%s: %d train / %d validation, accuracy %.4f", stage, len(tr), len(va), report.accuracy)
    return _StageFit(model, vocab, report, va, pred)


def _split_mask(samples: Sequence[LabeledSample], idx: np.ndarray, cfg: PipelineConfig, stage: str) -> np.ndarray:
    spec = SplitSpec(cfg.split.validation_fraction, stage_seed(cfg.split.seed, stage))
    return np.array([not is_validation(samples[i].sha256, spec) for i in idx], dtype=bool)


def _check_floor(stage: str, n: int, cfg: PipelineConfig) -> None:
    if n < cfg.min_stage_samples:
        raise InsufficientSamples(stage, f"{n} samples, need at least {cfg.min_stage_samples}")


def _drop_rare(idx: np.ndarray, labels: list[str], floor: int) -> tuple[np.ndarray, list[str]]:
    counts = Counter(labels)
    keep = [k for k, l in enumerate(labels) if counts[l] >= floor]
    return idx[keep], [labels[k] for k in keep]


def train_pipeline(samples: Sequence[LabeledSample], cfg: Optional[PipelineConfig] = None,
                   layout: Optional[FeatureLayout] = None) -> PipelineModel:
    """Train all stages following the validate-then-forward data flow.

    The returned model carries a per-stage validation report in
    ``metadata["report"]``; a stage without any usable label is skipped and
    reported as such.
    """
    cfg = cfg or PipelineConfig()
    samples = list(samples)
    if layout is None:
        layout = FeatureLayout.build(build_import_vocabulary((s.record for s in samples), VOCAB_SIZE))
    X = np.empty((len(samples), layout.total_length), dtype=FEATURE_DTYPE)
    for i, s in enumerate(samples):
        X[i] = s.vector if s.vector is not None else vectorize(s.record, layout).values

    models: dict[str, Optional[GbdtModel]] = {s: None for s in STAGES}
    vocabs: dict[str, list[str]] = {}
    reports: dict[str, Optional[StageReport]] = {}
    notes: list[str] = []

    # detection
    idx = np.arange(len(samples))
    det_labels = [MALICIOUS if s.labels.malware == 1 else BENIGN for s in samples]
    if len(set(det_labels)) < 2:
        raise DegenerateLabels("detection: corpus holds a single class")
    _check_floor(DETECTION, len(idx), cfg)
    for label, count in Counter(det_labels).items():
        if count < cfg.min_class_samples:
            raise InsufficientSamples(DETECTION, f"class {label!r} has {count} samples")
    fit = _fit(DETECTION, X, idx, det_labels, BINARY_VOCAB, gbdt.BINARY, cfg,
               _split_mask(samples, idx, cfg, DETECTION), len(idx))
    models[DETECTION], vocabs[DETECTION], reports[DETECTION] = fit.model, fit.vocab, fit.report
    det_val = fit.val_idx
    flagged = np.array([i for i, p in zip(fit.val_idx, fit.val_pred) if p == MALICIOUS], dtype=np.intp)
    forwarded = flagged
    routed: list[int] = []

    for stage in TAXONOMIC:
        labels_all = [_truth_label(samples[i], stage) for i in forwarded]
        keep = [k for k, l in enumerate(labels_all) if l is not None]
        stage_idx = forwarded[keep]
        labels = [labels_all[k] for k in keep]
        if not any(l != BENIGN for l in labels):
            notes.append(f"{stage}: skipped, no forwarded sample carries this label")
            reports[stage] = None
            log.warning("%s stage skipped: no labels", stage)
            continue
        inputs = len(stage_idx)
        _check_floor(stage, inputs, cfg)
        train_mask = _split_mask(samples, stage_idx, cfg, stage)
        if stage == FAMILY:
            train_samples = [samples[i] for i in stage_idx[train_mask]]
            fam_vocab, _ = group_families(train_samples, cfg.family_top_k)
            regrouped = apply_family_vocabulary([samples[i] for i in stage_idx], fam_vocab)
            labels = [_truth_label(s, stage) for s in regrouped]
            vocab = [BENIGN] + fam_vocab
        else:
            stage_idx, labels = _drop_rare(stage_idx, labels, cfg.min_class_samples)
            train_mask = _split_mask(samples, stage_idx, cfg, stage)
            vocab = [BENIGN] + sorted(set(labels) - {BENIGN})
        fit = _fit(stage, X, stage_idx, labels, vocab, gbdt.MULTICLASS, cfg, train_mask, inputs)
        models[stage], vocabs[stage], reports[stage] = fit.model, fit.vocab, fit.report
        routed += [i for i, p in zip(fit.val_idx, fit.val_pred) if p == BENIGN]
        forwarded = np.array([i for i, p in zip(fit.val_idx, fit.val_pred) if p != BENIGN], dtype=np.intp)

    # quarantine: routed validation samples, widened when too few to train on
    tiers = [("routed", np.array(sorted(set(routed)), dtype=np.intp)), ("flagged", flagged), ("validation", det_val)]
    for tier, pool in tiers:
        labels = [MALICIOUS if samples[i].labels.malware == 1 else BENIGN for i in pool]
        counts = Counter(labels)
        if len(pool) < cfg.quarantine_floor or len(counts) < 2 or min(counts.values()) < cfg.min_class_samples:
            continue
        mask = _split_mask(samples, pool, cfg, QUARANTINE)
        train_counts = Counter(l for l, m in zip(labels, mask) if m)
        if len(train_counts) < 2 or mask.all():
            continue
        fit = _fit(QUARANTINE, X, pool, labels, BINARY_VOCAB, gbdt.BINARY, cfg, mask, len(pool))
        models[QUARANTINE], vocabs[QUARANTINE], reports[QUARANTINE] = fit.model, fit.vocab, fit.report
        if tier != "routed":
            notes.append(f"quarantine: {len(routed)} routed samples, trained on the '{tier}' pool")
        quarantine_tier = tier
        break
    else:
        raise InsufficientSamples(QUARANTINE, "no candidate pool holds both classes in sufficient number")

    metadata = {
        "quarantine_pool": quarantine_tier,
        "notes": notes,
        "report": {s: (None if r is None else r.__dict__.copy()) for s, r in reports.items()},
    }
    return PipelineModel(layout, models, vocabs, metadata)


def stage_reports(model: PipelineModel) -> dict[str, Optional[StageReport]]:
    rep = model.metadata.get("report", {})
    return {s: (StageReport(**rep[s]) if rep.get(s) else None) for s in STAGES if s in rep}


# -- evaluation -----------------------------------------------------------------

def evaluate(model: PipelineModel, samples: Sequence[LabeledSample]):
    """Test-phase metrics: detection on everything, taxonomy on detected samples.

    Returns (reports, confusion inputs, verdicts). Taxonomic truth labels
    outside a stage's vocabulary are left out of that stage's metrics, except
    families, which fold into ``other``.
    """
    samples = list(samples)
    X = np.vstack([s.vector if s.vector is not None else vectorize(s.record, model.layout).values
                   for s in samples]) if samples else np.zeros((0, model.layout.total_length))
    verdicts = classify_many(model, X, [s.sha256 for s in samples])
    reports: dict[str, Optional[StageReport]] = {}
    pairs: dict[str, tuple[list[str], list[str]]] = {}

    det_truth = [MALICIOUS if s.labels.malware else BENIGN for s in samples]
    det_pred = [v.stage_label(DETECTION) for v in verdicts]
    det_p = np.array([[v.stages[DETECTION]["probs"][BENIGN], v.stages[DETECTION]["probs"][MALICIOUS]]
                      for v in verdicts]).reshape(-1, 2)
    reports[DETECTION] = stage_report(det_pred, det_truth, det_p, BINARY_VOCAB, inputs=len(samples))
    pairs[DETECTION] = (det_pred, det_truth)

    fam_vocab = set(model.vocabularies.get(FAMILY, []))
    for stage in TAXONOMIC:
        if not model.stage_available(stage):
            reports[stage] = None
            continue
        vocab = model.vocabularies[stage]
        pred, truth, probs = [], [], []
        for s, v in zip(samples, verdicts):
            if stage not in v.stages:
                continue
            t = _truth_label(s, stage)
            if stage == FAMILY and t is not None and t != BENIGN and t not in fam_vocab:
                t = OTHER
            if t is None or t not in vocab:
                continue
            out = v.stages[stage]
            pred.append(out["label"])
            truth.append(t)
            probs.append([out["probs"][c] for c in vocab])
        inputs = sum(1 for v in verdicts if stage in v.stages)
        if truth:
            reports[stage] = stage_report(pred, truth, np.array(probs), vocab, inputs=inputs)
            pairs[stage] = (pred, truth)
        else:
            reports[stage] = None

    q_pred, q_truth, q_p = [], [], []
    for s, v in zip(samples, verdicts):
        if v.quarantined:
            q_pred.append(v.stage_label(QUARANTINE))
            q_truth.append(MALICIOUS if s.labels.malware else BENIGN)
            q_p.append(v.stages[QUARANTINE]["probs"][MALICIOUS])
    if q_truth:
        P = np.column_stack([1 - np.array(q_p), np.array(q_p)])
        reports[QUARANTINE] = stage_report(q_pred, q_truth, P, BINARY_VOCAB, inputs=len(q_truth))
        pairs[QUARANTINE] = (q_pred, q_truth)
    else:
        reports[QUARANTINE] = None
    return reports, pairs, verdicts


# -- persistence ---------------------------------------------------------------

def pipeline_to_bytes(model: PipelineModel) -> bytes:
    meta = {
        "layout": model.layout.to_dict(),
        "manifest": [name for _, name in layout_manifest(model.layout)],
        "vocabularies": model.vocabularies,
        "metadata": model.metadata,
    }
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(PIPELINE_MAGIC)
    buf.write(struct.pack("<II", PIPELINE_FORMAT_VERSION, model.layout.version))
    buf.write(struct.pack("<Q", len(meta_blob)))
    buf.write(meta_blob)
    for stage in STAGES:
        m = model.models.get(stage)
        blob = gbdt.model_to_bytes(m) if m is not None else b""
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
    return buf.getvalue()


def pipeline_from_bytes(blob: bytes) -> PipelineModel:
    if len(blob) < 12 or blob[:4] != PIPELINE_MAGIC:
        raise ModelFormatError("not a pipeline model file")
    version, layout_version = struct.unpack_from("<II", blob, 4)
    if version != PIPELINE_FORMAT_VERSION:
        raise VersionMismatch(f"pipeline format version {version} is not supported")
    pos = 12

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise ModelFormatError("pipeline model file is truncated")
        out = blob[pos : pos + n]
        pos += n
        return out

    (meta_len,) = struct.unpack("<Q", take(8))
    try:
        meta = json.loads(take(meta_len))
    except ValueError as exc:
        raise ModelFormatError(f"corrupt pipeline metadata: {exc}") from exc
    layout = FeatureLayout.from_dict(meta["layout"])
    if layout.version != layout_version:
        raise VersionMismatch("layout version in header and metadata disagree")
    if meta["manifest"] != [name for _, name in layout_manifest(layout)]:
        raise VersionMismatch("embedded manifest differs from the rebuilt layout")
    models = {}
    for stage in STAGES:
        (n,) = struct.unpack("<Q", take(8))
        models[stage] = gbdt.model_from_bytes(take(n), layout_version) if n else None
        if models[stage] is not None and models[stage].n_features != layout.total_length:
            raise LayoutMismatch(f"{stage} model has {models[stage].n_features} features")
    if pos != len(blob):
        raise ModelFormatError("trailing bytes after pipeline model")
    if models[DETECTION] is None or models[QUARANTINE] is None:
        raise ModelFormatError("pipeline lacks a detection or quarantine model")
    return PipelineModel(layout, models, meta["vocabularies"], meta["metadata"])


def save_pipeline(model: PipelineModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(pipeline_to_bytes(model))


def load_pipeline(path) -> PipelineModel:
    with open(path, "rb") as fh:
        return pipeline_from_bytes(fh.read())
