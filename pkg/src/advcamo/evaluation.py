"""Evaluation protocols: random baselines, neighbourhood checks, transfer
matrices and scoring of externally produced images."""

from __future__ import annotations

import dataclasses
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .face import BlendConfig, Detector, FullMaskParser, PassthroughDetector, preprocess, read_image
from .models import (
    DataError,
    ModelHandle,
    VerificationPair,
    embed,
    mated_similarities,
    recognition_rate,
)
from .pattern import (
    FAMILIES,
    PatternParams,
    perturb_params,
    rasterize,
    sample_random_params,
)

log = logging.getLogger(__name__)

EXTERNAL_SCHEMA = "advcamo.external/1"
REFERENCE_DELTAS = (4.0, 5.0, 2.0)  # channel units, pixels, degrees


@dataclasses.dataclass
class BaselineRow:
    baseline: float
    mean: float
    std: float
    min: float
    max: float
    accuracies: list[float] = dataclasses.field(default_factory=list)


@dataclasses.dataclass
class BaselineStats:
    rows: dict[str, BaselineRow]
    patterns: list[PatternParams]
    identities: list[str]


@dataclasses.dataclass
class TransferMatrix:
    optimization_models: list[str]
    evaluation_models: list[str]
    cells: dict[tuple[str, str, str, str], float | None]

    def get(self, opt: str, ev: str, family: str, mode: str) -> float | None:
        return self.cells.get((opt, ev, family, mode))

    def conditions(self) -> list[tuple[str, str]]:
        seen = {(f, m) for _, _, f, m in self.cells}
        return sorted(seen, key=lambda fm: (fm[1], FAMILIES.index(fm[0])))

    def column_minima(self) -> dict[tuple[str, str, str], str]:
        """(eval model, family, mode) -> optimization model with the lowest accuracy."""
        out = {}
        for family, mode in self.conditions():
            for ev in self.evaluation_models:
                vals = [
                    (self.cells[(o, ev, family, mode)], o)
                    for o in self.optimization_models
                    if self.cells.get((o, ev, family, mode)) is not None
                ]
                if vals:
                    out[(ev, family, mode)] = min(vals)[1]
        return out


@dataclasses.dataclass
class NeighborhoodResult:
    center: float
    abs_delta: float
    std: float
    accuracies: list[float]


@dataclasses.dataclass
class ExternalRecord:
    image: str
    identity: str
    pattern_id: str
    stage: str = "generated"
    attributes: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in ("generated", "physical"):
            raise ValueError(f"unknown stage tag {self.stage!r}")


@dataclasses.dataclass
class ExternalResult:
    pattern_id: str
    model: str
    stage: str
    attributes: dict
    similarity: float
    accepted: bool


def identities_of(pairs: Sequence[VerificationPair]) -> list[str]:
    return sorted({p.probe.identity for p in pairs if p.mated})


def subset_pairs(pairs: Sequence[VerificationPair], identities: Sequence[str]) -> list[VerificationPair]:
    keep = set(identities)
    return [p for p in pairs if p.mated and p.probe.identity in keep]


def run_random_baseline(
    models: Sequence[ModelHandle],
    pairs: Sequence[VerificationPair],
    n_patterns: int = 100,
    n_identities: int = 100,
    seed: int = 0,
    cfg: BlendConfig | None = None,
    families: Sequence[str] = FAMILIES,
    n_colors: int = 2,
) -> BaselineStats:
    """Recognition rate of random unconstrained patterns on random identities."""
    cfg = cfg or BlendConfig()
    rng = np.random.default_rng(seed)
    idents = identities_of(pairs)
    if n_identities > len(idents):
        raise DataError(f"asked for {n_identities} identities, dataset has {len(idents)}")
    chosen = sorted(rng.choice(idents, size=n_identities, replace=False).tolist())
    sub = subset_pairs(pairs, chosen)
    canvas = sub[0].probe.shape
    patterns = [
        sample_random_params(rng, families[int(rng.integers(len(families)))], n_colors=n_colors)
        for _ in range(n_patterns)
    ]
    images = [rasterize(p, *canvas) for p in patterns]
    rows = {}
    for m in models:
        accs = [recognition_rate(m, sub, im, cfg) for im in images]
        a = np.array(accs)
        rows[m.name] = BaselineRow(recognition_rate(m, sub), float(a.mean()), float(a.std()), float(a.min()), float(a.max()), accs)
    return BaselineStats(rows, patterns, chosen)


def run_transfer_matrix(
    patterns: Mapping[tuple[str, str, str], PatternParams | None],
    eval_models: Sequence[ModelHandle],
    pairs: Sequence[VerificationPair],
    cfg: BlendConfig | None = None,
    optimization_models: Sequence[str] | None = None,
) -> TransferMatrix:
    """``patterns`` maps (optimization model, family, mode) to the best pattern."""
    cfg = cfg or BlendConfig()
    opt_names = list(optimization_models or dict.fromkeys(k[0] for k in patterns))
    conditions = sorted({(k[1], k[2]) for k in patterns})
    canvas = [p for p in pairs if p.mated][0].probe.shape
    cells: dict[tuple[str, str, str, str], float | None] = {}
    for opt in opt_names:
        for family, mode in conditions:
            p = patterns.get((opt, family, mode))
            image = rasterize(p, *canvas) if p is not None else None
            for m in eval_models:
                if image is None:
                    log.warning("no pattern for %s/%s/%s; cell left empty", opt, family, mode)
                    cells[(opt, m.name, family, mode)] = None
                else:
                    cells[(opt, m.name, family, mode)] = recognition_rate(m, pairs, image, cfg)
    return TransferMatrix(opt_names, [m.name for m in eval_models], cells)


def run_neighborhood_check(
    params: PatternParams,
    models: Sequence[ModelHandle],
    pairs: Sequence[VerificationPair],
    n_neighbors: int = 10,
    deltas: Sequence[float] = REFERENCE_DELTAS,
    seed: int = 0,
    cfg: BlendConfig | None = None,
) -> dict[str, NeighborhoodResult]:
    """Accuracy change under small color/width/angle perturbations.

    ``deltas`` = (max channel shift, max period shift in pixels, max angle shift in degrees).
    """
    cfg = cfg or BlendConfig()
    rng = np.random.default_rng(seed)
    canvas = [p for p in pairs if p.mated][0].probe.shape
    dc, dw, da = deltas
    neighbors = [perturb_params(params, dc, dw, da, rng, canvas_width=canvas[1]) for _ in range(n_neighbors)]
    center_img = rasterize(params, *canvas)
    images = [rasterize(p, *canvas) for p in neighbors]
    out = {}
    for m in models:
        center = recognition_rate(m, pairs, center_img, cfg)
        accs = np.array([recognition_rate(m, pairs, im, cfg) for im in images])
        out[m.name] = NeighborhoodResult(center, float(np.mean(np.abs(accs - center))), float(accs.std()), accs.tolist())
    return out


def read_external_manifest(path: str | Path) -> list[ExternalRecord]:
    path = Path(path)
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "schema" in d:
            if d["schema"] != EXTERNAL_SCHEMA:
                raise ValueError(f"unsupported manifest schema {d['schema']!r}")
            continue
        rec = ExternalRecord(
            image=str(path.parent / d["image"]),
            identity=str(d["identity"]),
            pattern_id=str(d.get("pattern_id", "none")),
            stage=d.get("stage", "generated"),
            attributes=dict(d.get("attributes", {})),
        )
        records.append(rec)
    return records


def write_external_manifest(records: Sequence[ExternalRecord], path: str | Path) -> None:
    lines = [json.dumps({"schema": EXTERNAL_SCHEMA})]
    for r in records:
        lines.append(json.dumps(dataclasses.asdict(r), sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def evaluate_external(
    records: Sequence[ExternalRecord],
    models: Sequence[ModelHandle],
    gallery: Mapping[str, Sequence],
    detector: Detector | None = None,
) -> list[ExternalResult]:
    """Scores each external image against every clean gallery image of its identity.

    ``gallery`` maps identity to clean :class:`FaceSample` objects.  One
    result per (image, gallery image, model).
    """
    detector = detector or PassthroughDetector()
    parser = FullMaskParser()
    results = []
    for m in models:
        if m.threshold is None:
            raise ValueError(f"model {m.name} is not calibrated")
    gallery_emb = {
        m.name: {ident: embed(m, np.stack([g.image for g in imgs])) for ident, imgs in gallery.items() if imgs}
        for m in models
    }
    for rec in records:
        if rec.identity not in gallery or not gallery[rec.identity]:
            log.warning("skipping %s: identity %s not in gallery", rec.image, rec.identity)
            continue
        canvas = gallery[rec.identity][0].shape
        sample = preprocess(read_image(rec.image), detector, parser, identity=rec.identity, source_path=rec.image, canvas=canvas)
        for m in models:
            e = embed(m, sample.image)
            for sim in gallery_emb[m.name][rec.identity] @ e:
                results.append(
                    ExternalResult(rec.pattern_id, m.name, rec.stage, rec.attributes, float(sim), bool(sim >= m.threshold))
                )
    return results


def summarize_external(
    results: Sequence[ExternalResult], by: Sequence[str] = ("pattern_id", "model", "stage", "attributes")
) -> list[dict]:
    """Accuracy per group.  Entries of ``by`` name result fields, or attribute
    keys (e.g. ``"glasses"``) to break down by a single attribute."""
    groups: dict[tuple, list[bool]] = defaultdict(list)
    for r in results:
        key = []
        for field in by:
            if field == "attributes":
                key.append(";".join(f"{k}={v}" for k, v in sorted(r.attributes.items())))
            elif hasattr(r, field):
                key.append(getattr(r, field))
            else:
                key.append(r.attributes.get(field))
        groups[tuple(key)].append(r.accepted)
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        row = dict(zip(by, key))
        row["n"] = len(groups[key])
        row["accuracy"] = float(np.mean(groups[key]))
        rows.append(row)
    return rows


def similarity_summary(
    models: Sequence[ModelHandle],
    pairs: Sequence[VerificationPair],
    patterns: Mapping[str, PatternParams | None],
    cfg: BlendConfig | None = None,
) -> dict[tuple[str, str], np.ndarray]:
    """Mated similarities per (pattern name, model); ``None`` means no pattern."""
    cfg = cfg or BlendConfig()
    canvas = [p for p in pairs if p.mated][0].probe.shape
    out = {}
    for name, p in patterns.items():
        image = rasterize(p, *canvas) if p is not None else None
        for m in models:
            out[(name, m.name)] = mated_similarities(m, pairs, image, cfg)
    return out


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test; returns (t statistic, p value)."""
    from scipy import stats

    res = stats.ttest_rel(np.asarray(a, float), np.asarray(b, float))
    return float(res.statistic), float(res.pvalue)
