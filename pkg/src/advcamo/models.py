"""Embedding models behind one interface, plus verification metrics.

A :class:`ModelHandle` wraps a torch module mapping a normalized NCHW
batch to embeddings.  Everything downstream (calibration, recognition rate,
the optimizer) talks to handles only, so external backbones plug in through
an adapter without touching the rest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .face import BlendConfig, ContractError, FaceSample, blend_arrays

log = logging.getLogger(__name__)

THRESHOLD_SCHEMA = "advcamo.thresholds/1"
REGISTRY_SCHEMA = "advcamo.registry/1"


class CalibrationError(RuntimeError):
    pass


class CapabilityError(RuntimeError):
    pass


class DataError(RuntimeError):
    pass


class ModelError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class PreprocessingProfile:
    canvas: tuple[int, int] = (112, 112)
    mean: float = 0.5
    std: float = 0.5


@dataclasses.dataclass
class ModelHandle:
    name: str
    net: nn.Module
    embedding_dim: int
    profile: PreprocessingProfile = PreprocessingProfile()
    threshold: float | None = None
    gradient_capable: bool = True
    baseline: float | None = None  # clean recognition rate at calibration
    calibration_accuracy: float | None = None
    deterministic: bool = True
    concurrency_safe: bool = False

    def __post_init__(self):
        if self.embedding_dim < 2:
            raise ContractError("embedding_dim must be at least 2")
        if self.threshold is not None and not -1 < self.threshold < 1:
            raise ContractError("threshold must lie in (-1, 1)")
        self.net.eval()

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def describe(self) -> dict:
        return {
            "name": self.name,
            "embedding_dim": self.embedding_dim,
            "canvas": list(self.profile.canvas),
            "threshold": self.threshold,
            "gradient_capable": self.gradient_capable,
        }


@dataclasses.dataclass
class VerificationPair:
    probe: FaceSample
    gallery: FaceSample
    mated: bool

    def __post_init__(self):
        if self.mated != (self.probe.identity == self.gallery.identity):
            raise ContractError("mated flag disagrees with identities")


def embed_tensor(model: ModelHandle, images: torch.Tensor) -> torch.Tensor:
    """Differentiable embedding of an (N, H, W, 3) batch in [0, 1]; unit rows."""
    if images.ndim != 4 or tuple(images.shape[1:3]) != tuple(model.profile.canvas) or images.shape[3] != 3:
        raise ContractError(
            f"expected (N, {model.profile.canvas[0]}, {model.profile.canvas[1]}, 3), got {tuple(images.shape)}"
        )
    x = images.to(model.dtype).permute(0, 3, 1, 2)
    x = (x - model.profile.mean) / model.profile.std
    try:
        y = model.net(x)
    except Exception as exc:
        raise ModelError(f"{model.name}: forward failed: {exc}") from exc
    return F.normalize(y, dim=1)


def embed(model: ModelHandle, image, batch_size: int = 64) -> np.ndarray:
    """Unit-norm embedding(s) of one H x W x 3 image or an N x H x W x 3 stack."""
    arr = np.asarray(image, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    out = []
    with torch.no_grad():
        for i in range(0, len(arr), batch_size):
            out.append(embed_tensor(model, torch.from_numpy(arr[i : i + batch_size])).double().numpy())
    emb = np.concatenate(out) if out else np.zeros((0, model.embedding_dim))
    return emb[0] if single else emb


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ContractError("vectors differ in dimension")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ContractError("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def best_threshold(similarities: Sequence[float], mated: Sequence[bool]) -> tuple[float, float]:
    """Threshold maximizing verification accuracy over similarity midpoints.

    Accept when similarity >= threshold.  Ties go to the larger threshold.
    Returns (threshold, accuracy).
    """
    sims = np.asarray(similarities, dtype=np.float64)
    lab = np.asarray(mated, dtype=bool)
    if lab.all() or not lab.any():
        raise CalibrationError("calibration needs both mated and non-mated pairs")
    values = np.unique(sims)
    if len(values) < 2:
        raise CalibrationError("all similarities are equal; no threshold separates them")
    candidates = (values[:-1] + values[1:]) / 2.0
    # accuracy for every candidate at once via sorted counts
    order = np.sort(sims[lab])
    other = np.sort(sims[~lab])
    accepted_mated = len(order) - np.searchsorted(order, candidates, side="left")
    rejected_non = np.searchsorted(other, candidates, side="left")
    acc = (accepted_mated + rejected_non) / len(sims)
    best = np.flatnonzero(acc == acc.max())[-1]
    return float(candidates[best]), float(acc[best])


def pair_similarities(model: ModelHandle, pairs: Sequence[VerificationPair], probes=None) -> np.ndarray:
    """Cosine similarity per pair; ``probes`` optionally replaces probe images."""
    if probes is None:
        probes = np.stack([p.probe.image for p in pairs])
    ep = embed(model, probes)
    eg = gallery_embeddings(model, pairs)
    return np.clip(np.sum(ep * eg, axis=1), -1.0, 1.0)


def gallery_embeddings(model: ModelHandle, pairs: Sequence[VerificationPair]) -> np.ndarray:
    # galleries repeat across pairs; embed each distinct one once
    index, uniq = {}, []
    for p in pairs:
        key = id(p.gallery)
        if key not in index:
            index[key] = len(uniq)
            uniq.append(p.gallery.image)
    emb = embed(model, np.stack(uniq))
    return emb[[index[id(p.gallery)] for p in pairs]]


def calibration_hash(pairs: Sequence[VerificationPair]) -> str:
    """Identifies a calibration set independent of where the dataset lives."""
    h = hashlib.sha256()
    for p in pairs:
        probe, gallery = Path(p.probe.source_path).name, Path(p.gallery.source_path).name
        h.update(f"{p.probe.identity}/{probe}|{p.gallery.identity}/{gallery}|{int(p.mated)}\n".encode())
    return h.hexdigest()[:16]


def calibrate_threshold(model: ModelHandle, pairs: Sequence[VerificationPair]) -> float:
    """Fits and stores the decision threshold plus the clean mated baseline."""
    if not pairs:
        raise CalibrationError("no calibration pairs")
    sims = pair_similarities(model, pairs)
    mated = np.array([p.mated for p in pairs])
    thr, acc = best_threshold(sims, mated)
    model.threshold = thr
    model.calibration_accuracy = acc
    model.baseline = float(np.mean(sims[mated] >= thr))
    return thr


def blended_probes(pairs: Sequence[VerificationPair], pattern, cfg: BlendConfig | None) -> np.ndarray:
    if pattern is None:
        return np.stack([p.probe.image for p in pairs])
    cfg = cfg or BlendConfig()
    pixels = getattr(pattern, "pixels", pattern)
    out = []
    for p in pairs:
        if tuple(pixels.shape[:2]) != tuple(p.probe.shape):
            raise ContractError("pattern and probe sizes differ")
        out.append(blend_arrays(p.probe.image, p.probe.mask, pixels, cfg.overlay_threshold))
    return np.stack(out)


def mated_similarities(model, pairs, pattern=None, cfg=None) -> np.ndarray:
    mated = [p for p in pairs if p.mated]
    if not mated:
        return np.zeros(0)
    return pair_similarities(model, mated, blended_probes(mated, pattern, cfg))


def recognition_rate(
    model: ModelHandle,
    pairs: Sequence[VerificationPair],
    pattern=None,
    cfg: BlendConfig | None = None,
) -> float:
    """Fraction of mated pairs accepted; the pattern goes on probes only."""
    if model.threshold is None:
        raise ContractError(f"model {model.name} has no calibrated threshold")
    sims = mated_similarities(model, pairs, pattern, cfg)
    if len(sims) == 0:
        raise ContractError("no mated pairs to score")
    return float(np.mean(sims >= model.threshold))


# --- dataset splits -------------------------------------------------------


@dataclasses.dataclass
class IdentitySplit:
    gallery: FaceSample
    train: list[FaceSample]
    holdout: list[FaceSample]


def split_identities(samples: Sequence[FaceSample], n_holdout: int = 2) -> dict[str, IdentitySplit]:
    """Per identity (source-path order): first image is the gallery, the last
    ``n_holdout`` are held-out probes, training uses everything else plus the gallery."""
    groups: dict[str, list[FaceSample]] = defaultdict(list)
    for s in samples:
        groups[s.identity].append(s)
    out = {}
    for ident in sorted(groups):
        imgs = sorted(groups[ident], key=lambda s: s.source_path)
        if len(imgs) < 2:
            continue
        k = min(n_holdout, len(imgs) - 1)
        out[ident] = IdentitySplit(imgs[0], imgs[: len(imgs) - k], imgs[len(imgs) - k :])
    return out


def mated_pairs(splits: dict[str, IdentitySplit]) -> list[VerificationPair]:
    return [VerificationPair(p, s.gallery, True) for s in splits.values() for p in s.holdout]


def nonmated_pairs(splits: dict[str, IdentitySplit], n: int, seed: int = 0) -> list[VerificationPair]:
    rng = np.random.default_rng(seed)
    names = sorted(splits)
    if len(names) < 2:
        raise DataError("need at least two identities for non-mated pairs")
    pairs = []
    for _ in range(n):
        a, b = rng.choice(len(names), size=2, replace=False)
        probes = splits[names[a]].holdout
        pairs.append(VerificationPair(probes[rng.integers(len(probes))], splits[names[b]].gallery, False))
    return pairs


def verification_pairs(splits: dict[str, IdentitySplit], seed: int = 0) -> list[VerificationPair]:
    """Balanced held-out protocol: every mated pair plus as many non-mated ones."""
    mated = mated_pairs(splits)
    return mated + nonmated_pairs(splits, len(mated), seed)


# --- toy model ------------------------------------------------------------


class ToyEmbeddingNet(nn.Module):
    """Small all-smooth CNN (ELU + average pooling) so finite differences agree with autograd."""

    def __init__(self, embedding_dim: int = 64, width: int = 16):
        super().__init__()
        c = width
        self.features = nn.Sequential(
            nn.Conv2d(3, c, 3, 2, 1), nn.ELU(),
            nn.Conv2d(c, 2 * c, 3, 2, 1), nn.ELU(),
            nn.Conv2d(2 * c, 4 * c, 3, 2, 1), nn.ELU(),
            nn.Conv2d(4 * c, 4 * c, 3, 2, 1), nn.ELU(),
            nn.AdaptiveAvgPool2d(2), nn.Flatten(),
        )
        self.head = nn.Linear(16 * c, embedding_dim)

    def forward(self, x):
        return self.head(self.features(x))


class CosFaceHead(nn.Module):
    def __init__(self, embedding_dim: int, n_classes: int, s: float = 30.0, m: float = 0.35):
        super().__init__()
        self.s, self.m = s, m
        self.weight = nn.Parameter(torch.empty(n_classes, embedding_dim))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, emb, labels):
        cos = F.linear(F.normalize(emb), F.normalize(self.weight))
        margin = F.one_hot(labels, cos.shape[1]).to(cos.dtype) * self.m
        return F.cross_entropy(self.s * (cos - margin), labels)


def weights_checksum(net: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in net.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def train_toy_model(
    samples: Sequence[FaceSample],
    seed: int = 0,
    epochs: int = 30,
    embedding_dim: int = 64,
    batch_size: int = 32,
    lr: float = 3e-3,
    n_holdout: int = 2,
    name: str = "toy",
) -> ModelHandle:
    """Trains the toy embedding net with a CosFace margin loss on the training split."""
    splits = split_identities(samples, n_holdout)
    eligible = {k: v for k, v in splits.items() if len(v.train) >= 1 and v.holdout}
    if len(eligible) < 20:
        raise DataError(f"need at least 20 identities with 2+ images, got {len(eligible)}")
    names = sorted(eligible)
    train = [(s.image, i) for i, k in enumerate(names) for s in eligible[k].train]
    x_all = torch.from_numpy(np.stack([im for im, _ in train])).float().permute(0, 3, 1, 2)
    y_all = torch.tensor([lab for _, lab in train])
    profile = PreprocessingProfile(canvas=tuple(samples[0].image.shape[:2]))
    x_all = (x_all - profile.mean) / profile.std

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = ToyEmbeddingNet(embedding_dim)
    head = CosFaceHead(embedding_dim, len(names))
    opt = torch.optim.Adam(list(net.parameters()) + list(head.parameters()), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(epochs, 1))
    for epoch in range(epochs):
        net.train()
        perm = torch.randperm(len(x_all), generator=gen)
        total = 0.0
        for i in range(0, len(perm), batch_size):
            idx = perm[i : i + batch_size]
            x = x_all[idx]
            x = x * (1 + 0.1 * torch.randn(len(idx), 1, 1, 1, generator=gen))
            loss = head(net(x), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        log.info("toy epoch %d loss %.4f", epoch, total / len(x_all))
    net.eval()
    return ModelHandle(name, net, embedding_dim, profile, gradient_capable=True, deterministic=True)


# --- registry and threshold sidecar -----------------------------------------


ADAPTERS = ("toy", "torchscript")


def load_model(entry: dict, root: Path) -> ModelHandle:
    adapter = entry.get("adapter", "toy")
    profile_d = entry.get("profile", {})
    profile = PreprocessingProfile(
        canvas=tuple(profile_d.get("canvas", (112, 112))),
        mean=profile_d.get("mean", 0.5),
        std=profile_d.get("std", 0.5),
    )
    weights = root / entry["weights"]
    if adapter == "toy":
        dim = int(entry.get("embedding_dim", 64))
        net = ToyEmbeddingNet(dim, int(entry.get("width", 16)))
        net.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
        grad = True
    elif adapter == "torchscript":
        net = torch.jit.load(str(weights), map_location="cpu")
        dim = int(entry["embedding_dim"])
        grad = bool(entry.get("gradient_capable", True))
    else:
        raise ModelError(f"unknown adapter {adapter!r}; known: {', '.join(ADAPTERS)}")
    return ModelHandle(
        entry["name"],
        net,
        dim,
        profile,
        gradient_capable=grad,
        deterministic=bool(entry.get("deterministic", True)),
        concurrency_safe=bool(entry.get("concurrency_safe", False)),
    )


def read_registry(path: str | Path) -> list[dict]:
    import yaml

    path = Path(path)
    doc = yaml.safe_load(path.read_text()) or {}
    entries = doc.get("models", [])
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise ModelError("duplicate model names in registry")
    return entries


def load_registry(path: str | Path) -> list[ModelHandle]:
    path = Path(path)
    return [load_model(e, path.parent) for e in read_registry(path)]


def write_registry(entries: Sequence[dict], path: str | Path) -> None:
    import yaml

    Path(path).write_text(yaml.safe_dump({"schema": REGISTRY_SCHEMA, "models": list(entries)}, sort_keys=False))


def save_toy_weights(model: ModelHandle, path: str | Path) -> dict:
    torch.save(model.net.state_dict(), path)
    return {
        "name": model.name,
        "adapter": "toy",
        "weights": Path(path).name,
        "embedding_dim": model.embedding_dim,
        "profile": {"canvas": list(model.profile.canvas), "mean": model.profile.mean, "std": model.profile.std},
    }


def write_thresholds(models: Sequence[ModelHandle], calib_hash: str, path: str | Path) -> None:
    path = Path(path)
    doc = {"schema": THRESHOLD_SCHEMA, "models": {}}
    if path.exists():
        doc = json.loads(path.read_text())
    for m in models:
        doc["models"].setdefault(m.name, {})[calib_hash] = {
            "threshold": m.threshold,
            "baseline": m.baseline,
            "accuracy": m.calibration_accuracy,
        }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def apply_thresholds(models: Sequence[ModelHandle], path: str | Path, calib_hash: str | None = None) -> None:
    """Loads thresholds from the sidecar; without a hash the entry must be unique."""
    doc = json.loads(Path(path).read_text())
    for m in models:
        entries = doc["models"].get(m.name)
        if not entries:
            raise CalibrationError(f"no calibrated threshold for {m.name}")
        if calib_hash is None:
            if len(entries) != 1:
                raise CalibrationError(f"{m.name} has several calibrations; pass a calibration hash")
            rec = next(iter(entries.values()))
        elif calib_hash in entries:
            rec = entries[calib_hash]
        else:
            raise CalibrationError(f"{m.name} was not calibrated on this pair set ({calib_hash}); recalibrate")
        m.threshold = rec["threshold"]
        m.baseline = rec["baseline"]
        m.calibration_accuracy = rec["accuracy"]
