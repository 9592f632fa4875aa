"""Gradient descent in pattern space.

The loop blends the current pattern onto a batch of probe faces, scores
them against clean gallery anchors, and takes an Adam step on the pattern
parameters to push the mean anchor cosine similarity down.  Colors are
periodically snapped back to a reference palette in constrained mode, and
the iterate with the lowest recognition rate is returned.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .face import BlendConfig, ContractError, blend_arrays
from .models import (
    CapabilityError,
    ModelHandle,
    VerificationPair,
    embed_tensor,
    gallery_embeddings,
    recognition_rate,
)
from .pattern import (
    DEFAULT_SOFTNESS,
    Palette,
    PatternParams,
    clip_params,
    pattern_tensor,
    project_to_palette,
    rasterize,
    sample_random_params,
)

log = logging.getLogger(__name__)

TRACE_SCHEMA = "advcamo.trace/1"
BACKENDS = ("whitebox", "blackbox")
# finite-difference steps for (width_frac, angle, phase) and per color channel
FD_STEPS = (1e-3, 1e-2, 1e-3)
FD_CHANNEL_STEP = 1.0


class OptimizationError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclasses.dataclass
class OptimizationConfig:
    max_iterations: int = 500
    early_stop_window: int = 100
    overlay_threshold: float = 0.4
    batch_size: int = 32
    lr_max: float = 0.05
    lr_min: float = 0.001
    mode: str = "unconstrained"
    clamping_interval: int = 10
    seed: int = 0
    backend: str = "whitebox"
    strict_compat: bool = False
    full_eval_every: int = 25
    n_colors: int = 2
    softness: float = DEFAULT_SOFTNESS
    force_threshold: bool = False

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ContractError("max_iterations must be non-negative")
        if not 0 < self.early_stop_window or (
            self.max_iterations > 0 and self.early_stop_window > self.max_iterations
        ):
            raise ContractError("need 0 < early_stop_window <= max_iterations")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if self.lr_min > self.lr_max:
            raise ContractError("lr_min must not exceed lr_max")
        if self.backend not in BACKENDS:
            raise ContractError(f"unknown backend {self.backend!r}")
        if self.clamping_interval < 1:
            raise ContractError("clamping_interval must be positive")

    @property
    def blend(self) -> BlendConfig:
        return BlendConfig(self.overlay_threshold, force=self.force_threshold)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class IterationRecord:
    index: int
    params: PatternParams
    loss: float
    accuracy: float
    lr: float
    full_accuracy: float | None = None
    clamped: bool = False

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["params"] = self.params.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IterationRecord":
        d = dict(d)
        d["params"] = PatternParams.from_dict(d["params"])
        return cls(**d)


@dataclasses.dataclass
class OptimizationTrace:
    iterations: list[IterationRecord] = dataclasses.field(default_factory=list)
    best_index: int = 0
    status: str = "running"
    error: str | None = None
    # the best iterate, palette-projected in constrained mode
    final_params: PatternParams | None = None

    @property
    def best_params(self) -> PatternParams:
        if self.final_params is not None:
            return self.final_params
        return self.iterations[self.best_index].params

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.accuracy for r in self.iterations])

    def update_best(self) -> None:
        self.best_index = int(np.argmin(self.accuracies))  # first minimum

    def write(self, path: str | Path, config: OptimizationConfig | None = None) -> None:
        lines = [json.dumps({"schema": TRACE_SCHEMA, "config": config.to_dict() if config else None})]
        lines += [json.dumps(r.to_dict()) for r in self.iterations]
        lines.append(
            json.dumps(
                {
                    "summary": {
                        "best_index": self.best_index,
                        "status": self.status,
                        "error": self.error,
                        "best_params": self.best_params.to_dict() if self.iterations else None,
                    }
                }
            )
        )
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "OptimizationTrace":
        trace = cls()
        for line in Path(path).read_text().splitlines():
            d = json.loads(line)
            if "schema" in d:
                continue
            if "summary" in d:
                trace.best_index = d["summary"]["best_index"]
                trace.status = d["summary"]["status"]
                trace.error = d["summary"]["error"]
                if d["summary"].get("best_params"):
                    trace.final_params = PatternParams.from_dict(d["summary"]["best_params"])
            else:
                trace.iterations.append(IterationRecord.from_dict(d))
        return trace


def lr_schedule(i: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from ``lr_max`` at i=0 to ``lr_min`` at i=total."""
    if total <= 0:
        return lr_max
    if i == 0:
        return lr_max
    if i == total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * i / total))


# --- parameter vector -------------------------------------------------------
# raw layout: [width_frac, angle, phase, r0, g0, b0, r1, ...]


def params_to_vector(p: PatternParams) -> np.ndarray:
    return np.array([p.width_frac, p.angle, p.phase, *np.ravel(p.colors)], dtype=np.float64)


def vector_to_params(v: np.ndarray, template: PatternParams) -> PatternParams:
    colors = tuple(tuple(float(x) for x in c) for c in np.reshape(v[3:], (-1, 3)))
    return template.replace(width_frac=float(v[0]), angle=float(v[1]), phase=float(v[2]), colors=colors)


def vector_scale(n_colors: int) -> np.ndarray:
    """Raw units per normalized unit: angle in multiples of pi, channels of 255."""
    return np.array([1.0, math.pi, 1.0] + [255.0] * (3 * n_colors))


def fd_steps(n_colors: int) -> np.ndarray:
    return np.array(list(FD_STEPS) + [FD_CHANNEL_STEP] * (3 * n_colors))


def gradient(
    params: PatternParams | np.ndarray,
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    backend: str = "whitebox",
    model: ModelHandle | None = None,
) -> np.ndarray:
    """Gradient of ``loss_fn`` in the raw parameter layout.

    ``loss_fn`` maps a float64 raw parameter vector to a scalar tensor.
    """
    v = params_to_vector(params) if isinstance(params, PatternParams) else np.asarray(params, np.float64)
    if backend == "whitebox":
        if model is not None and not model.gradient_capable:
            raise CapabilityError(f"model {model.name} does not expose gradients")
        x = torch.tensor(v, requires_grad=True)
        loss = loss_fn(x)
        (g,) = torch.autograd.grad(loss, x)
        return g.numpy().copy()
    if backend == "blackbox":
        steps = fd_steps((len(v) - 3) // 3) if len(v) >= 3 and (len(v) - 3) % 3 == 0 else np.full(len(v), 1e-3)
        g = np.zeros_like(v)
        with torch.no_grad():
            for j, h in enumerate(steps):
                up, down = v.copy(), v.copy()
                up[j] += h
                down[j] -= h
                g[j] = (float(loss_fn(torch.from_numpy(up))) - float(loss_fn(torch.from_numpy(down)))) / (2 * h)
        return g
    raise ContractError(f"unknown backend {backend!r}")


class BatchLoss:
    """Mean anchor cosine similarity of a batch of blended probes."""

    def __init__(
        self,
        model: ModelHandle,
        pairs: Sequence[VerificationPair],
        family: str,
        cfg: OptimizationConfig,
        anchors: np.ndarray | None = None,
    ):
        if not pairs:
            raise ContractError("empty batch")
        self.model = model
        self.family = family
        self.t = cfg.blend.overlay_threshold
        self.softness = cfg.softness
        self.canvas = tuple(pairs[0].probe.shape)
        self.images = torch.from_numpy(np.stack([p.probe.image for p in pairs]))
        self.masks = torch.from_numpy(np.stack([p.probe.mask for p in pairs]))
        self.anchors = torch.from_numpy(gallery_embeddings(model, pairs) if anchors is None else anchors)
        self.last_similarities = None

    def similarities(self, v: torch.Tensor) -> torch.Tensor:
        pat = pattern_tensor(
            self.family, v[0], v[1], v[2], v[3:].reshape(-1, 3), *self.canvas, softness=self.softness
        )
        probes = blend_arrays(self.images, self.masks, pat, self.t)
        emb = embed_tensor(self.model, probes)
        return (emb.double() * self.anchors).sum(dim=1)

    def __call__(self, v: torch.Tensor) -> torch.Tensor:
        sims = self.similarities(v)
        self.last_similarities = sims.detach().numpy().copy()
        return sims.mean()


def attack_loss(model: ModelHandle, batch: Sequence[VerificationPair], params: PatternParams, cfg: OptimizationConfig) -> float:
    fn = BatchLoss(model, batch, params.family, cfg)
    with torch.no_grad():
        return float(fn(torch.from_numpy(params_to_vector(params))))


class IdentitySampler:
    """Draws B identities per call, without replacement within an epoch."""

    def __init__(self, identities: Sequence[str], batch_size: int, rng: np.random.Generator):
        self.identities = list(identities)
        self.batch_size = min(batch_size, len(self.identities))
        self.rng = rng
        self.queue: list[str] = []

    def next(self) -> list[str]:
        if len(self.queue) < self.batch_size:
            fresh = [self.identities[k] for k in self.rng.permutation(len(self.identities))]
            self.queue += [x for x in fresh if x not in self.queue]
        batch, self.queue = self.queue[: self.batch_size], self.queue[self.batch_size :]
        return batch


class Adam:
    def __init__(self, size: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def should_stop(acc: Sequence[float], i: int, window: int, strict_compat: bool = False) -> bool:
    """Early-stop test at iteration ``i`` over the accuracy history ``acc[0..i]``.

    Default: no new strict minimum in the last ``window`` iterations.
    ``strict_compat`` applies the literal rule: stop when the trailing-window
    maximum equals the accuracy ``window`` iterations back.
    """
    if i < window:
        return False
    if strict_compat:
        lo = max(1, i - window + 1)
        return max(acc[lo : i + 1]) == acc[i - window]
    return min(acc[i - window + 1 : i + 1]) >= min(acc[: i - window + 1])


def optimize_pattern(
    cfg: OptimizationConfig,
    family: str,
    model: ModelHandle,
    pairs: Sequence[VerificationPair],
    palette: Palette | None = None,
    trace_path: str | Path | None = None,
    initial: PatternParams | None = None,
) -> OptimizationTrace:
    """Runs the full optimization loop on the mated ``pairs``; deterministic per seed."""
    if model.threshold is None:
        raise ContractError(f"model {model.name} is not calibrated")
    if cfg.mode == "constrained" and palette is None:
        raise ContractError("constrained mode requires a palette")
    if cfg.backend == "whitebox" and not model.gradient_capable:
        raise CapabilityError(f"model {model.name} does not expose gradients")
    mated = [p for p in pairs if p.mated]
    if not mated:
        raise ContractError("optimization needs mated pairs")
    by_identity: dict[str, list[VerificationPair]] = defaultdict(list)
    for p in mated:
        by_identity[p.probe.identity].append(p)
    rng = np.random.default_rng(cfg.seed)
    sampler = IdentitySampler(sorted(by_identity), cfg.batch_size, rng)
    blend_cfg = cfg.blend
    canvas = tuple(mated[0].probe.shape)
    anchor_of = dict(zip(map(id, mated), gallery_embeddings(model, mated)))

    p = initial or sample_random_params(rng, family, cfg.mode, palette, cfg.n_colors)
    p = clip_params(p)
    n_colors = p.n_colors
    scale = vector_scale(n_colors)
    theta = params_to_vector(p) / scale
    adam = Adam(len(theta))
    trace = OptimizationTrace()
    total = cfg.max_iterations
    i = 0
    clamped = False
    try:
        while True:
            batch = [q for ident in sampler.next() for q in by_identity[ident]]
            anchors = np.stack([anchor_of[id(q)] for q in batch])
            loss_fn = BatchLoss(model, batch, family, cfg, anchors)
            v = params_to_vector(p)
            exiting_soon = i >= total
            if cfg.backend == "whitebox" and not exiting_soon:
                x = torch.tensor(v, requires_grad=True)
                loss_t = loss_fn(x)
                (g,) = torch.autograd.grad(loss_t, x)
                grad, loss = g.numpy().copy(), loss_t.item()
            else:
                with torch.no_grad():
                    loss = float(loss_fn(torch.from_numpy(v)))
                grad = None
            acc_i = float(np.mean(loss_fn.last_similarities >= model.threshold))
            full = None
            if cfg.full_eval_every and i % cfg.full_eval_every == 0:
                full = recognition_rate(model, mated, rasterize(p, *canvas, cfg.softness), blend_cfg)
            trace.iterations.append(
                IterationRecord(i, p, loss, acc_i, lr_schedule(i, total, cfg.lr_max, cfg.lr_min), full, clamped)
            )
            log.debug("iter %d loss %.4f acc %.3f", i, loss, acc_i)
            accs = [r.accuracy for r in trace.iterations]
            if i >= total:
                trace.status = "completed"
                break
            if should_stop(accs, i, cfg.early_stop_window, cfg.strict_compat):
                trace.status = "early_stop"
                break
            if grad is None:
                grad = gradient(v, loss_fn, "blackbox")
            i += 1
            theta = adam.step(theta, grad * scale, lr_schedule(i, total, cfg.lr_max, cfg.lr_min))
            theta[2] = theta[2] % 1.0  # phase is periodic
            p = clip_params(vector_to_params(theta * scale, p))
            clamped = cfg.mode == "constrained" and i % cfg.clamping_interval == 0
            if clamped:
                p = p.replace(colors=tuple(project_to_palette(p.colors, palette)))
            # projection edits the iterate, never the Adam moments
            theta = params_to_vector(p) / scale
    except Exception as exc:
        trace.status = "failed"
        trace.error = f"{type(exc).__name__}: {exc}"
        if trace.iterations:
            _finish(trace, cfg, palette)
        if trace_path:
            trace.write(trace_path, cfg)
        raise OptimizationError(f"optimization aborted at iteration {i}: {exc}", trace) from exc
    _finish(trace, cfg, palette)
    if trace_path:
        trace.write(trace_path, cfg)
    return trace


def _finish(trace: OptimizationTrace, cfg: OptimizationConfig, palette: Palette | None) -> None:
    trace.update_best()
    best = trace.iterations[trace.best_index].params
    if cfg.mode == "constrained":
        best = best.replace(colors=tuple(project_to_palette(best.colors, palette)))
    trace.final_params = best
