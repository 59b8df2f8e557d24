"""Synthetic video samples, frame masking and feature-context assembly.

A sample is a stack of ``N`` frame feature maps of shape ``(h, w, c_in)``
standing in for backbone outputs. Frames follow a stationary AR(1) process
over Gaussian fields; fake samples carry an additive class template on every
valid frame.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import Var, add, matmul, relu

REAL, FAKE = 0, 1
MASK_MODES = ("background", "black")


@dataclass(frozen=True)
class GeneratorConfig:
    N: int = 16
    h: int = 4
    w: int = 4
    c_in: int = 8
    signal_amplitude: float = 1.0
    base_amplitude: float = 1.0
    phi: float = 0.5
    mask_mode: str = "background"
    template_seed: int = 7
    template_density: float = 0.25
    background_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.phi < 1.0:
            raise ValueError(f"temporal coherence phi must lie in [0, 1), got {self.phi}")
        if self.signal_amplitude < 0:
            raise ValueError("signal_amplitude must be non-negative")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if min(self.N, self.h, self.w, self.c_in) < 1:
            raise ValueError("N, h, w and c_in must be positive")

    @property
    def d(self) -> int:
        return self.N * self.h * self.w

    def class_template(self) -> np.ndarray:
        """Fixed ``(h, w, c_in)`` pattern added to valid frames of fake samples.

        A sparse random sign pattern with unit RMS over its support; the same
        for every sample generated under this config.
        """
        rng = np.random.default_rng([self.template_seed, 0x7E])
        shape = (self.h, self.w, self.c_in)
        support = rng.random(shape) < self.template_density
        if not support.any():
            support.flat[rng.integers(support.size)] = True
        return np.where(support, rng.choice([-1.0, 1.0], size=shape), 0.0)

    def base_field(self) -> np.ndarray:
        """Fixed ``(h, w, c_in)`` Gaussian field shared by every valid frame."""
        rng = np.random.default_rng([self.template_seed, 0xBA5E])
        return rng.standard_normal((self.h, self.w, self.c_in))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class SequenceSample:
    frames: np.ndarray  # (N, h, w, c_in)
    label: int
    validity: np.ndarray  # (N,) bool
    seed: int

    @property
    def N(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class FeatureContext:
    """Node features ``X`` of shape ``(d, c)``; row ``n*h*w + i*w + j``."""

    X: Var
    N: int
    h: int
    w: int

    @property
    def d(self) -> int:
        return self.N * self.h * self.w

    @property
    def c(self) -> int:
        return self.X.shape[-1]


def node_index(n: int, i: int, j: int, h: int, w: int) -> int:
    """Row of frame ``n``, location ``(i, j)`` (all zero-based)."""
    return (n * h + i) * w + j


def generate_sample(cfg: GeneratorConfig, label: int, seed: int) -> SequenceSample:
    """Draw one sequence; a pure function of ``(cfg, label, seed)``.

    Frame ``n`` is ``base_amplitude * base + e_n`` where ``e`` is a stationary
    unit-variance AR(1) sequence of Gaussian fields with coefficient ``phi``.

    The noise stream depends only on ``seed``, so samples that share a seed
    differ exactly by the class template.
    """
    if label not in (REAL, FAKE):
        raise ValueError(f"label must be 0 or 1, got {label}")
    rng = np.random.default_rng([seed, 0xF0])
    shape = (cfg.h, cfg.w, cfg.c_in)
    eps = rng.standard_normal((cfg.N,) + shape)
    frames = np.empty_like(eps)
    frames[0] = eps[0]
    innov = math.sqrt(1.0 - cfg.phi**2)
    for n in range(1, cfg.N):
        frames[n] = cfg.phi * frames[n - 1] + innov * eps[n]
    frames += cfg.base_amplitude * cfg.base_field()
    if label == FAKE:
        frames += cfg.signal_amplitude * cfg.class_template()
    return SequenceSample(frames, label, np.ones(cfg.N, dtype=bool), seed)


def mask_count(N: int, m_r: float) -> int:
    # floor with a guard against 0.3 * 10 = 2.9999999999999996
    return int(math.floor(m_r * N + 1e-9))


def apply_mask(
    s: SequenceSample,
    m_r: float,
    mode: str = "background",
    seed: int = 0,
    background_scale: float = 1.0,
) -> SequenceSample:
    """Replace ``floor(m_r * N)`` uniformly chosen frames.

    ``background`` frames are fresh i.i.d. Gaussian fields (no temporal
    coupling, no class signal); ``black`` frames are all zero.
    """
    if not 0.0 <= m_r <= 1.0:
        raise ValueError(f"masking ratio must lie in [0, 1], got {m_r}")
    if mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    k = mask_count(s.N, m_r)
    if k == 0:
        return s
    rng = np.random.default_rng([seed, s.seed, 0xA5])
    idx = np.sort(rng.choice(s.N, size=k, replace=False))
    frames = s.frames.copy()
    if mode == "black":
        frames[idx] = 0.0
    else:
        frames[idx] = background_scale * rng.standard_normal((k,) + s.frames.shape[1:])
    validity = s.validity.copy()
    validity[idx] = False
    return replace(s, frames=frames, validity=validity)


def flatten_frames(frames: np.ndarray) -> np.ndarray:
    """``(..., N, h, w, c_in)`` to ``(..., N*h*w, c_in)`` in node order."""
    *lead, N, h, w, c = frames.shape
    return frames.reshape(*lead, N * h * w, c)


def project_and_assemble(s: SequenceSample, P, bias) -> FeatureContext:
    """Map every location through ``x -> max(0, P^T x + bias)``.

    ``P`` is ``(c_in, c)``; ``P`` and ``bias`` may be :class:`Var` so the
    projection is recorded on the active tape.
    """
    pv = P.value if isinstance(P, Var) else np.asarray(P, dtype=float)
    bv = bias.value if isinstance(bias, Var) else np.asarray(bias, dtype=float)
    if pv.ndim != 2 or pv.shape[0] != s.frames.shape[-1]:
        raise ValueError(f"projector shape {pv.shape} does not match c_in={s.frames.shape[-1]}")
    if bv.shape not in ((pv.shape[1],), (1, pv.shape[1])):
        raise ValueError(f"bias shape {bv.shape} does not match c={pv.shape[1]}")
    N, h, w, _ = s.frames.shape
    X = relu(add(matmul(flatten_frames(s.frames), P), bias))
    return FeatureContext(X, N, h, w)


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    seed: int
    label: int
    m_r: float = 0.0
    mode: str = "background"
    split: str = "train"


@dataclass
class Manifest:
    generator: GeneratorConfig
    entries: list[ManifestEntry] = field(default_factory=list)
    seed: int = 0
    version: int = 1

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "generator": self.generator.to_dict(),
            "samples": [e.__dict__ for e in self.entries],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Manifest":
        return cls(
            generator=GeneratorConfig(**obj["generator"]),
            entries=[ManifestEntry(**e) for e in obj["samples"]],
            seed=obj.get("seed", 0),
            version=obj.get("version", 1),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_json(json.loads(Path(path).read_text()))


def materialize(cfg: GeneratorConfig, entry: ManifestEntry) -> SequenceSample:
    """Regenerate a sample (with its masking) from a manifest entry."""
    s = generate_sample(cfg, entry.label, entry.seed)
    return apply_mask(s, entry.m_r, entry.mode, seed=entry.seed, background_scale=cfg.background_scale)


def make_manifest(
    cfg: GeneratorConfig,
    n_samples: int,
    seed: int,
    train_m_r: float = 0.0,
    mode: str = "background",
) -> Manifest:
    """Balanced 8:1:1 train/val/test split with per-sample seeds.

    Each split gets ``floor``/``ceil`` halves of real and fake so label counts
    differ by at most one within every split.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    n_train = (8 * n_samples) // 10
    n_val = (n_samples - n_train) // 2
    n_test = n_samples - n_train - n_val
    rng = np.random.default_rng([seed, 0x3A])
    seeds = rng.choice(2**62, size=n_samples, replace=False)
    entries = []
    k = 0
    for name, size in (("train", n_train), ("val", n_val), ("test", n_test)):
        labels = np.array([REAL] * (size // 2) + [FAKE] * (size - size // 2))
        labels = labels[rng.permutation(size)]
        for lab in labels:
            m_r = train_m_r if name == "train" else 0.0
            entries.append(ManifestEntry(int(seeds[k]), int(lab), float(m_r), mode, name))
            k += 1
    return Manifest(cfg, entries, seed)
