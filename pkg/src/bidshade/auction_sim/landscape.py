"""Synthetic bid landscapes.

A `LandscapeSpec` is the ground truth behind every generated dataset: who
competes (log-normal competitor bids per scene/hour/user context), what an
ad is worth, and how likely a user is to click in each slot. Everything the
oracles need is analytic given the spec.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from ..errors import ConfigError
from .mechanism import SlotProfile

FIELD_NAMES = ("user_segment", "scene", "ad_bucket", "hour", "ad_category", "device")
DEFAULT_VOCAB = {"user_segment": 50, "scene": 8, "ad_bucket": 200, "hour": 24, "ad_category": 30, "device": 4}

# Offsets found with scripts/calibrate_sparsity.py (logging policy, seed 0).
PRESETS = {
    "trainable": {"value_base": -0.205, "q_bias": -1.757},
    "sparse": {"value_base": -0.733, "q_bias": -3.443},
}


@dataclass(frozen=True)
class FieldSpec:
    name: str
    vocab: int


@dataclass(eq=False)
class LandscapeSpec:
    fields: tuple
    profiles: tuple
    n_competitors: tuple
    comp_scale: tuple
    comp_loc_scene: np.ndarray
    comp_loc_hour: np.ndarray
    comp_loc_user: np.ndarray
    value_base: float
    value_scale: float
    value_loc_ad: np.ndarray
    q_bias: float
    q_user: np.ndarray
    q_ad: np.ndarray
    q_category: np.ndarray
    q_device: np.ndarray
    pctr_noise: float = 0.3
    mu0: float = 1.0
    reference_slot: int = 1
    logging_ratio: tuple = (0.4, 1.0)
    name: str = "custom"
    _fp: Optional[str] = field(default=None, repr=False)

    def __post_init__(self):
        self.validate()

    # -- validation -----------------------------------------------------
    def validate(self):
        names = tuple(f.name for f in self.fields)
        if names != FIELD_NAMES:
            raise ConfigError(f"feature schema must be {FIELD_NAMES}, got {names}")
        for f in self.fields:
            if int(f.vocab) < 1:
                raise ConfigError(f"vocab size for field '{f.name}' must be >= 1, got {f.vocab}")
        vocab = self.vocab
        n_scenes = vocab["scene"]
        if len(self.profiles) != n_scenes:
            raise ConfigError(f"need one SlotProfile per scene ({n_scenes}), got {len(self.profiles)}")
        for s, p in enumerate(self.profiles):
            if p.scene_id != s:
                raise ConfigError(f"profile {s} has scene_id {p.scene_id}")
            if self.n_competitors[s] < p.K + 1:
                raise ConfigError(f"scene {s}: competitor count must be >= K+1 = {p.K + 1}")
            if self.comp_scale[s] < 0:
                raise ConfigError(f"scene {s}: competitor scale must be >= 0")
            if not 1 <= self.reference_slot <= p.K:
                raise ConfigError(f"reference_slot {self.reference_slot} outside 1..K for scene {s}")
        shapes = {
            "comp_loc_scene": ("scene", self.comp_loc_scene),
            "comp_loc_hour": ("hour", self.comp_loc_hour),
            "comp_loc_user": ("user_segment", self.comp_loc_user),
            "value_loc_ad": ("ad_bucket", self.value_loc_ad),
            "q_user": ("user_segment", self.q_user),
            "q_ad": ("ad_bucket", self.q_ad),
            "q_category": ("ad_category", self.q_category),
            "q_device": ("device", self.q_device),
        }
        for attr, (fname, arr) in shapes.items():
            if np.shape(arr) != (vocab[fname],):
                raise ConfigError(f"{attr} must have shape ({vocab[fname]},) to match field '{fname}'")
        lo, hi = self.logging_ratio
        if not 0 < lo <= hi <= 1:
            raise ConfigError("logging_ratio must satisfy 0 < low <= high <= 1")
        if self.mu0 <= 0:
            raise ConfigError("mu0 must be positive")
        if self.pctr_noise < 0:
            raise ConfigError("pctr_noise must be >= 0")
        # q < 1 and u_1 <= 1 already give q * u_1 <= 1.

    # -- schema helpers ---------------------------------------------------
    @property
    def vocab(self) -> dict:
        return {f.name: int(f.vocab) for f in self.fields}

    @property
    def field_names(self) -> tuple:
        return tuple(f.name for f in self.fields)

    def col(self, name: str) -> int:
        return self.field_names.index(name)

    @property
    def n_scenes(self) -> int:
        return len(self.profiles)

    @property
    def k_max(self) -> int:
        return max(p.K for p in self.profiles)

    @property
    def m_max(self) -> int:
        return max(self.n_competitors)

    def slot_factor_matrix(self) -> np.ndarray:
        """(n_scenes, K_max) table of u_k, zero-padded past each scene's K."""
        out = np.zeros((self.n_scenes, self.k_max))
        for s, p in enumerate(self.profiles):
            out[s, : p.K] = p.u
        return out

    # -- ground-truth functions of the features ---------------------------
    def scene_of(self, features) -> np.ndarray:
        return np.asarray(features)[:, self.col("scene")]

    def competitor_params(self, features):
        """Log-normal (loc, scale), competitor count M and slot count K per row."""
        features = np.asarray(features)
        s = features[:, self.col("scene")]
        loc = (
            self.comp_loc_scene[s]
            + self.comp_loc_hour[features[:, self.col("hour")]]
            + self.comp_loc_user[features[:, self.col("user_segment")]]
        )
        scale = np.asarray(self.comp_scale, dtype=np.float64)[s]
        M = np.asarray(self.n_competitors, dtype=np.int64)[s]
        K = np.array([p.K for p in self.profiles], dtype=np.int64)[s]
        return loc, scale, M, K

    def click_propensity(self, features) -> np.ndarray:
        """Teacher q(x); click probability in slot k is q(x) * u_k."""
        features = np.asarray(features)
        z = (
            self.q_bias
            + self.q_user[features[:, self.col("user_segment")]]
            + self.q_ad[features[:, self.col("ad_bucket")]]
            + self.q_category[features[:, self.col("ad_category")]]
            + self.q_device[features[:, self.col("device")]]
        )
        return expit(z)

    def value_loc(self, features) -> np.ndarray:
        features = np.asarray(features)
        return self.value_base + self.value_loc_ad[features[:, self.col("ad_bucket")]]

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        def arr(a):
            return [float(v) for v in np.asarray(a, dtype=np.float64)]

        return {
            "name": self.name,
            "fields": [[f.name, int(f.vocab)] for f in self.fields],
            "profiles": [[p.scene_id, list(p.u)] for p in self.profiles],
            "n_competitors": [int(m) for m in self.n_competitors],
            "comp_scale": arr(self.comp_scale),
            "comp_loc_scene": arr(self.comp_loc_scene),
            "comp_loc_hour": arr(self.comp_loc_hour),
            "comp_loc_user": arr(self.comp_loc_user),
            "value_base": float(self.value_base),
            "value_scale": float(self.value_scale),
            "value_loc_ad": arr(self.value_loc_ad),
            "q_bias": float(self.q_bias),
            "q_user": arr(self.q_user),
            "q_ad": arr(self.q_ad),
            "q_category": arr(self.q_category),
            "q_device": arr(self.q_device),
            "pctr_noise": float(self.pctr_noise),
            "mu0": float(self.mu0),
            "reference_slot": int(self.reference_slot),
            "logging_ratio": [float(v) for v in self.logging_ratio],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LandscapeSpec":
        d = dict(d)
        return cls(
            fields=tuple(FieldSpec(n, v) for n, v in d.pop("fields")),
            profiles=tuple(SlotProfile(s, tuple(u)) for s, u in d.pop("profiles")),
            n_competitors=tuple(d.pop("n_competitors")),
            comp_scale=tuple(d.pop("comp_scale")),
            logging_ratio=tuple(d.pop("logging_ratio")),
            **{k: (np.asarray(v) if isinstance(v, list) else v) for k, v in d.items()},
        )

    def fingerprint(self) -> str:
        if self._fp is None:
            blob = json.dumps(self.to_dict(), sort_keys=True).encode()
            self._fp = hashlib.sha256(blob).hexdigest()[:16]
        return self._fp


def default_profiles(n_scenes: int, rng: np.random.Generator, shared: bool = False, flat: bool = False):
    ks = [3, 4, 5, 3, 4, 5, 3, 4]
    decays = [0.55, 0.62, 0.7, 0.6, 0.66, 0.74, 0.58, 0.68]
    tops = [1.0, 0.9, 0.95, 0.85, 1.0, 0.92, 0.88, 0.97]
    # flat slots: one profile everywhere, so every scene lands in one group
    profiles = []
    for s in range(n_scenes):
        i = 0 if (shared or flat) else s % len(ks)
        K = ks[i]
        if flat:
            u = (1.0,) * K
        else:
            u = tuple(round(tops[i] * decays[i] ** k, 6) for k in range(K))
        profiles.append(SlotProfile(s, u))
    return tuple(profiles)


def make_landscape(
    preset: str = "trainable",
    seed: int = 0,
    vocab: Optional[dict] = None,
    shared_profile: bool = False,
    flat_slots: bool = False,
    extra_competitors: int = 5,
    comp_scale: float = 0.35,
    pctr_noise: float = 0.3,
    mu0: float = 1.0,
    logging_ratio=(0.4, 1.0),
    **overrides,
) -> LandscapeSpec:
    """Build a named landscape preset. The landscape seed fixes all context
    tables; dataset seeds only drive per-auction sampling."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}' (choose from {sorted(PRESETS)})")
    voc = dict(DEFAULT_VOCAB)
    for k, v in (vocab or {}).items():
        if k not in voc:
            raise ConfigError(f"unknown feature field '{k}'")
        voc[k] = v
    for k, v in voc.items():
        if int(v) < 1:
            raise ConfigError(f"vocab size for field '{k}' must be >= 1, got {v}")
    rng = np.random.default_rng([seed, 7919])
    n_scenes = voc["scene"]
    profiles = default_profiles(n_scenes, rng, shared=shared_profile, flat=flat_slots)
    hours = np.arange(voc["hour"])
    params = dict(
        fields=tuple(FieldSpec(n, voc[n]) for n in FIELD_NAMES),
        profiles=profiles,
        n_competitors=tuple(p.K + extra_competitors for p in profiles),
        comp_scale=tuple(comp_scale for _ in profiles),
        comp_loc_scene=0.5 + rng.normal(0.0, 0.25, n_scenes),
        comp_loc_hour=0.2 * np.sin(2 * np.pi * hours / max(voc["hour"], 1)),
        comp_loc_user=rng.normal(0.0, 0.15, voc["user_segment"]),
        value_scale=0.45,
        value_loc_ad=rng.normal(0.0, 0.3, voc["ad_bucket"]),
        q_user=rng.normal(0.0, 0.3, voc["user_segment"]),
        q_ad=rng.normal(0.0, 0.3, voc["ad_bucket"]),
        q_category=rng.normal(0.0, 0.2, voc["ad_category"]),
        q_device=rng.normal(0.0, 0.1, voc["device"]),
        pctr_noise=pctr_noise,
        mu0=mu0,
        logging_ratio=tuple(logging_ratio),
        name=preset,
        **PRESETS[preset],
    )
    params.update(overrides)
    return LandscapeSpec(**params)
