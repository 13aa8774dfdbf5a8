"""Class-token encoder: attention pooling over patch tokens followed by a
projection head onto the unit sphere."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

PARAM_NAMES = ("embed_w", "cls0", "wq", "wk", "wv", "proj_w1", "proj_b1", "proj_w2", "proj_b2")


@dataclass
class SampleBatch:
    """``patches`` has shape (B, P, d_in).  ``labels`` holds -1 for samples
    whose label is withheld."""

    patches: np.ndarray
    labels: np.ndarray
    is_labeled: np.ndarray
    is_known_class: np.ndarray

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 3 or min(self.patches.shape[1:]) < 1:
            raise ValueError(f"patches must be (B, P>=1, d_in>=1), got {self.patches.shape}")
        b = self.patches.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.is_labeled = np.asarray(self.is_labeled, dtype=bool)
        self.is_known_class = np.asarray(self.is_known_class, dtype=bool)
        for name in ("labels", "is_labeled", "is_known_class"):
            if getattr(self, name).shape != (b,):
                raise ValueError(f"{name} must have length {b}")
        if np.any(self.labels[self.is_labeled] < 0):
            raise ValueError("a labeled sample is missing its label")
        if np.any(~self.is_known_class[self.is_labeled]):
            raise ValueError("labeled samples must come from known classes")

    def __len__(self):
        return self.patches.shape[0]

    def subset(self, idx) -> "SampleBatch":
        idx = np.asarray(idx)
        return SampleBatch(self.patches[idx], self.labels[idx], self.is_labeled[idx], self.is_known_class[idx])


@dataclass
class EncoderParams:
    embed_w: np.ndarray
    cls0: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    proj_w1: np.ndarray
    proj_b1: np.ndarray
    proj_w2: np.ndarray
    proj_b2: np.ndarray

    def __post_init__(self):
        d_in, d_model = self.embed_w.shape
        d_hidden = self.proj_w1.shape[1]
        out_dim = self.proj_w2.shape[1]
        expected = {
            "cls0": (1, d_model), "wq": (d_model, d_model), "wk": (d_model, d_model),
            "wv": (d_model, d_model), "proj_w1": (d_model, d_hidden), "proj_b1": (1, d_hidden),
            "proj_w2": (d_hidden, out_dim), "proj_b2": (1, out_dim),
        }
        for name, shape in expected.items():
            value = getattr(self, name)
            if value.shape != shape:
                raise ValueError(f"{name} has shape {value.shape}, expected {shape}")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def d_model(self) -> int:
        return self.embed_w.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def on_tape(self, tape: ad.Tape) -> dict[str, ad.Node]:
        return {name: tape.variable(value, name) for name, value in self.as_dict().items()}


@dataclass
class ClassTokenBatch:
    z: ad.Node  # (B, D), unit rows
    h: ad.Node  # (B, d_model)
    attention: np.ndarray = field(default=None, repr=False)  # (B, P)


def init_params(d_in: int, d_model: int, out_dim: int, rng: np.random.Generator,
                d_hidden: int | None = None) -> EncoderParams:
    d_hidden = d_hidden or 2 * d_model

    def uniform(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return EncoderParams(
        embed_w=uniform(d_in, (d_in, d_model)),
        cls0=uniform(d_model, (1, d_model)),
        wq=uniform(d_model, (d_model, d_model)),
        wk=uniform(d_model, (d_model, d_model)),
        wv=uniform(d_model, (d_model, d_model)),
        proj_w1=uniform(d_model, (d_model, d_hidden)),
        proj_b1=np.zeros((1, d_hidden)),
        proj_w2=uniform(d_hidden, (d_hidden, out_dim)),
        proj_b2=np.zeros((1, out_dim)),
    )


def _pool(vis: ad.Node, n_samples: int, n_patches: int, p: dict[str, ad.Node]):
    """Attention pooling for ``n_samples`` stacked patch blocks.

    ``vis`` is (n_samples * n_patches, d_model).  The query comes from the
    shared initial class token, so one score column serves every sample.
    """
    d = vis.shape[1]
    q = ad.matmul(p["cls0"], p["wq"])
    k = ad.matmul(vis, p["wk"])
    v = ad.matmul(vis, p["wv"])
    scores = ad.scale(ad.matmul(k, ad.transpose(q)), 1.0 / math.sqrt(d))
    alpha = ad.row_softmax(ad.reshape(scores, (n_samples, n_patches)))
    weighted = ad.mul(ad.reshape(alpha, (n_samples * n_patches, 1)), v)
    # summing the P row blocks of each sample is a product with stacked identities
    stacker = np.tile(np.eye(d), (n_patches, 1))
    pooled = ad.matmul(ad.reshape(weighted, (n_samples, n_patches * d)), stacker)
    return ad.add(pooled, p["cls0"]), alpha


def attend_pool(vis: ad.Node, p: dict[str, ad.Node]) -> tuple[ad.Node, np.ndarray]:
    """Update the class token from one sample's ``P x d_model`` patch tokens.

    Returns the updated token (``1 x d_model``) and the attention weights.
    """
    if vis.shape[0] < 1:
        raise ValueError("need at least one patch token")
    cls, alpha = _pool(vis, 1, vis.shape[0], p)
    return cls, alpha.value[0]


def project(h: ad.Node, p: dict[str, ad.Node]) -> ad.Node:
    hidden = ad.relu(ad.add(ad.matmul(h, p["proj_w1"]), p["proj_b1"]))
    out = ad.add(ad.matmul(hidden, p["proj_w2"]), p["proj_b2"])
    return ad.l2_normalize_rows(out)


def encode(patches: np.ndarray, p: dict[str, ad.Node]) -> ClassTokenBatch:
    """Differentiable forward pass for a (B, P, d_in) patch array."""
    patches = np.asarray(patches, dtype=np.float64)
    b, n_patches, d_in = patches.shape
    tape = p["embed_w"].tape
    x = tape.constant(patches.reshape(b * n_patches, d_in))
    vis = ad.matmul(x, p["embed_w"])
    h, alpha = _pool(vis, b, n_patches, p)
    return ClassTokenBatch(z=project(h, p), h=h, attention=alpha.value)


def embed(patches: np.ndarray, params: EncoderParams) -> tuple[np.ndarray, np.ndarray]:
    """Plain forward pass returning (z, h) as arrays."""
    tape = ad.Tape()
    out = encode(patches, {k: tape.constant(v) for k, v in params.as_dict().items()})
    return out.z.value, out.h.value


def save_params(params: EncoderParams, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, value in params.as_dict().items():
        np.savetxt(directory / f"{name}.csv", value, delimiter=",", fmt="%.17g")
        shapes[name] = list(value.shape)
    manifest = {"format": "manifold-gcd-params/1", "shapes": shapes}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_params(directory: str | Path) -> EncoderParams:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    values = {}
    for name in PARAM_NAMES:
        shape = tuple(manifest["shapes"][name])
        arr = np.loadtxt(directory / f"{name}.csv", delimiter=",", ndmin=2)
        if arr.shape != shape:
            arr = arr.reshape(shape)
        values[name] = arr
    return EncoderParams(**values)

