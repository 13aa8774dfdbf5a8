"""Synthetic GCD datasets made of patch tokens, and embedding CSV I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .linalg import as_matrix
from .model import SampleBatch


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_classes_known: int = 10
    n_classes_novel: int = 10
    samples_per_class: int = 30
    patches_per_sample: int = 8
    input_dim: int = 64
    class_subspace_dim: int = 6
    noise_sigma: float = 0.3
    labeled_fraction: float = 0.5
    seed: int = 0
    separation: float = 1.0  # norm of each class anchor
    sample_sigma: float = 0.6  # in-subspace spread of samples around the anchor
    patch_sigma: float = 0.3  # in-subspace spread of patches around their sample

    def validate(self) -> None:
        if self.n_classes_known < 1 or self.n_classes_novel < 0:
            raise DataError("need at least one known class and a non-negative novel count")
        if self.samples_per_class < 1 or self.patches_per_sample < 1 or self.input_dim < 1:
            raise DataError("samples_per_class, patches_per_sample and input_dim must be positive")
        if not 1 <= self.class_subspace_dim <= self.input_dim:
            raise DataError(f"class_subspace_dim must lie in [1, {self.input_dim}]")
        if not 0 < self.labeled_fraction <= 1:
            raise DataError("labeled_fraction must lie in (0, 1]")
        if min(self.noise_sigma, self.sample_sigma, self.patch_sigma) < 0 or self.separation <= 0:
            raise DataError("noise scales must be non-negative and separation positive")

    @property
    def n_classes(self) -> int:
        return self.n_classes_known + self.n_classes_novel


@dataclass
class Dataset:
    batch: SampleBatch
    true_labels: np.ndarray
    known_classes: np.ndarray
    novel_classes: np.ndarray
    config: SynthConfig
    latents: np.ndarray  # (N, d_in) per-sample centre
    bases: np.ndarray  # (C, d_in, s) class subspace bases

    @property
    def labeled_idx(self) -> np.ndarray:
        return np.flatnonzero(self.batch.is_labeled)

    @property
    def unlabeled_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.batch.is_labeled)

    def draw_patches(self, rng: np.random.Generator, idx=None) -> np.ndarray:
        """Fresh patch tokens for samples ``idx``: same latents, new
        patch jitter and off-subspace noise.  Used to make augmented views."""
        idx = np.arange(len(self.latents)) if idx is None else np.asarray(idx)
        return _patches(self.config, self.latents[idx], self.bases[self.true_labels[idx]], rng)


def _class_geometry(cfg: SynthConfig, rng: np.random.Generator):
    d, s, c = cfg.input_dim, cfg.class_subspace_dim, cfg.n_classes
    if c <= d:
        anchors = np.linalg.qr(rng.standard_normal((d, c)))[0].T
    else:
        anchors = rng.standard_normal((c, d))
        anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    bases = np.empty((c, d, s))
    for k in range(c):
        # the anchor direction is the first basis vector of its class subspace
        raw = np.column_stack([anchors[k], rng.standard_normal((d, s - 1))])
        q, r = np.linalg.qr(raw)
        q *= np.sign(np.diag(r))
        bases[k] = q
    return anchors, bases


def _patches(cfg: SynthConfig, latents, bases, rng):
    n, d = latents.shape
    p, s = cfg.patches_per_sample, cfg.class_subspace_dim
    jitter = rng.standard_normal((n, p, s)) * cfg.patch_sigma
    out = latents[:, None, :] + np.einsum("nds,nps->npd", bases, jitter)
    if cfg.noise_sigma > 0:
        noise = rng.standard_normal((n, p, d)) * cfg.noise_sigma
        # keep only the component orthogonal to the class subspace
        noise -= np.einsum("nds,nps->npd", bases, np.einsum("nds,npd->nps", bases, noise))
        out += noise
    return out


def gen_synthetic(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    anchors, bases = _class_geometry(cfg, rng)
    m = cfg.samples_per_class
    true = np.repeat(np.arange(cfg.n_classes), m)
    coeff = rng.standard_normal((len(true), cfg.class_subspace_dim)) * cfg.sample_sigma
    latents = cfg.separation * anchors[true] + np.einsum("nds,ns->nd", bases[true], coeff)
    patches = _patches(cfg, latents, bases[true], rng)

    known = np.arange(cfg.n_classes_known)
    novel = np.arange(cfg.n_classes_known, cfg.n_classes)
    is_known = true < cfg.n_classes_known
    is_labeled = np.zeros(len(true), bool)
    n_lab = int(round(cfg.labeled_fraction * m))
    for k in known:
        members = np.flatnonzero(true == k)
        is_labeled[rng.permutation(members)[:n_lab]] = True
    labels = np.where(is_labeled, true, -1)
    batch = SampleBatch(patches, labels, is_labeled, is_known)
    return Dataset(batch, true, known, novel, cfg, latents, bases)


# persistence

def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(directory / "dataset.npz", patches=ds.batch.patches, true_labels=ds.true_labels,
                        is_labeled=ds.batch.is_labeled, latents=ds.latents, bases=ds.bases)
    manifest = {
        "config": asdict(ds.config),
        "known_classes": ds.known_classes.tolist(),
        "novel_classes": ds.novel_classes.tolist(),
        "labeled_idx": ds.labeled_idx.tolist(),
        "unlabeled_idx": ds.unlabeled_idx.tolist(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = SynthConfig(**manifest["config"])
    arrays = np.load(directory / "dataset.npz")
    true = arrays["true_labels"]
    is_labeled = arrays["is_labeled"].astype(bool)
    if not np.array_equal(np.flatnonzero(is_labeled), manifest["labeled_idx"]):
        raise DataError(f"{directory}: split indices disagree with dataset.npz")
    is_known = true < cfg.n_classes_known
    batch = SampleBatch(arrays["patches"], np.where(is_labeled, true, -1), is_labeled, is_known)
    return Dataset(batch, true, np.array(manifest["known_classes"]), np.array(manifest["novel_classes"]),
                   cfg, arrays["latents"], arrays["bases"])


def save_embeddings(z, path: str | Path) -> Path:
    z = as_matrix(z, "embeddings")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(f"dim={z.shape[1]}\n")
        for row in z:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    return path


def load_embeddings(path: str | Path) -> np.ndarray:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        if not header.startswith("dim="):
            raise DataError(f"{path}: line 1: expected header 'dim=<D>', got {header!r}")
        try:
            dim = int(header[4:])
        except ValueError:
            raise DataError(f"{path}: line 1: bad dimension {header[4:]!r}") from None
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != dim:
                raise DataError(f"{path}: row {lineno - 1} (line {lineno}): expected {dim} values, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise DataError(f"{path}: row {lineno - 1} (line {lineno}): non-numeric value") from None
    if not rows:
        raise DataError(f"{path}: no embedding rows")
    return as_matrix(np.array(rows), str(path))
