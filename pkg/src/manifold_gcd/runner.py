"""Training loop, run configuration and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import cluster, losses, model, spectral
from .data import Dataset, SynthConfig, gen_synthetic

log = logging.getLogger(__name__)

EVAL_RESTARTS = 10

METRIC_FIELDS = ("epoch", "loss_total", "loss_base", "loss_mtmc", "entropy", "effective_rank",
                 "frobenius_to_identity", "nuclear_norm", "acc_all", "acc_old", "acc_new")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    d_model: int = 32
    embed_dim: int = 32
    d_hidden: int | None = None
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    output_dir: str | None = None
    diagnostics_every: int = 10

    def __post_init__(self):
        if self.batch_size < 4:
            raise ConfigError("batch_size must be at least 4")
        if self.epochs < 1 or self.diagnostics_every < 1:
            raise ConfigError("epochs and diagnostics_every must be positive")
        if self.d_model < 1 or self.embed_dim < 1:
            raise ConfigError("d_model and embed_dim must be positive")
        if self.lr < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("bad optimizer settings")

    # flat JSON form: synth and loss fields sit at the top level; the
    # dataset seed is spelled data_seed to keep it apart from the run seed

    def to_flat(self) -> dict:
        flat = {"data_seed" if k == "seed" else k: v for k, v in dataclasses.asdict(self.synth).items()}
        flat.update(dataclasses.asdict(self.loss))
        for f in dataclasses.fields(self):
            if f.name not in ("synth", "loss"):
                flat[f.name] = getattr(self, f.name)
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        synth_keys = {f.name for f in dataclasses.fields(SynthConfig)} - {"seed"}
        loss_keys = {f.name for f in dataclasses.fields(losses.LossConfig)}
        run_keys = {f.name for f in dataclasses.fields(cls)} - {"synth", "loss"}
        unknown = set(flat) - synth_keys - loss_keys - run_keys - {"data_seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        run = {k: v for k, v in flat.items() if k in run_keys}
        synth = {k: v for k, v in flat.items() if k in synth_keys}
        synth["seed"] = flat.get("data_seed", run.get("seed", 0))
        try:
            return cls(synth=SynthConfig(**synth), loss=losses.LossConfig(**{k: v for k, v in flat.items() if k in loss_keys}),
                       **run)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_seed(self, seed: int, data_seed: int | None = None) -> "RunConfig":
        synth = dataclasses.replace(self.synth, seed=seed if data_seed is None else data_seed)
        return dataclasses.replace(self, seed=seed, synth=synth)


def load_config(path: str | Path) -> RunConfig:
    try:
        flat = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(flat, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_flat(flat)


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    history: list[dict]
    params: model.EncoderParams
    dataset: Dataset
    prototypes: losses.PrototypeBank | None = None


def batch_objective(cfg: RunConfig, p: dict[str, ad.Node], view1, view2, labels, labeled,
                    protos: ad.Node | None = None, n_known: int = 0):
    """Return (total, base, mtmc) nodes for one mini-batch."""
    lc = cfg.loss
    enc1 = model.encode(view1, p)
    enc2 = model.encode(view2, p)
    lab = np.where(labeled, labels, -1)
    if lc.lambda_bal > 0 and not losses.has_labeled_pairs(lab[labeled]):
        lc = dataclasses.replace(lc, lambda_bal=0.0)
    if lc.base == "CMS":
        k = min(lc.k_neighbors, len(labels))
        base = losses.cms_loss(enc1.z, losses.cms_mean_shift(enc2.z.value, k), lab, labeled, lc)
    else:
        base = losses.gcd_loss(enc1.z, enc2.z, lab, labeled, lc)
    if lc.base == "SIMGCD":
        base = ad.add(base, losses.simgcd_losses(enc1.h, enc2.h, lab, labeled, protos, lc, n_known))
    tape = p["embed_w"].tape
    unlabeled = np.flatnonzero(~labeled)
    if lc.lambda_mtmc > 0 and len(unlabeled) >= 2:
        mtmc = losses.mtmc_loss(ad.row_select(enc1.z, unlabeled), lc)
        total = ad.add(base, ad.scale(mtmc, lc.lambda_mtmc))
    else:
        mtmc = tape.constant(np.zeros((1, 1)))
        total = base
    return total, base, mtmc


def diagnostics(params: model.EncoderParams, ds: Dataset, seed: int) -> dict:
    """Spectral statistics of the unlabeled pool plus clustering accuracy."""
    z, _ = model.embed(ds.batch.patches, params)
    rep = spectral.spectral_report(z[ds.unlabeled_idx])
    res = cluster.ss_kmeans(z, ds.labeled_idx, ds.true_labels[ds.labeled_idx],
                            ds.config.n_classes, seed=seed, n_init=EVAL_RESTARTS)
    res = cluster.score(res, ds.true_labels, ds.batch.is_known_class, ~ds.batch.is_labeled)
    return {
        "entropy": rep.entropy, "effective_rank": rep.effective_rank_99,
        "frobenius_to_identity": rep.frobenius_to_identity, "nuclear_norm": rep.nuclear_norm,
        "acc_all": res.acc_all, "acc_old": res.acc_old, "acc_new": res.acc_new,
    }


def _fmt(v):
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def train(cfg: RunConfig, dataset: Dataset | None = None) -> TrainResult:
    ds = dataset if dataset is not None else gen_synthetic(cfg.synth)
    rng = np.random.default_rng([cfg.seed, 0])
    params = model.init_params(ds.batch.patches.shape[2], cfg.d_model, cfg.embed_dim, rng, cfg.d_hidden)
    bank = None
    if cfg.loss.base == "SIMGCD":
        bank = losses.PrototypeBank.random(ds.config.n_classes_known, ds.config.n_classes_novel, cfg.d_model, rng)
    stream = np.random.default_rng([cfg.seed, 1])
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    out = Path(cfg.output_dir) if cfg.output_dir else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True))
        metrics_path = out / "metrics.csv"
        with metrics_path.open("w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_FIELDS)

    n = len(ds.batch)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = stream.permutation(n)
        sums = np.zeros(3)
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            if len(idx) < 4:
                continue
            view1 = ds.draw_patches(stream, idx)
            view2 = ds.draw_patches(stream, idx)
            tape = ad.Tape()
            p = params.on_tape(tape)
            protos = tape.variable(bank.c, "prototypes") if bank is not None else None
            total, base, mtmc = batch_objective(cfg, p, view1, view2, ds.true_labels[idx],
                                                ds.batch.is_labeled[idx], protos, ds.config.n_classes_known)
            if not math.isfinite(total.item()):
                _dump_divergence(out, epoch, steps, total.item(), base.item(), mtmc.item())
                raise TrainingDiverged(f"loss became {total.item()} at epoch {epoch}, step {steps}")
            tape.backward(total)
            values = params.as_dict()
            opt.step(values, {k: node.grad for k, node in p.items()})
            if bank is not None:
                opt.step({"prototypes": bank.c}, {"prototypes": protos.grad})
                bank.renormalize()
            sums += (total.item(), base.item(), mtmc.item())
            steps += 1
        if epoch % cfg.diagnostics_every == 0 or epoch == cfg.epochs:
            means = sums / max(steps, 1)
            row = {"epoch": epoch, "loss_total": means[0], "loss_base": means[1], "loss_mtmc": means[2]}
            row.update(diagnostics(params, ds, cfg.seed))
            history.append(row)
            log.info("epoch %d total %.4f entropy %.4f acc_new %.3f", epoch, row["loss_total"],
                     row["entropy"], row["acc_new"])
            if metrics_path is not None:
                with metrics_path.open("a", newline="") as fh:
                    csv.writer(fh).writerow([_fmt(row[k]) for k in METRIC_FIELDS])

    if out is not None:
        model.save_params(params, out / "checkpoint")
        if bank is not None:
            np.savetxt(out / "checkpoint" / "prototypes.csv", bank.c, delimiter=",", fmt="%.17g")
    return TrainResult(history, params, ds, bank)


def _dump_divergence(out, epoch, step, total, base, mtmc):
    dump = {"epoch": epoch, "step": step, "loss_total": total, "loss_base": base, "loss_mtmc": mtmc}
    log.error("training diverged: %s", dump)
    if out is not None:
        (out / "divergence.json").write_text(json.dumps(dump, indent=2))


def evaluate(params: model.EncoderParams, ds: Dataset, k: int | None = None, seed: int = 0) -> dict:
    z, _ = model.embed(ds.batch.patches, params)
    k = ds.config.n_classes if k is None else k
    res = cluster.ss_kmeans(z, ds.labeled_idx, ds.true_labels[ds.labeled_idx], k, seed=seed, n_init=EVAL_RESTARTS)
    res = cluster.score(res, ds.true_labels, ds.batch.is_known_class, ~ds.batch.is_labeled)
    return {"k_used": k, "acc_all": res.acc_all, "acc_old": res.acc_old, "acc_new": res.acc_new,
            "iterations": res.iterations, "seed": seed}


def _train_to_history(cfg: RunConfig) -> list[dict]:
    return train(cfg).history


def worker_count(n_runs: int) -> int:
    raw = os.environ.get("MANIFOLD_GCD_THREADS")
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"MANIFOLD_GCD_THREADS must be an integer, got {raw!r}") from None
        return max(1, min(cap, n_runs))
    return max(1, n_runs)


def train_many(configs: list[RunConfig]) -> list[list[dict]]:
    """Run independent configurations, fanned out over worker processes."""
    workers = worker_count(len(configs))
    if workers == 1:
        return [_train_to_history(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_to_history, configs))
