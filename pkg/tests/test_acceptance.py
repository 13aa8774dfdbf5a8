"""Acceptance suite.

Each test prints one ``[ACCEPT n] PASS|FAIL`` line with the measured
quantities.  Run ``pytest tests/test_acceptance.py -s`` (or execute this
file directly) to see them.
"""
import itertools
import json
import statistics
import time

import numpy as np
import pytest

from manifold_gcd import autodiff as ad
from manifold_gcd import cli, linalg, losses, runner, spectral
from manifold_gcd.cluster import estimate_k, hungarian
from manifold_gcd.data import SynthConfig, gen_synthetic
from manifold_gcd.losses import LossConfig, PrototypeBank


def report(n: int, ok: bool, detail: str) -> None:
    print(f"[ACCEPT {n}] {'PASS' if ok else 'FAIL'} {detail}", flush=True)


def _unit(rng, n, d):
    return linalg.unit_rows(rng.standard_normal((n, d)))


# 1. gradient correctness

def _instances(rng, count):
    for _ in range(count):
        b = int(rng.integers(4, 9))
        d = int(rng.integers(3, 9))
        labels = rng.integers(0, 3, size=b)
        mask = rng.random(b) < 0.6
        mask[:2] = True
        labels[1] = labels[0]  # guarantees a labeled pair
        yield b, d, labels, mask


def _grad_cases(rng):
    cfg = LossConfig(tau=0.5, lambda_bal=0.35)
    cases = {name: [] for name in ("selfsup", "sup", "gcd", "simgcd", "cms", "mtmc")}
    for b, d, labels, mask in _instances(rng, 20):
        z, zp = rng.standard_normal((b, d)), rng.standard_normal((b, d))
        norm = ad.l2_normalize_rows
        cases["selfsup"].append((lambda x, y: losses.selfsup_contrastive(norm(x), norm(y), cfg.tau), [z, zp]))
        cases["sup"].append((lambda x, y, lab=labels: losses.sup_contrastive(norm(x), norm(y), lab, cfg.tau), [z, zp]))
        cases["gcd"].append((lambda x, y, lab=labels, m=mask: losses.gcd_loss(norm(x), norm(y), lab, m, cfg),
                             [z, zp]))
        shifted = losses.cms_mean_shift(linalg.unit_rows(zp), min(3, b))
        cases["cms"].append((lambda x, lab=labels, m=mask, s=shifted: losses.cms_loss(norm(x), s, lab, m, cfg), [z]))
        cases["mtmc"].append((lambda x: losses.mtmc_loss(x, cfg), [z]))
        protos = PrototypeBank.random(3, 2, d, rng).c
        hp = rng.standard_normal((b, d))

        # the teacher is stop-gradient, so the oracle holds it at the unperturbed prototypes
        tape = ad.Tape()
        frozen = losses._probabilities(tape.constant(hp), tape.constant(protos), cfg.tau / 2.0).value

        def simgcd(h, c, lab=labels, m=mask, hp=hp, frozen=frozen):
            tape = ad._tape_of(h)
            with pytest.MonkeyPatch.context() as mp:
                mp.setattr(losses, "_probabilities", lambda *a: tape.constant(frozen))
                return losses.simgcd_losses(h, tape.constant(hp), lab, m, c, cfg, n_known=3)

        cases["simgcd"].append((simgcd, [z, protos]))
    return cases


def test_criterion_1_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for name, items in _grad_cases(rng).items():
        worst[name] = max(max(ad.check_gradients(build, inputs)) for build, inputs in items)
    elapsed = time.perf_counter() - start
    ok = all(e <= 1e-4 for e in worst.values()) and elapsed < 30
    report(1, ok, f"worst rel err {json.dumps({k: float(f'{v:.2e}') for k, v in worst.items()})} "
                  f"over 20 instances each, {elapsed:.1f}s")
    assert ok


# 2. nuclear-norm bounds

def test_criterion_2_nuclear_bounds():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    violations, worst_gap, overshoot = 0, 0.0, 0.0
    for _ in range(1000):
        p, d = rng.integers(1, 33, size=2)
        nuc = linalg.nuclear_norm(_unit(rng, p, d))
        bound = np.sqrt(p * min(p, d))
        # rank-one inputs sit on the bound; allow only rounding-level overshoot
        violations += not (0.0 <= nuc <= bound * (1 + 8 * np.finfo(float).eps))
        overshoot = max(overshoot, nuc - bound)
    for d in range(1, 33):
        for p in range(1, d + 1):
            rows = linalg.random_orthogonal(d, rng)[:p]
            worst_gap = max(worst_gap, abs(linalg.nuclear_norm(rows) - np.sqrt(p * min(p, d))))
    elapsed = time.perf_counter() - start
    ok = violations == 0 and worst_gap <= 1e-9 and elapsed < 10
    report(2, ok, f"{violations} bound violations / 1000 (max overshoot {overshoot:.1e}), orthonormal gap {worst_gap:.1e}, {elapsed:.1f}s")
    assert ok


# 3. entropy-rank bound

def test_criterion_3_entropy_rank():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = np.inf
    for _ in range(1000):
        n, d = int(rng.integers(1, 129)), int(rng.integers(1, 65))
        z = _unit(rng, n, d)
        eig = np.clip(np.linalg.eigvalsh(spectral.autocorrelation(z)), 0.0, None)
        worst = min(worst, np.log(spectral.effective_rank_99(eig)) - spectral.von_neumann_entropy(eig))
    eq_gap = max(abs(np.log(spectral.effective_rank_99(np.full(k, 1.0 / k)))
                     - spectral.von_neumann_entropy(np.full(k, 1.0 / k))) for k in range(1, 65))
    elapsed = time.perf_counter() - start
    ok = worst >= -1e-9 and eq_gap <= 1e-9 and elapsed < 5
    report(3, ok, f"min log(erank)-H {worst:.2e} over 1000 spectra, uniform gap {eq_gap:.1e}, {elapsed:.2f}s")
    assert ok


# 4. centroid of identical views

def test_criterion_4_centroid():
    rng = np.random.default_rng(3)
    errs = {}
    for k in (1, 2, 8, 64):
        v = _unit(rng, 1, 16)
        errs[k] = float(abs(np.linalg.norm(np.repeat(v, k, axis=0).mean(axis=0)) - 1.0))
    ok = max(errs.values()) <= 1e-12
    report(4, ok, f"|norm-1| per K {errs}")
    assert ok


# 5. uniformity versus concentration

UNIFORM_BAND = (0.84, 0.86)  # 50-seed Monte Carlo: 0.8471..0.8511, theory 8/(3*pi)


def _concentrated(rng, n, d, clusters=4, spread=0.1):
    centers = _unit(rng, clusters, d)
    return linalg.unit_rows(centers[rng.integers(0, clusters, n)] + spread / np.sqrt(d) * rng.standard_normal((n, d)))


def test_criterion_5_uniformity():
    start = time.perf_counter()
    n = d = 256
    ratios, wins = [], 0
    for seed in range(50):
        rng = np.random.default_rng([5, seed])
        uniform = linalg.nuclear_norm(_unit(rng, n, d)) / np.sqrt(n * d)
        conc = linalg.nuclear_norm(_concentrated(rng, n, d)) / np.sqrt(n * d)
        ratios.append(uniform)
        wins += uniform > conc
    elapsed = time.perf_counter() - start
    inside = sum(UNIFORM_BAND[0] <= r <= UNIFORM_BAND[1] for r in ratios)
    ok = inside == 50 and wins >= 48 and elapsed < 60
    report(5, ok, f"uniform ratio {min(ratios):.4f}..{max(ratios):.4f} (MP {spectral.mp_mean_sqrt(1.0):.4f}), "
                  f"{inside}/50 in band {UNIFORM_BAND}, beats concentrated {wins}/50, {elapsed:.1f}s")
    assert ok


# 6. hungarian versus brute force

def _brute(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return _brute(cost.T)


def test_criterion_6_hungarian():
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    mismatches = 0
    for t in range(200):
        n = int(rng.integers(1, 8))
        m = n if t % 2 == 0 else int(rng.integers(1, 8))
        cost = rng.integers(-20, 21, size=(n, m)).astype(float)
        mismatches += hungarian(cost)[2] != _brute(cost)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    report(6, ok, f"{mismatches} mismatches / 200, {elapsed:.1f}s")
    assert ok


# 7. anti-collapse trend

@pytest.mark.slow
def test_criterion_7_mtmc_trend():
    rows = {0.0: [], 0.1: []}
    pair_times = []
    for seed in range(5):
        t0 = time.perf_counter()
        for lam in rows:
            cfg = runner.RunConfig(loss=LossConfig(lambda_mtmc=lam), epochs=200, diagnostics_every=200).with_seed(seed)
            rows[lam].append(runner.train(cfg).history[-1])
        pair_times.append(time.perf_counter() - t0)

    def med(lam, key):
        return statistics.median(r[key] for r in rows[lam])

    better_new = sum(b["acc_new"] > a["acc_new"] for a, b in zip(rows[0.0], rows[0.1]))
    checks = {
        "entropy": med(0.1, "entropy") > med(0.0, "entropy"),
        "erank": med(0.1, "effective_rank") > med(0.0, "effective_rank"),
        "frob": med(0.1, "frobenius_to_identity") < med(0.0, "frobenius_to_identity"),
        "acc_new_median": med(0.1, "acc_new") >= med(0.0, "acc_new") - 0.02,
        "acc_new_wins": better_new >= 3,
        "runtime": max(pair_times) < 300,
    }
    ok = all(checks.values())
    report(7, ok, f"entropy {med(0.0, 'entropy'):.3f}->{med(0.1, 'entropy'):.3f}, "
                  f"erank {med(0.0, 'effective_rank')}->{med(0.1, 'effective_rank')}, "
                  f"frob {med(0.0, 'frobenius_to_identity'):.4f}->{med(0.1, 'frobenius_to_identity'):.4f}, "
                  f"acc_new {med(0.0, 'acc_new'):.3f}->{med(0.1, 'acc_new'):.3f} (higher in {better_new}/5), "
                  f"max pair {max(pair_times):.0f}s, failed={[k for k, v in checks.items() if not v]}")
    assert ok


# 8. K estimation

def test_criterion_8_estimate_k():
    start = time.perf_counter()
    found = []
    for seed in range(5):
        ds = gen_synthetic(SynthConfig(n_classes_known=2, n_classes_novel=3, samples_per_class=40, seed=seed,
                                       sample_sigma=0.3, noise_sigma=0.1, patch_sigma=0.2))
        z = linalg.unit_rows(ds.batch.patches.mean(axis=1))
        found.append(estimate_k(z, ds.labeled_idx, ds.true_labels[ds.labeled_idx], 2, 10, seed=seed).k)
    elapsed = time.perf_counter() - start
    hits = sum(abs(k - 5) <= 1 for k in found)
    ok = hits >= 4 and elapsed < 120
    report(8, ok, f"K-hat per seed {found}, within 1 of 5 in {hits}/5, {elapsed:.1f}s")
    assert ok


# 9. spectral invariances

def test_criterion_9_invariances():
    start = time.perf_counter()
    rng = np.random.default_rng(9)
    worst_inv = 0.0
    for _ in range(50):
        n, d = int(rng.integers(2, 65)), int(rng.integers(2, 33))
        z = _unit(rng, n, d)
        a = spectral.spectral_report(z).scalars()
        b = spectral.spectral_report(z @ linalg.random_orthogonal(d, rng)).scalars()
        worst_inv = max(worst_inv, max(abs(a[k] - b[k]) for k in a))
    worst_rec = 0.0
    for _ in range(500):
        m = rng.standard_normal(tuple(rng.integers(1, 41, size=2)))
        s = linalg.svd(m)
        rec = (s.u * s.s) @ s.vt
        worst_rec = max(worst_rec, np.linalg.norm(rec - m) / np.linalg.norm(m))
    elapsed = time.perf_counter() - start
    ok = worst_inv <= 1e-8 and worst_rec <= 1e-10 and elapsed < 30
    report(9, ok, f"max scalar drift {worst_inv:.1e} over 50 rotations, max SVD rel err {worst_rec:.1e} / 500, "
                  f"{elapsed:.1f}s")
    assert ok


# 10. reproducibility

def test_criterion_10_reproducible(tmp_path):
    cfg = {"epochs": 3, "samples_per_class": 10, "diagnostics_every": 1, "seed": 13}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / name), "--quiet"]) == 0
    first = (tmp_path / "a" / "metrics.csv").read_bytes()
    ok = first == (tmp_path / "b" / "metrics.csv").read_bytes() and len(first.splitlines()) == 4
    report(10, ok, f"metrics.csv identical across two train invocations ({len(first)} bytes)")
    assert ok


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-s", "-q"]))
