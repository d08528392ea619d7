"""SDR scoring, leakage sweeps, the train/test mismatch run and memory probes."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import binomtest

from . import recurrent as rec
from .corpus import DatasetManifest, load_mixture
from .experiment import (FrontEndConfig, SpeakerConfig, SpeakerModels, fit_dc_model,
                         fit_speaker_models, mixture_ivectors, model_config_for)
from .separation import DCModel, separate
from .signal import Waveform
from .training import AdamState, TrainConfig, adam_step

log = logging.getLogger(__name__)

SDR_CAP = 60.0
FIGURE3_TAUS = (0.0, 0.025, 0.1, 0.3, math.inf)
SWEEP_COLUMNS = ["variant", "a", "tau_seconds", "ivector_conditioning", "seed",
                 "sdr_improvement_db", "status"]


def _samples(x):
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def si_sdr(estimate, reference, cap: float = SDR_CAP) -> float:
    """Scale-invariant SDR in dB, capped at ``cap``."""
    est, ref = _samples(estimate), _samples(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = ref @ ref
    if ref_energy == 0:
        raise ValueError("reference signal is all zeros")
    target = (est @ ref / ref_energy) * ref
    noise = target - est
    num, den = target @ target, noise @ noise
    if den == 0 or num / den > 10 ** (cap / 10):
        return cap
    if num == 0:
        return -cap
    return max(-cap, 10 * math.log10(num / den))


def score_estimates(estimates: Sequence, references: Sequence, mixture):
    """Best-permutation mean SDR improvement over the unprocessed mixture.

    Returns (improvement dB, permutation) where ``estimates[perm[s]]`` is
    matched to ``references[s]``.
    """
    S = len(references)
    base = [si_sdr(mixture, r) for r in references]
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(S)):
        score = np.mean([si_sdr(estimates[perm[s]], references[s]) for s in range(S)])
        if score > best:
            best, best_perm = score, perm
    return float(best - np.mean(base)), best_perm


@dataclass
class SdrReport:
    mixture_ids: list
    improvements: np.ndarray
    permutations: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.improvements)) if len(self.improvements) else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.improvements)) if len(self.improvements) else float("nan")

    def to_dict(self) -> dict:
        return {"mean_db": self.mean, "std_db": self.std,
                "mixtures": [{"mixture_id": m, "sdr_improvement_db": float(v), "permutation": list(p)}
                             for m, v, p in zip(self.mixture_ids, self.improvements, self.permutations)]}


def evaluate_separation(model: DCModel, manifest: DatasetManifest, split: str = "test",
                        speakers: SpeakerModels | None = None, a: float | None = None,
                        seed: int = 0, separator=None) -> SdrReport:
    ids, imps, perms = [], [], []
    for row in manifest.split(split):
        sample = load_mixture(manifest, row)
        if separator is not None:
            est = separator(sample)
        else:
            est = separate(model, sample.mixture, len(sample.sources),
                           ivectors=mixture_ivectors(row, speakers), seed=seed, a=a)
        imp, perm = score_estimates(est, sample.sources, sample.mixture)
        ids.append(row.mixture_id)
        imps.append(imp)
        perms.append(perm)
    return SdrReport(ids, np.array(imps), perms)


# -- leakage sweep -------------------------------------------------------------

@dataclass
class SweepConfig:
    tau_grid: list = field(default_factory=lambda: list(FIGURE3_TAUS))
    variants: list = field(default_factory=lambda: ["basic", "red_cut", "blue_cut"])
    conditioning: list = field(default_factory=lambda: [False, True])
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class SweepJob:
    variant: str
    tau: float
    conditioned: bool
    seed: int

    def leak(self, hop_seconds: float) -> float:
        return rec.lifetime_to_leak(self.tau, hop_seconds)


def sweep_jobs(cfg: SweepConfig) -> list[SweepJob]:
    return [SweepJob(v, float(t), bool(c), int(s))
            for v in cfg.variants for t in cfg.tau_grid for c in cfg.conditioning for s in cfg.seeds]


def run_cell(manifest: DatasetManifest, base_model: rec.ModelConfig, train_cfg: TrainConfig,
             fe: FrontEndConfig, variant: str, a: float, seed: int,
             speakers: SpeakerModels | None = None, speaker_cfg: SpeakerConfig | None = None,
             eval_a: float | None = None, raw_cache: dict | None = None):
    """Train one DC model at leak ``a`` and return (model, test report)."""
    mcfg = model_config_for(replace(base_model, variant=rec.Variant(variant),
                                    leak=replace(base_model.leak, a=a)),
                            fe, speakers is not None, speaker_cfg)
    model, _ = fit_dc_model(manifest, mcfg, replace(train_cfg, seed=seed), fe, speakers,
                            raw_cache=raw_cache)
    report = evaluate_separation(model, manifest, "test", speakers, a=eval_a, seed=seed)
    return model, report


def _sweep_worker(args):
    manifest, base_model, train_cfg, fe, job, speakers, speaker_cfg = args
    a = job.leak(fe.hop_seconds)
    row = {"variant": job.variant, "a": a, "tau_seconds": rec.leak_to_lifetime(a, fe.hop_seconds),
           "ivector_conditioning": job.conditioned, "seed": job.seed}
    try:
        _, report = run_cell(manifest, base_model, train_cfg, fe, job.variant, a, job.seed,
                             speakers if job.conditioned else None, speaker_cfg)
        row.update(sdr_improvement_db=report.mean, status="ok")
    except Exception as exc:  # a failed cell must not abort the sweep
        log.exception("sweep cell %s failed", job)
        row.update(sdr_improvement_db=float("nan"), status=f"error: {exc}")
    return row


def sweep_leak(manifest: DatasetManifest, base_model: rec.ModelConfig, train_cfg: TrainConfig,
               fe: FrontEndConfig, sweep: SweepConfig, speaker_cfg: SpeakerConfig | None = None,
               jobs: int = 1, out_dir: str | Path | None = None) -> list[dict]:
    """Train and test one model per (variant, tau, conditioning, seed) cell."""
    speakers = None
    if any(sweep.conditioning):
        speakers = fit_speaker_models(manifest, speaker_cfg or SpeakerConfig())
    work = [(manifest, base_model, train_cfg, fe, j, speakers, speaker_cfg) for j in sweep_jobs(sweep)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            rows = list(ex.map(_sweep_worker, work))
    else:
        rows = [_sweep_worker(w) for w in work]
    if out_dir is not None:
        write_sweep(out_dir, rows)
    return rows


def summarize_sweep(rows: Sequence[dict]) -> list[dict]:
    groups: dict = {}
    for r in rows:
        key = (r["variant"], r["a"], r["ivector_conditioning"])
        groups.setdefault(key, []).append(r)
    out = []
    for (variant, a, cond), rs in groups.items():
        vals = [r["sdr_improvement_db"] for r in rs if r["status"] == "ok"]
        out.append({"variant": variant, "a": a, "tau_seconds": rs[0]["tau_seconds"],
                    "ivector_conditioning": cond, "seeds": [r["seed"] for r in rs],
                    "per_seed_db": [r["sdr_improvement_db"] for r in rs],
                    "mean_sdr_improvement_db": float(np.mean(vals)) if vals else None})
    return out


def write_sweep(out_dir: str | Path, rows: Sequence[dict]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in SWEEP_COLUMNS})
    with open(out / "sweep_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summarize_sweep(rows), fh, indent=2, default=str)


# -- mismatch --------------------------------------------------------------------

def mismatch_experiment(manifest: DatasetManifest, base_model: rec.ModelConfig,
                        train_cfg: TrainConfig, fe: FrontEndConfig, seeds: Sequence[int] = (0, 1, 2),
                        test_a: float = 0.0, raw_cache: dict | None = None,
                        trained: dict | None = None) -> list[dict]:
    """Blue-cut models trained without leak and with leak ``test_a``, both tested at ``test_a``.

    ``trained`` may map (a, seed) to already trained models to avoid refits.
    """
    raw_cache = {} if raw_cache is None else raw_cache
    trained = {} if trained is None else trained
    rows = []
    for seed in seeds:
        pair = {"seed": seed, "test_a": test_a}
        for label, train_a in (("train_no_leak", 1.0), ("train_with_leak", test_a)):
            model = trained.get((train_a, seed))
            if model is None:
                model, _ = run_cell(manifest, base_model, train_cfg, fe, "blue_cut", train_a, seed,
                                    raw_cache=raw_cache)
                trained[(train_a, seed)] = model
            report = evaluate_separation(model, manifest, "test", a=test_a, seed=seed)
            pair[f"{label}_db"] = report.mean
        rows.append(pair)
    return rows


# -- delayed-recall memory probe ---------------------------------------------------

@dataclass
class ProbeConfig:
    layers: int = 2
    units: int = 16
    seq_extra: int = 40          # frames scored per sequence beyond the delay
    batch_size: int = 32
    steps: int = 400
    learning_rate: float = 1e-2
    eval_sequences: int = 64


def recall_task(batch: int, length: int, delay: int, rng: np.random.Generator):
    """Random bits in, the bit from ``delay`` frames earlier out (frames t >= delay)."""
    bits = rng.integers(0, 2, size=(length, batch))
    X = np.stack([2.0 * bits - 1.0], axis=-1)
    Y = np.zeros_like(bits)
    Y[delay:] = bits[:length - delay]
    return X, Y


def _probe_forward(config, params, X, Y, delay, need_grad=True):
    out, cache = rec.stack_forward(config, params, X)
    logits = out @ params["head.W"].T[:, 0] + params["head.b"][0]
    valid = np.zeros_like(logits, dtype=bool)
    valid[delay:] = True
    p = 1.0 / (1.0 + np.exp(-logits))
    eps = 1e-12
    n = valid.sum()
    loss = -np.sum(valid * (Y * np.log(p + eps) + (1 - Y) * np.log(1 - p + eps))) / n
    correct = ((p > 0.5) == (Y == 1)) & valid
    if not need_grad:
        return loss, int(correct.sum()), int(n), None
    dlogit = valid * (p - Y) / n
    grads = {"head.W": np.einsum("tb,tbh->h", dlogit, out)[None, :],
             "head.b": np.array([dlogit.sum()])}
    dOut = dlogit[:, :, None] * params["head.W"][0][None, None, :]
    rg, _ = rec.stack_backward(config, params, cache, dOut)
    grads.update(rg)
    return loss, int(correct.sum()), int(n), grads


def memory_probe(variant: str, a: float, delay_grid: Sequence[int], seed: int = 0,
                 cfg: ProbeConfig | None = None) -> list[dict]:
    """Train a small unidirectional leaky LSTM per delay and measure recall accuracy."""
    cfg = cfg or ProbeConfig()
    rows = []
    tau = rec.leak_to_lifetime(a, 1.0)
    for delay in delay_grid:
        mcfg = rec.ModelConfig(input_dim=1, layers=cfg.layers, units_per_direction=cfg.units,
                               bidirectional=False, variant=rec.Variant(variant),
                               leak=rec.LeakConfig(a=a, hop_seconds=1.0), output_dim=1)
        rng = np.random.default_rng([seed, delay])
        params = rec.init_params(mcfg, rng, projection=False)
        params["head.W"] = rng.uniform(-0.25, 0.25, size=(1, cfg.units))
        params["head.b"] = np.zeros(1)
        state = AdamState()
        length = delay + cfg.seq_extra
        for _ in range(cfg.steps):
            X, Y = recall_task(cfg.batch_size, length, delay, rng)
            _, _, _, grads = _probe_forward(mcfg, params, X, Y, delay)
            adam_step(params, grads, state, cfg.learning_rate, clip=5.0)
        X, Y = recall_task(cfg.eval_sequences, length, delay, np.random.default_rng([seed, delay, 1]))
        _, k, n, _ = _probe_forward(mcfg, params, X, Y, delay, need_grad=False)
        acc = k / n
        rows.append({"variant": variant, "a": a, "tau_frames": tau, "delay": delay,
                     "delay_over_tau": delay / tau if tau > 0 else math.inf if delay else 0.0,
                     "accuracy": acc, "correct": k, "total": n,
                     "chance_p_value": float(binomtest(k, n, 0.5).pvalue), "seed": seed})
    return rows


def write_rows_csv(path: str | Path, rows: Sequence[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def sweep_row_dict(job: SweepJob) -> dict:
    return asdict(job)
