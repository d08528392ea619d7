"""Adam, curriculum segmentation, input noise and early-stopped DC training."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import recurrent as rec
from .separation import batch_dc_loss, project, project_backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3          # stage 1 (segments)
    learning_rate_full: float = 1e-4     # stage 2 (full mixtures)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 8
    curriculum_segment_frames: int = 100
    input_noise_std: float = 0.2
    validations_per_epoch: int = 3
    early_stop_patience: int = 9
    max_epochs: int = 40                 # per stage
    grad_clip: float | None = 5.0
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.input_noise_std < 0:
            raise ValueError("input_noise_std must be >= 0")
        if self.batch_size < 1 or self.validations_per_epoch < 1:
            raise ValueError("batch_size and validations_per_epoch must be >= 1")


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, clip: float | None = None) -> bool:
    """In-place Adam update with bias correction.

    Returns False (and leaves everything untouched) when a gradient is
    non-finite; such steps are counted in ``state.skipped``.
    """
    norm = global_norm(grads)
    if not np.isfinite(norm):
        state.skipped += 1
        log.warning("non-finite gradient; skipping step %d", state.step + 1)
        return False
    scale = clip / norm if clip is not None and norm > clip else 1.0
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for k, g in grads.items():
        if scale != 1.0:
            g = g * scale
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        v = state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


# -- data --------------------------------------------------------------------

@dataclass
class Example:
    """One training sequence: network input [T, F'] and dominant-source labels [T, F]."""
    inputs: np.ndarray
    labels: np.ndarray
    key: str = ""

    def __len__(self):
        return self.inputs.shape[0]


def make_curriculum_segments(dataset: Sequence[Example], segment_frames: int = 100) -> list:
    """Cut each example into floor(T / segment_frames) disjoint segments."""
    if segment_frames < 1:
        raise ValueError("segment_frames must be >= 1")
    out = []
    for ex in dataset:
        for s in range(len(ex) // segment_frames):
            sl = slice(s * segment_frames, (s + 1) * segment_frames)
            out.append(Example(ex.inputs[sl], ex.labels[sl], f"{ex.key}#{s}"))
    return out


def add_input_noise(features: np.ndarray, std: float = 0.2, seed=None) -> np.ndarray:
    if std < 0:
        raise ValueError("noise std must be >= 0")
    if std == 0:
        return features
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return features + rng.normal(0.0, std, size=features.shape).astype(features.dtype)


def make_batches(dataset: Sequence[Example], batch_size: int, rng: np.random.Generator | None):
    """Length-bucketed batches: sort by length, chunk, then shuffle chunk order."""
    order = np.argsort([len(ex) for ex in dataset], kind="stable")
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def collate(examples: Sequence[Example], dtype=np.float64):
    """Zero-pad to [T, B, F'] inputs, [B, T, F] labels and a [B, T] frame mask."""
    lengths = np.array([len(ex) for ex in examples])
    T = int(lengths.max())
    B = len(examples)
    X = np.zeros((T, B, examples[0].inputs.shape[1]), dtype)
    labels = np.zeros((B, T, examples[0].labels.shape[1]), np.int64)
    mask = np.zeros((B, T), bool)
    for b, ex in enumerate(examples):
        X[:len(ex), b] = ex.inputs
        labels[b, :len(ex)] = ex.labels
        mask[b, :len(ex)] = True
    return X, labels, mask, lengths


# -- loss --------------------------------------------------------------------

def dc_batch_objective(config: rec.ModelConfig, params: dict, X: np.ndarray, labels: np.ndarray,
                       mask: np.ndarray, lengths: np.ndarray, emb_dim: int, num_speakers: int = 2,
                       a: float | None = None, need_grad: bool = True):
    """Mean normalized DC loss of a padded batch and its parameter gradients."""
    out, cache = rec.stack_forward(config, params, X, lengths, a=a)
    V, _, norms, _ = project(out, params["proj.W"], params["proj.b"], emb_dim)  # [T, B, F, D]
    U = np.eye(num_speakers, dtype=X.dtype)[labels]                              # [B, T, F, S]
    loss, dVb, _ = batch_dc_loss(V.transpose(1, 0, 2, 3), U, mask)
    if not np.isfinite(loss):
        raise rec.DivergenceError("non-finite DC loss")
    if not need_grad:
        return loss, None
    dV = dVb.transpose(1, 0, 2, 3)
    grads, dOut = project_backward(dV, V, norms, out, params["proj.W"])
    rgrads, _ = rec.stack_backward(config, params, cache, dOut)
    grads.update(rgrads)
    return loss, grads


def evaluate_loss(config, params, dataset, emb_dim, batch_size=8, a=None, dtype=np.float64) -> float:
    total, count = 0.0, 0
    for idx in make_batches(dataset, batch_size, None):
        exs = [dataset[i] for i in idx]
        X, labels, mask, lengths = collate(exs, dtype)
        loss, _ = dc_batch_objective(config, params, X, labels, mask, lengths, emb_dim,
                                     a=a, need_grad=False)
        total += loss * len(exs)
        count += len(exs)
    return total / count


# -- training loop -------------------------------------------------------------

def params_hash(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


class EarlyStopper:
    """Stop after ``patience`` consecutive validations worse than the best so far."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_params = None
        self.bad = 0

    def update(self, value: float, params: dict) -> bool:
        if value < self.best:
            self.best = value
            self.best_params = {k: v.copy() for k, v in params.items()}
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


@dataclass
class TrainResult:
    params: dict
    best_validation: float
    history: list
    stage_hashes: dict = field(default_factory=dict)
    skipped_steps: int = 0


def _run_stage(stage, config, params, train_set, valid_set, cfg: TrainConfig, lr, emb_dim,
               rng, history, logger, t0):
    dtype = np.dtype(cfg.dtype)
    state = AdamState()
    stopper = EarlyStopper(cfg.early_stop_patience)
    step = 0
    for epoch in range(cfg.max_epochs):
        batches = make_batches(train_set, cfg.batch_size, rng)
        checkpoints = {int(round(len(batches) * (k + 1) / cfg.validations_per_epoch)) - 1
                       for k in range(cfg.validations_per_epoch)}
        for bi, idx in enumerate(batches):
            X, labels, mask, lengths = collate([train_set[i] for i in idx], dtype)
            if cfg.input_noise_std > 0:
                nf = labels.shape[2]
                X[:, :, :nf] = add_input_noise(X[:, :, :nf], cfg.input_noise_std, rng)
                X *= mask.T[:, :, None]
            loss, grads = dc_batch_objective(config, params, X, labels, mask, lengths, emb_dim)
            adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.grad_clip)
            step += 1
            record = {"step": step, "stage": stage, "epoch": epoch, "train_loss": loss}
            if bi in checkpoints:
                val = evaluate_loss(config, params, valid_set, emb_dim, cfg.batch_size, dtype=dtype)
                if not np.isfinite(val):
                    raise rec.DivergenceError(f"non-finite validation loss at step {step}")
                record["validation_loss"] = val
                stop = stopper.update(val, params)
            else:
                stop = False
            record["wall_time"] = time.perf_counter() - t0
            history.append(record)
            if logger:
                logger(record)
            if stop:
                log.info("stage %s: early stop at epoch %d step %d", stage, epoch, step)
                return stopper, state
    return stopper, state


def train(model_config: rec.ModelConfig, train_config: TrainConfig, train_set: Sequence[Example],
          valid_set: Sequence[Example], emb_dim: int = 20, params: dict | None = None,
          log_path: str | Path | None = None, stages: Sequence[str] = ("segments", "full"),
          on_record: Callable | None = None) -> TrainResult:
    """Two-stage curriculum training with validation-driven early stopping.

    Stage ``segments`` trains on 100-frame slices, stage ``full`` starts from
    the best stage-1 parameters and trains on whole mixtures. The parameters
    with the lowest validation loss of the last stage are returned.
    """
    cfg = train_config
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.dtype)
    if params is None:
        params = rec.init_params(model_config, rng, projection=True, dtype=dtype)
    params = {k: v.astype(dtype, copy=True) for k, v in params.items()}
    history: list = []
    hashes = {}
    fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def logger(record):
        if fh:
            fh.write(json.dumps(record) + "\n")
        if on_record:
            on_record(record)

    t0 = time.perf_counter()
    best = np.inf
    skipped = 0
    try:
        for stage in stages:
            if stage == "segments":
                tr = make_curriculum_segments(train_set, cfg.curriculum_segment_frames)
                va = make_curriculum_segments(valid_set, cfg.curriculum_segment_frames) or list(valid_set)
                lr = cfg.learning_rate
            elif stage == "full":
                tr, va, lr = list(train_set), list(valid_set), cfg.learning_rate_full
            else:
                raise ValueError(f"unknown stage {stage!r}")
            if not tr:
                log.warning("stage %s has no training data; skipped", stage)
                continue
            hashes[f"{stage}:init"] = params_hash(params)
            stopper, state = _run_stage(stage, model_config, params, tr, va, cfg, lr, emb_dim,
                                        rng, history, logger, t0)
            skipped += state.skipped
            if stopper.best_params is not None:
                params = stopper.best_params
                best = stopper.best
            hashes[f"{stage}:best"] = params_hash(params)
    finally:
        if fh:
            fh.close()
    return TrainResult(params, best, history, hashes, skipped)


def config_dict(cfg) -> dict:
    return asdict(cfg)
