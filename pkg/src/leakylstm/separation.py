"""Deep clustering head: embeddings, affinity loss, k-means and binary masks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import recurrent as rec
from .signal import (LOG_FLOOR, FeatureSequence, MaskSet, NormStats, Spectrogram,
                     Waveform, analyze, apply_masks, log_features, synthesize)

log = logging.getLogger(__name__)


@dataclass
class EmbeddingField:
    V: np.ndarray  # [T*F, D]
    degenerate_rows: int = 0

    def __post_init__(self):
        norms = np.linalg.norm(self.V, axis=1)
        if np.max(np.abs(norms - 1.0), initial=0.0) > 1e-6:
            raise ValueError("embedding rows must have unit norm")


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    wcss: float = float("nan")
    history: list = field(default_factory=list)


def normalize_rows(Z: np.ndarray, eps: float = 1e-12):
    """Unit-normalize the last axis. Zero rows become the first basis vector."""
    norms = np.linalg.norm(Z, axis=-1, keepdims=True)
    bad = norms[..., 0] < eps
    V = Z / np.where(norms < eps, 1.0, norms)
    if np.any(bad):
        V[bad] = 0.0
        V[bad, 0] = 1.0
    return V, norms, int(bad.sum())


def project(outputs: np.ndarray, W: np.ndarray, b: np.ndarray, emb_dim: int):
    """Per-frame linear projection reshaped to [..., F, D] and unit-normalized.

    Returns (V, raw projection, norms, number of degenerate rows).
    """
    Z = outputs @ W.T + b
    Z = Z.reshape(Z.shape[:-1] + (-1, emb_dim))
    V, norms, bad = normalize_rows(Z)
    return V, Z, norms, bad


def project_backward(dV: np.ndarray, V: np.ndarray, norms: np.ndarray, outputs: np.ndarray,
                     W: np.ndarray):
    """Backprop through row normalization and the linear projection."""
    dZ = (dV - V * np.sum(V * dV, axis=-1, keepdims=True)) / np.maximum(norms, 1e-12)
    dZ = dZ.reshape(dZ.shape[:-2] + (-1,))
    flat_out = outputs.reshape(-1, outputs.shape[-1])
    flat_dZ = dZ.reshape(-1, dZ.shape[-1])
    return {"proj.W": flat_dZ.T @ flat_out, "proj.b": flat_dZ.sum(axis=0)}, dZ @ W


def embed(outputs: np.ndarray, W: np.ndarray, b: np.ndarray, emb_dim: int) -> EmbeddingField:
    """[T, 2H] network outputs -> unit-norm embeddings, one row per (t, f) bin."""
    if W.shape[1] != outputs.shape[-1] or W.shape[0] % emb_dim:
        raise ValueError("projection does not map the output width to D*F")
    V, _, _, bad = project(outputs, W, b, emb_dim)
    if bad:
        log.warning("%d zero-norm embedding rows replaced by a basis vector", bad)
    return EmbeddingField(V.reshape(-1, emb_dim), degenerate_rows=bad)


def build_targets(source_specs: Sequence[Spectrogram]) -> np.ndarray:
    """One-hot [T*F, S] dominant-source labels; ties go to the lowest index."""
    shapes = {s.bins.shape for s in source_specs}
    if len(shapes) != 1:
        raise ValueError("all source spectrograms must have the same shape")
    power = np.stack([np.abs(s.bins) ** 2 for s in source_specs], axis=-1)
    labels = np.argmax(power, axis=-1).reshape(-1)  # argmax returns the first maximum
    return np.eye(len(source_specs))[labels]


def _ordered_sum(x: np.ndarray, axes: int = 2) -> np.ndarray:
    """Sum over the last ``axes`` axes in sorted order.

    Terms indexed by source are only permuted when the columns of U are,
    so summing them sorted makes the loss exactly label-permutation invariant.
    """
    flat = x.reshape(x.shape[:x.ndim - axes] + (-1,))
    return np.sort(flat, axis=-1).sum(axis=-1)


def dc_loss(V, U, normalize: bool = False):
    """Affinity loss ||VV^T - UU^T||_F^2 via its low-rank expansion.

    Returns ``(loss, grad_V)``. With ``normalize`` both are divided by N^2
    (N = number of rows) so values are comparable across lengths.
    """
    V = getattr(V, "V", V)
    if V.shape[0] != U.shape[0]:
        raise ValueError(f"row count mismatch: V has {V.shape[0]}, U has {U.shape[0]}")
    VtV = V.T @ V
    VtU = V.T @ U
    UtU = U.T @ U
    loss = np.sum(VtV ** 2) - 2 * _ordered_sum(VtU ** 2) + _ordered_sum(UtU ** 2)
    grad = 4 * (V @ VtV - U @ VtU.T)
    if normalize:
        n2 = float(V.shape[0]) ** 2
        loss, grad = loss / n2, grad / n2
    return float(loss), grad


def batch_dc_loss(V: np.ndarray, U: np.ndarray, frame_mask: np.ndarray):
    """Mean normalized affinity loss over a padded batch.

    ``V`` is [B, T, F, D], ``U`` is [B, T, F, S] and ``frame_mask`` [B, T]
    marks valid frames. Padded frames contribute zero rows to every product.
    """
    B, T, F, D = V.shape
    m = frame_mask[:, :, None, None].astype(V.dtype)
    Vm = (V * m).reshape(B, T * F, D)
    Um = (U * m).reshape(B, T * F, -1)
    n = frame_mask.sum(axis=1).astype(np.float64) * F
    Vt = Vm.transpose(0, 2, 1)
    VtV = Vt @ Vm
    VtU = Vt @ Um
    UtU = Um.transpose(0, 2, 1) @ Um
    per = (np.sum(VtV ** 2, axis=(1, 2)) - 2 * _ordered_sum(VtU ** 2)
           + _ordered_sum(UtU ** 2)) / n ** 2
    scale = (4.0 / (n ** 2) / B)[:, None, None]
    grad = (Vm @ (VtV * scale) - Um @ (VtU.transpose(0, 2, 1) * scale))
    return float(per.mean()), grad.reshape(B, T, F, D) * m, per


def _wcss(X, centers, labels):
    return float(np.sum((X - centers[labels]) ** 2))


def _assign(X, centers):
    d = (X ** 2).sum(1)[:, None] - 2 * X @ centers.T + (centers ** 2).sum(1)[None, :]
    return np.argmin(d, axis=1), np.maximum(d, 0.0)


def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return np.array(centers)


def _lloyd(X, k, rng, max_iter):
    centers = _kmeans_pp(X, k, rng)
    labels, d = _assign(X, centers)
    history = [_wcss(X, centers, labels)]
    for _ in range(max_iter):
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the point worst served by its centroid
                far = np.argmax(d[np.arange(len(X)), labels])
                centers[c] = X[far]
        new_labels, d = _assign(X, centers)
        history.append(_wcss(X, centers, new_labels))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels, history


def kmeans(V, S: int, seed: int = 0, restarts: int = 5, max_iter: int = 100) -> ClusterAssignment:
    """k-means++ seeded Lloyd iterations, best of ``restarts`` by WCSS."""
    X = np.asarray(getattr(V, "V", V), dtype=np.float64)
    if X.shape[0] < S:
        raise ValueError(f"need at least S={S} points, got {X.shape[0]}")
    if S == 1:
        return ClusterAssignment(np.zeros(X.shape[0], dtype=int),
                                 float(np.sum((X - X.mean(0)) ** 2)))
    best = None
    for child in np.random.SeedSequence(seed).spawn(restarts):
        labels, history = _lloyd(X, S, np.random.default_rng(child), max_iter)
        if best is None or history[-1] < best.wcss:
            best = ClusterAssignment(labels, history[-1], history)
    return best


def masks_from_clusters(assignment, S: int, T: int, F: int) -> MaskSet:
    labels = np.asarray(getattr(assignment, "labels", assignment)).reshape(T, F)
    if labels.min() < 0 or labels.max() >= S:
        raise ValueError("cluster labels out of range")
    return MaskSet((labels[None] == np.arange(S)[:, None, None]).astype(np.float64))


@dataclass
class DCModel:
    """A trained separation network plus the front end it was trained with."""
    config: rec.ModelConfig
    params: dict
    stats: NormStats | None = None
    emb_dim: int = 20
    frame_len: int = 256
    hop: int = 64
    window: str = "sqrt_hann"
    floor: float = LOG_FLOOR

    @property
    def num_bins(self) -> int:
        return self.frame_len // 2 + 1

    def spectrogram(self, wave: Waveform) -> Spectrogram:
        return analyze(wave, self.frame_len, self.hop, self.window)

    def features(self, spec: Spectrogram, ivectors=None) -> FeatureSequence:
        feats = log_features(spec, self.floor, self.stats)
        if ivectors is not None and len(ivectors):
            from .speaker import condition_inputs
            feats = condition_inputs(feats, ivectors)
        return feats

    def embeddings(self, feats: FeatureSequence, a: float | None = None) -> np.ndarray:
        out, _ = rec.blstm_forward(self.config, self.params, feats, a=a)
        V, _, _, bad = project(out, self.params["proj.W"], self.params["proj.b"], self.emb_dim)
        if bad:
            log.warning("%d zero-norm embedding rows replaced by a basis vector", bad)
        return V.reshape(-1, self.emb_dim)


def separate_from_embeddings(V, mixture: Waveform, spec: Spectrogram, S: int,
                             seed: int = 0) -> list[Waveform]:
    T, F = spec.bins.shape
    assignment = kmeans(V, S, seed=seed)
    masks = masks_from_clusters(assignment, S, T, F)
    return [synthesize(x, len(mixture)) for x in apply_masks(masks, spec)]


def separate(model: DCModel, mixture: Waveform, S: int = 2, ivectors=None,
             seed: int = 0, a: float | None = None) -> list[Waveform]:
    """Mixture waveform -> S estimated source waveforms of the same length."""
    if S == 1:
        return [Waveform(mixture.samples.copy(), mixture.sample_rate)]
    spec = model.spectrogram(mixture)
    V = model.embeddings(model.features(spec, ivectors), a=a)
    return separate_from_embeddings(V, mixture, spec, S, seed)
