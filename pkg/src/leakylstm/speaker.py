"""GMM-UBM, Baum-Welch statistics, total variability training and i-vectors."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .signal import FeatureSequence, Waveform, energy_vad, mfcc

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6


@dataclass
class Ubm:
    weights: np.ndarray    # [K]
    means: np.ndarray      # [K, d]
    variances: np.ndarray  # [K, d], diagonal covariances
    loglik_history: list = field(default_factory=list)

    def __post_init__(self):
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-8:
            raise ValueError("UBM weights must be non-negative and sum to one")
        if np.any(self.variances <= 0):
            raise ValueError("UBM variances must be positive")

    @property
    def num_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def mean_supervector(self) -> np.ndarray:
        return self.means.reshape(-1)

    @property
    def variance_supervector(self) -> np.ndarray:
        return self.variances.reshape(-1)


@dataclass
class TotalVariability:
    T: np.ndarray  # [K*d, dw]
    history: list = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.T.shape[1]


def component_loglik(ubm: Ubm, X: np.ndarray) -> np.ndarray:
    """[frames, K] log w_k + log N(x | mu_k, diag var_k)."""
    X = np.atleast_2d(X)
    prec = 1.0 / ubm.variances
    const = -0.5 * (ubm.dim * np.log(2 * np.pi) + np.log(ubm.variances).sum(axis=1))
    quad = (X ** 2) @ prec.T - 2 * X @ (ubm.means * prec).T + np.sum(ubm.means ** 2 * prec, axis=1)
    return np.log(np.maximum(ubm.weights, 1e-300)) + const - 0.5 * quad


def responsibilities(ubm: Ubm, X: np.ndarray):
    """Posterior component probabilities (rows sum to one) and per-frame log-likelihood."""
    ll = component_loglik(ubm, X)
    norm = logsumexp(ll, axis=1)
    return np.exp(ll - norm[:, None]), norm


def train_ubm(frames: np.ndarray, K: int = 16, iters: int = 20, seed: int = 0,
              var_floor: float = VAR_FLOOR, init_subsample: int = 5000) -> Ubm:
    """EM for a diagonal GMM, initialized by k-means on a random subsample."""
    from .separation import kmeans

    X = np.asarray(frames, dtype=np.float64)
    n, d = X.shape
    if n < K:
        raise ValueError(f"{n} frames cannot support {K} components")
    rng = np.random.default_rng(seed)
    sub = X[rng.choice(n, size=min(n, init_subsample), replace=False)]
    labels = kmeans(sub, K, seed=seed, restarts=1).labels
    weights = np.empty(K)
    means = np.empty((K, d))
    variances = np.empty((K, d))
    global_var = X.var(axis=0) + var_floor
    for k in range(K):
        members = sub[labels == k]
        weights[k] = max(len(members), 1)
        means[k] = members.mean(0) if len(members) else sub[rng.integers(len(sub))]
        variances[k] = members.var(0) if len(members) > 1 else global_var
    ubm = Ubm(weights / weights.sum(), means, np.maximum(variances, var_floor))
    history = []
    for _ in range(iters):
        gamma, ll = responsibilities(ubm, X)
        history.append(float(ll.sum()))
        Nk = gamma.sum(axis=0) + 1e-10
        means = (gamma.T @ X) / Nk[:, None]
        variances = (gamma.T @ X ** 2) / Nk[:, None] - means ** 2
        collapsed = variances < var_floor
        if np.any(collapsed):
            log.warning("variance floor applied to %d UBM dimensions", int(collapsed.sum()))
        ubm = Ubm(Nk / Nk.sum(), means, np.maximum(variances, var_floor))
    history.append(float(responsibilities(ubm, X)[1].sum()))
    ubm.loglik_history = history
    return ubm


def baum_welch_stats(ubm: Ubm, X: np.ndarray):
    """Zeroth-order occupancies N [K] and centered first-order stats [K*d]."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty utterance")
    gamma, _ = responsibilities(ubm, X)
    N = gamma.sum(axis=0)
    F = gamma.T @ X - N[:, None] * ubm.means
    return N, F.reshape(-1)


def _posterior(ubm, T, N, F, TtSiT):
    dw = T.shape[1]
    L = np.eye(dw) + np.einsum("k,kab->ab", N, TtSiT)
    b = T.T @ (F / ubm.variance_supervector)
    try:
        chol = np.linalg.cholesky(L)
    except np.linalg.LinAlgError:
        L = L + 1e-8 * np.eye(dw)
        chol = np.linalg.cholesky(L)
    Linv = np.linalg.inv(L)
    w = Linv @ b
    logdet = 2 * np.sum(np.log(np.diag(chol)))
    return w, Linv, logdet, b


def _tsit(ubm: Ubm, T: np.ndarray) -> np.ndarray:
    K, d = ubm.means.shape
    Tk = T.reshape(K, d, -1)
    return np.einsum("kda,kd,kdb->kab", Tk, 1.0 / ubm.variances, Tk)


def ivector_from_stats(ubm: Ubm, tv: TotalVariability, N: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Posterior mean w = (I + T' S^-1 N T)^-1 T' S^-1 F."""
    w, _, _, _ = _posterior(ubm, tv.T, N, F, _tsit(ubm, tv.T))
    return w


def extract_ivector(ubm: Ubm, tv: TotalVariability, utterance) -> np.ndarray:
    """i-vector of one utterance given its (VAD-filtered) feature frames."""
    N, F = baum_welch_stats(ubm, getattr(utterance, "values", utterance))
    return ivector_from_stats(ubm, tv, N, F)


def tv_loglik(ubm: Ubm, T: np.ndarray, stats: Sequence) -> float:
    """T-dependent part of the marginal log-likelihood of the aligned statistics."""
    TtSiT = _tsit(ubm, T)
    total = 0.0
    for N, F in stats:
        w, _, logdet, b = _posterior(ubm, T, N, F, TtSiT)
        total += -0.5 * logdet + 0.5 * b @ w
    return total


def train_tv(ubm: Ubm, stats: Sequence, dw: int = 10, iters: int = 10, seed: int = 0,
             init_scale: float = 0.1) -> TotalVariability:
    """EM for the total variability matrix of M = m + T w."""
    if dw <= 0:
        raise ValueError("i-vector dimension must be positive")
    if len(stats) < dw:
        raise ValueError(f"need at least {dw} utterances, got {len(stats)}")
    K, d = ubm.means.shape
    rng = np.random.default_rng(seed)
    T = rng.normal(size=(K * d, dw)) * init_scale * np.sqrt(ubm.variance_supervector)[:, None]
    history = []
    for _ in range(iters):
        TtSiT = _tsit(ubm, T)
        A = np.zeros((K, dw, dw))
        C = np.zeros((K * d, dw))
        ll = 0.0
        for N, F in stats:
            w, Linv, logdet, b = _posterior(ubm, T, N, F, TtSiT)
            ll += -0.5 * logdet + 0.5 * b @ w
            A += N[:, None, None] * (Linv + np.outer(w, w))[None]
            C += np.outer(F, w)
        history.append(ll)
        Ck = C.reshape(K, d, dw)
        T = np.concatenate([np.linalg.solve(A[k] + 1e-10 * np.eye(dw), Ck[k].T).T
                            for k in range(K)], axis=0)
    history.append(tv_loglik(ubm, T, stats))
    return TotalVariability(T, history)


def utterance_frames(wave: Waveform, num_coeffs: int = 13, vad_threshold_db: float = 40.0):
    """MFCC frames of an utterance with silent frames removed."""
    feats = mfcc(wave, num_coeffs)
    return feats[energy_vad(feats, vad_threshold_db)]


def condition_inputs(features: FeatureSequence, ivectors: Sequence[np.ndarray]) -> FeatureSequence:
    """Append the concatenated i-vectors (already in speaker-id order) to every frame."""
    vecs = [np.asarray(w, dtype=np.float64).reshape(-1) for w in ivectors]
    if len({len(v) for v in vecs}) > 1:
        raise ValueError("all i-vectors must share one dimension")
    tail = np.concatenate(vecs) if vecs else np.zeros(0)
    T = features.values.shape[0]
    return FeatureSequence(np.hstack([features.values, np.tile(tail, (T, 1))]),
                           normalized=features.normalized)


def write_ivector_csv(path: str | Path, rows: Iterable[tuple[str, str, np.ndarray]]) -> None:
    rows = list(rows)
    dw = len(rows[0][2]) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["utterance_id", "speaker_id"] + [f"w_{i + 1}" for i in range(dw)])
        for utt, spk, w in rows:
            out.writerow([utt, spk] + [repr(float(x)) for x in w])


def read_ivector_csv(path: str | Path) -> dict[str, tuple[str, np.ndarray]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["utterance_id", "speaker_id"]:
            raise ValueError(f"{path}: malformed i-vector manifest header")
        return {r[0]: (r[1], np.array([float(x) for x in r[2:]])) for r in reader}
