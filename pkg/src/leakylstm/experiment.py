"""Glue between the corpus, front end, speaker models and DC training."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import recurrent as rec
from .corpus import DatasetManifest, MixtureSample, load_mixture, utterance_paths
from .separation import DCModel
from .signal import (LOG_FLOOR, FeatureSequence, NormStats, analyze, compute_norm_stats,
                     log_features, read_wav)
from .speaker import (TotalVariability, Ubm, baum_welch_stats, ivector_from_stats, train_tv,
                      train_ubm, utterance_frames)
from .training import Example, TrainConfig, TrainResult, train

log = logging.getLogger(__name__)


@dataclass
class FrontEndConfig:
    frame_len: int = 256        # 32 ms at 8 kHz
    hop: int = 64               # 8 ms
    window: str = "sqrt_hann"
    floor: float = LOG_FLOOR
    emb_dim: int = 20

    @property
    def num_bins(self) -> int:
        return self.frame_len // 2 + 1

    @property
    def hop_seconds(self) -> float:
        return self.hop / 8000.0


@dataclass
class SpeakerConfig:
    num_components: int = 16
    ivector_dim: int = 10
    ubm_iters: int = 20
    tv_iters: int = 10
    mfcc_coeffs: int = 13
    vad_threshold_db: float = 40.0
    seed: int = 0


@dataclass
class SpeakerModels:
    ubm: Ubm
    tv: TotalVariability
    ivectors: dict          # utterance path -> i-vector


def mixture_tensors(sample: MixtureSample, fe: FrontEndConfig):
    """Raw log features [T, F] and dominant-source labels [T, F]."""
    spec = analyze(sample.mixture, fe.frame_len, fe.hop, fe.window)
    feats = log_features(spec, fe.floor).values
    power = np.stack([np.abs(analyze(s, fe.frame_len, fe.hop, fe.window).bins) ** 2
                      for s in sample.sources], axis=-1)
    return feats, np.argmax(power, axis=-1)


def mixture_ivectors(row, speakers: SpeakerModels | None):
    if speakers is None:
        return None
    return [speakers.ivectors[s] for s in row.sources]


def load_split(manifest: DatasetManifest, split: str, fe: FrontEndConfig):
    out = []
    for row in manifest.split(split):
        feats, labels = mixture_tensors(load_mixture(manifest, row), fe)
        out.append((row, feats, labels))
    return out


def to_examples(raw, stats: NormStats, speakers: SpeakerModels | None = None) -> list[Example]:
    exs = []
    for row, feats, labels in raw:
        x = (feats - stats.mean) / stats.std
        iv = mixture_ivectors(row, speakers)
        if iv is not None:
            x = np.hstack([x, np.tile(np.concatenate(iv), (len(x), 1))])
        exs.append(Example(x, labels, row.mixture_id))
    return exs


def fit_speaker_models(manifest: DatasetManifest, cfg: SpeakerConfig) -> SpeakerModels:
    """UBM and T from training-split utterances, then i-vectors for every utterance."""
    paths = utterance_paths(manifest)
    train_paths = sorted({p for spk, ps in utterance_paths(manifest, ("train",)).items() for p in ps})
    all_paths = sorted({p for ps in paths.values() for p in ps})
    frames = {p: utterance_frames(read_wav(manifest.root / p), cfg.mfcc_coeffs, cfg.vad_threshold_db)
              for p in all_paths}
    ubm = train_ubm(np.vstack([frames[p] for p in train_paths]), cfg.num_components,
                    cfg.ubm_iters, cfg.seed)
    stats = {p: baum_welch_stats(ubm, frames[p]) for p in all_paths}
    tv = train_tv(ubm, [stats[p] for p in train_paths], cfg.ivector_dim, cfg.tv_iters, cfg.seed)
    ivectors = {p: ivector_from_stats(ubm, tv, *stats[p]) for p in all_paths}
    return SpeakerModels(ubm, tv, ivectors)


def model_config_for(base: rec.ModelConfig, fe: FrontEndConfig, conditioned: bool,
                     speaker_cfg: SpeakerConfig | None = None, num_speakers: int = 2) -> rec.ModelConfig:
    extra = num_speakers * speaker_cfg.ivector_dim if conditioned and speaker_cfg else 0
    return replace(base, input_dim=fe.num_bins + extra, output_dim=fe.num_bins * fe.emb_dim,
                   leak=replace(base.leak, hop_seconds=fe.hop_seconds))


def fit_dc_model(manifest: DatasetManifest, model_cfg: rec.ModelConfig, train_cfg: TrainConfig,
                 fe: FrontEndConfig, speakers: SpeakerModels | None = None,
                 log_path: str | Path | None = None, raw_cache: dict | None = None, on_record=None):
    """Train a DC network on the manifest's train/validation splits."""
    if raw_cache is None:
        raw_cache = {}
    for split in ("train", "validation"):
        if split not in raw_cache:
            raw_cache[split] = load_split(manifest, split, fe)
    stats = compute_norm_stats([FeatureSequence(f) for _, f, _ in raw_cache["train"]])
    tr = to_examples(raw_cache["train"], stats, speakers)
    va = to_examples(raw_cache["validation"], stats, speakers)
    if tr[0].inputs.shape[1] != model_cfg.input_dim:
        raise ValueError(f"model input_dim {model_cfg.input_dim} != data width {tr[0].inputs.shape[1]}")
    result = train(model_cfg, train_cfg, tr, va, fe.emb_dim, log_path=log_path, on_record=on_record)
    model = DCModel(model_cfg, result.params, stats, fe.emb_dim, fe.frame_len, fe.hop,
                    fe.window, fe.floor)
    return model, result


def dc_model_meta(model: DCModel) -> dict:
    return {"kind": "dc_model", "model": model.config.to_dict(),
            "front_end": {"frame_len": model.frame_len, "hop": model.hop, "window": model.window,
                          "floor": model.floor, "emb_dim": model.emb_dim}}


def save_dc_model(path, model: DCModel) -> None:
    arrays = dict(model.params)
    arrays["norm.mean"] = model.stats.mean
    arrays["norm.std"] = model.stats.std
    rec.save_checkpoint(path, dc_model_meta(model), arrays)


def load_dc_model(path) -> DCModel:
    meta, arrays = rec.load_checkpoint(path)
    if meta.get("kind") != "dc_model":
        raise ValueError(f"{path}: not a DC model checkpoint")
    stats = NormStats(arrays.pop("norm.mean"), arrays.pop("norm.std"))
    fe = meta["front_end"]
    return DCModel(rec.model_config_from_dict(meta["model"]), arrays, stats, fe["emb_dim"],
                   fe["frame_len"], fe["hop"], fe["window"], fe["floor"])


def save_speaker_models(path, sm: SpeakerModels) -> None:
    arrays = {"ubm.weights": sm.ubm.weights, "ubm.means": sm.ubm.means,
              "ubm.variances": sm.ubm.variances, "tv.T": sm.tv.T}
    keys = sorted(sm.ivectors)
    if keys:
        arrays["ivectors"] = np.stack([sm.ivectors[k] for k in keys])
    rec.save_checkpoint(path, {"kind": "speaker_models", "utterances": keys}, arrays)


def load_speaker_models(path) -> SpeakerModels:
    meta, arrays = rec.load_checkpoint(path)
    if meta.get("kind") != "speaker_models":
        raise ValueError(f"{path}: not a speaker model checkpoint")
    ubm = Ubm(arrays["ubm.weights"], arrays["ubm.means"], arrays["ubm.variances"])
    iv = arrays.get("ivectors")
    ivectors = {k: iv[i] for i, k in enumerate(meta["utterances"])} if iv is not None else {}
    return SpeakerModels(ubm, TotalVariability(arrays["tv.T"]), ivectors)
