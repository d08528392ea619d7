"""Command-line entry point: ``leakylstm <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import recurrent as rec
from .config import ConfigError, RunConfig, dump_config, load_config
from .corpus import ManifestError, ingest_wav_corpus, load_manifest, synth_speaker_corpus, write_manifest
from .signal import SignalError, Waveform, read_wav, write_wav

log = logging.getLogger("leakylstm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_EXISTS = 5


class OutputExists(RuntimeError):
    pass


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise OutputExists(f"{out} is not empty; use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    return out


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_config(args.config, overrides, args.preset)
    if cfg.seed != cfg.train.seed and getattr(args, "seed", None) is not None:
        cfg.train.seed = cfg.seed
    return cfg


def _speakers(path):
    if not path:
        return None
    from .experiment import load_speaker_models
    return load_speaker_models(path)


def cmd_defaults(args):
    print(dump_config(load_config(None, [], args.preset)), end="")


def cmd_prepare_corpus(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    if args.from_wav:
        c = cfg.corpus
        manifest = ingest_wav_corpus(args.from_wav, c.held_out, (c.n_train, c.n_valid, c.n_test), c.seed)
        manifest.root = Path(args.from_wav).resolve()
        for r in manifest.rows:
            r.sources = tuple(str(manifest.root / s) for s in r.sources)
        manifest.root = out
        write_manifest(out / "manifest.csv", manifest)
    else:
        c = cfg.corpus
        manifest = synth_speaker_corpus(out, c.num_speakers, c.utts_per_speaker, c.seed, c.n_train,
                                        c.n_valid, c.n_test, c.held_out, args.jobs)
    print(f"{len(manifest)} mixtures -> {out / 'manifest.csv'}")


def cmd_train(args):
    from .experiment import fit_dc_model, model_config_for, save_dc_model

    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    speakers = _speakers(args.speaker_models)
    out = _out_dir(args, cfg)
    mcfg = model_config_for(cfg.base_model(), cfg.signal, speakers is not None, cfg.speaker)
    model, result = fit_dc_model(manifest, mcfg, cfg.train, cfg.signal, speakers,
                                 log_path=out / "train_log.jsonl")
    save_dc_model(out / "model.npz", model)
    print(f"best validation loss {result.best_validation:.6f}; model -> {out / 'model.npz'}")


def cmd_separate(args):
    from .experiment import load_dc_model
    from .separation import separate

    model = load_dc_model(args.model)
    mixture = read_wav(args.mixture)
    ivectors = None
    if args.ivectors:
        from .speaker import read_ivector_csv
        table = read_ivector_csv(args.ivectors)
        ivectors = [table[u][1] for u in args.utterances]
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise OutputExists(f"{out} is not empty; use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    estimates = separate(model, mixture, args.num_speakers, ivectors=ivectors, seed=args.seed or 0,
                         a=args.leak)
    for s, est in enumerate(estimates):
        write_wav(out / f"estimate_{s + 1}.wav", est, pcm16=False)
    total = np.sum([e.samples for e in estimates], axis=0)
    print(f"{len(estimates)} estimates -> {out}; max |sum - mixture| = "
          f"{np.max(np.abs(total - mixture.samples)):.3g}")


def cmd_evaluate(args):
    from .evaluation import evaluate_separation
    from .experiment import load_dc_model

    cfg = _config(args)
    model = load_dc_model(args.model)
    manifest = load_manifest(args.manifest)
    out = _out_dir(args, cfg)
    report = evaluate_separation(model, manifest, args.split, _speakers(args.speaker_models),
                                 a=args.leak, seed=cfg.seed)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    print(f"mean SI-SDR improvement {report.mean:.2f} dB (std {report.std:.2f}) "
          f"over {len(report.improvements)} mixtures")


def cmd_sweep_leak(args):
    from .evaluation import sweep_jobs, sweep_leak

    cfg = _config(args)
    jobs = sweep_jobs(cfg.sweep)
    hop = cfg.signal.hop_seconds
    if args.dry_run:
        print("variant,tau_seconds,a,ivector_conditioning,seed")
        for j in jobs:
            print(f"{j.variant},{j.tau},{j.leak(hop):.9g},{j.conditioned},{j.seed}")
        print(f"# {len(jobs)} jobs")
        return
    manifest = load_manifest(args.manifest)
    out = _out_dir(args, cfg)
    rows = sweep_leak(manifest, cfg.base_model(), cfg.train, cfg.signal, cfg.sweep, cfg.speaker,
                      jobs=args.jobs, out_dir=out)
    print(f"{len(rows)} cells -> {out / 'sweep.csv'}")


def cmd_mismatch(args):
    from .evaluation import mismatch_experiment

    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    out = _out_dir(args, cfg)
    rows = mismatch_experiment(manifest, cfg.base_model(), cfg.train, cfg.signal, cfg.sweep.seeds)
    (out / "mismatch.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
    for r in rows:
        print(f"seed {r['seed']}: trained without leak {r['train_no_leak_db']:.2f} dB, "
              f"trained with leak {r['train_with_leak_db']:.2f} dB (tested at a={r['test_a']})")


def cmd_probe_memory(args):
    from .evaluation import memory_probe, write_rows_csv

    cfg = _config(args)
    out = _out_dir(args, cfg)
    p = cfg.probe
    a = rec.lifetime_to_leak(p.tau_frames, 1.0)
    rows = []
    for seed in p.seeds:
        rows += memory_probe(p.variant, a, p.delays, seed, p)
    write_rows_csv(out / "probe.csv", rows)
    for r in rows:
        print(f"seed {r['seed']} delay {r['delay']:>3}: accuracy {r['accuracy']:.3f}")


def cmd_count_params(args):
    cfg = _config(args)
    base = cfg.base_model()
    if args.preset == "paper":
        base = rec.paper_preset()
    table = {}
    for v in rec.Variant:
        for label, a in (("a>0", 0.5), ("a=0", 0.0)):
            table[(v.value, label)] = rec.count_params(
                replace(base, variant=v, leak=replace(base.leak, a=a)), projection=not args.no_projection)
    print(f"{'variant':<10}{'a>0':>14}{'a=0':>14}{'a>0 - a=0':>14}")
    for v in rec.Variant:
        hi, lo = table[(v.value, 'a>0')], table[(v.value, 'a=0')]
        print(f"{v.value:<10}{hi:>14,}{lo:>14,}{hi - lo:>14,}")
    b, r, bl = (table[(v.value, "a>0")] for v in rec.Variant)
    print(f"basic - red_cut    = {b - r:,}")
    print(f"red_cut - blue_cut = {r - bl:,}")


def cmd_train_ubm(args):
    from .experiment import fit_speaker_models, save_speaker_models

    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    out = _out_dir(args, cfg)
    sm = fit_speaker_models(manifest, cfg.speaker)
    save_speaker_models(out / "speaker_models.npz", sm)
    print(f"UBM K={sm.ubm.num_components}, T rank {sm.tv.rank} -> {out / 'speaker_models.npz'}")


def cmd_extract_ivectors(args):
    from .corpus import utterance_paths
    from .experiment import load_speaker_models, save_speaker_models
    from .speaker import extract_ivector, utterance_frames, write_ivector_csv

    cfg = _config(args)
    sm = load_speaker_models(args.speaker_models)
    manifest = load_manifest(args.manifest)
    out = _out_dir(args, cfg)
    rows = []
    for spk, paths in sorted(utterance_paths(manifest).items()):
        for p in paths:
            frames = utterance_frames(read_wav(manifest.root / p), cfg.speaker.mfcc_coeffs,
                                      cfg.speaker.vad_threshold_db)
            w = extract_ivector(sm.ubm, sm.tv, frames)
            sm.ivectors[p] = w
            rows.append((p, spk, w))
    write_ivector_csv(out / "ivectors.csv", rows)
    save_speaker_models(out / "speaker_models.npz", sm)
    print(f"{len(rows)} i-vectors -> {out / 'ivectors.csv'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leakylstm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help, config=True, out=True):
        p = sub.add_parser(name, help=help)
        p.set_defaults(fn=fn)
        p.add_argument("--preset", default="desk", choices=["desk", "paper"])
        if config:
            p.add_argument("--config", help="YAML run configuration")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                           help="override a configuration value (repeatable)")
            p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", help="output directory (default: output_dir from config)")
            p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
        return p

    add("defaults", cmd_defaults, "print the default configuration", config=False, out=False)
    p = add("prepare-corpus", cmd_prepare_corpus, "generate the synthetic corpus or ingest WAVs")
    p.add_argument("--from-wav", help="directory of <speaker>/<utt>.wav files to ingest")
    p = add("train", cmd_train, "train a deep clustering model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--speaker-models", help="speaker_models.npz for i-vector conditioning")
    p = add("separate", cmd_separate, "separate one mixture WAV", config=False)
    p.add_argument("--model", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--num-speakers", type=int, default=2)
    p.add_argument("--leak", type=float, help="override the leak used at test time")
    p.add_argument("--ivectors", help="i-vector CSV for conditioned models")
    p.add_argument("--utterances", nargs="*", default=[], help="utterance ids, in speaker-id order")
    p.add_argument("--seed", type=int)
    p = add("evaluate", cmd_evaluate, "SI-SDR improvement on a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--leak", type=float)
    p.add_argument("--speaker-models")
    p = add("sweep-leak", cmd_sweep_leak, "train/test over a lifetime grid")
    p.add_argument("--manifest")
    p.add_argument("--dry-run", action="store_true", help="print the job grid and exit")
    p = add("mismatch", cmd_mismatch, "leak at test time only vs at train and test time")
    p.add_argument("--manifest", required=True)
    add("probe-memory", cmd_probe_memory, "delayed-recall memory probe")
    p = add("count-params", cmd_count_params, "trainable parameter counts per variant", out=False)
    p.add_argument("--no-projection", action="store_true")
    p = add("train-ubm", cmd_train_ubm, "train the UBM and total variability matrix")
    p.add_argument("--manifest", required=True)
    p = add("extract-ivectors", cmd_extract_ivectors, "i-vectors for every manifest utterance")
    p.add_argument("--manifest", required=True)
    p.add_argument("--speaker-models", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "sweep-leak" and not args.dry_run and not args.manifest:
        parser.error("sweep-leak requires --manifest unless --dry-run is given")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputExists as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except rec.DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, ManifestError, SignalError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
