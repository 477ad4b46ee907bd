"""Command-line interface: ``lfm-sound decompose | train | reconstruct | sample | evaluate``.

Exit codes: 0 success, 1 error, 2 success with warnings (for example an
optimizer that stopped at its iteration cap).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .audio_io import AudioBuffer, AudioFormatError, EnvelopeMatrix, load_audio, read_matrix_csv, \
    write_matrix_csv, write_wav
from .baselines import cosine_distance, nmf, relative_report, rms_error, tnmf
from .demod import DEFAULT_DECIMATION, DEFAULT_LENGTHSCALE_MS, MIN_LENGTHSCALE_MS
from .estimator import decompose
from .filterbank import DEFAULT_CHANNELS, DEFAULT_F_HI, DEFAULT_F_LO, ErbFilterbank
from .inference import FilterDivergence
from .modelfile import ModelFile, ModelFileError, config_hash, file_hash
from .synthesis import (GenerationError, analyze_carriers, fit_modulator, generate_envelopes,
                        reconstruct, render, sample_latents, smoothed_latents)
from .training import TrainConfig, TrainingError, optimize, select_forces, skip_mask

logger = logging.getLogger("lfmsound")

EXIT_OK, EXIT_ERROR, EXIT_WARN = 0, 1, 2
DEFAULT_TNMF_BETA = 1.0
DEFAULT_NMF_ITERS = 500
_EXPECTED = (ValueError, OSError, FilterDivergence, TrainingError, GenerationError, KeyError)


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are ordinary errors (exit 1); exit 2 is reserved for warnings
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _number(kind, name, lo=None, lo_open=False, hi=None):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a{'n integer' if kind is int else ' number'}, "
                                             f"got {text!r}") from None
        if kind is float and not math.isfinite(v):
            raise argparse.ArgumentTypeError(f"{name} must be finite, got {text!r}")
        if lo is not None and (v <= lo if lo_open else v < lo):
            raise argparse.ArgumentTypeError(f"{name} must be {'>' if lo_open else '>='} {lo}, got {v}")
        if hi is not None and v > hi:
            raise argparse.ArgumentTypeError(f"{name} must be <= {hi}, got {v}")
        return v
    return parse


def _forces(text):
    if text == "auto":
        return text
    return _number(int, "--forces", lo=1)(text)


def _add_frontend(p):
    p.add_argument("--channels", type=_number(int, "--channels", lo=1), default=None,
                   help=f"number of ERB channels (default {DEFAULT_CHANNELS})")
    p.add_argument("--f-lo", type=_number(float, "--f-lo", lo=0, lo_open=True), default=None,
                   help=f"lowest centre frequency in Hz (default {DEFAULT_F_LO:g})")
    p.add_argument("--f-hi", type=_number(float, "--f-hi", lo=0, lo_open=True), default=None,
                   help=f"highest centre frequency in Hz (default {DEFAULT_F_HI:g})")
    p.add_argument("--lengthscale-ms", type=_number(float, "--lengthscale-ms", lo=MIN_LENGTHSCALE_MS),
                   default=None, help=f"demodulation lengthscale (default {DEFAULT_LENGTHSCALE_MS:g})")
    p.add_argument("--decimation", type=_number(int, "--decimation", lo=1), default=None,
                   help=f"audio samples per envelope frame (default {DEFAULT_DECIMATION})")


def _add_training(p):
    p.add_argument("--forces", type=_forces, default=None,
                   help="number of latent forces, or 'auto' for BIC selection over 1..3 (default auto)")
    p.add_argument("--history", type=_number(int, "--history", lo=0), default=None,
                   help="history length P in frames (default 2)")
    p.add_argument("--iters", type=_number(int, "--iters", lo=1), default=None,
                   help="optimizer iteration cap per stage (default 200)")
    p.add_argument("--seed", type=_number(int, "--seed", lo=0), default=None)
    p.add_argument("--config", type=Path, default=None, help="JSON configuration file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lfm-sound", description="Latent force modelling of audio envelopes.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("decompose", help="split a WAV into subband envelopes and carriers")
    p.add_argument("input", type=Path)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--config", type=Path, default=None)
    _add_frontend(p)

    p = sub.add_parser("train", help="fit a latent force model to an envelope CSV")
    p.add_argument("envelopes", type=Path)
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--fb", type=Path, default=None,
                   help="filterbank spec (default: fb.json next to the envelopes)")
    p.add_argument("--carriers", type=Path, default=None,
                   help="carrier CSV (default: carriers.csv next to the envelopes)")
    _add_training(p)

    p = sub.add_parser("reconstruct", help="reconstruct envelopes through the smoothed forces")
    p.add_argument("model", type=Path)
    p.add_argument("envelopes", type=Path)
    p.add_argument("--out", type=Path, default=Path("."))

    p = sub.add_parser("sample", help="generate new audio from a model")
    p.add_argument("model", type=Path)
    p.add_argument("--duration", type=_number(float, "--duration", lo=0, lo_open=True), default=2.0)
    p.add_argument("--seed", type=_number(int, "--seed", lo=0), default=0)
    p.add_argument("--out", type=Path, default=Path("out.wav"))

    p = sub.add_parser("evaluate", help="compare LFM, NMF and tNMF reconstructions over a folder")
    p.add_argument("sound_dir", type=Path)
    p.add_argument("--out", type=Path, default=Path("report.csv"))
    _add_frontend(p)
    _add_training(p)
    return parser


# -- configuration ----------------------------------------------------------------

_FRONTEND_KEYS = {"channels": DEFAULT_CHANNELS, "f_lo": DEFAULT_F_LO, "f_hi": DEFAULT_F_HI,
                  "lengthscale_ms": DEFAULT_LENGTHSCALE_MS, "decimation": DEFAULT_DECIMATION}
_BASELINE_KEYS = {"nmf_iters": DEFAULT_NMF_ITERS, "tnmf_beta": DEFAULT_TNMF_BETA}


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(cfg, dict):
        raise CliError(f"{path}: configuration must be a JSON object")
    return cfg


def _split_config(cfg: dict):
    cfg = dict(cfg)
    frontend = {k: cfg.pop(k, v) for k, v in _FRONTEND_KEYS.items()}
    baselines = {k: cfg.pop(k, v) for k, v in _BASELINE_KEYS.items()}
    return frontend, baselines, cfg


def _frontend(args, cfg):
    front = dict(cfg)
    for key in _FRONTEND_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            front[key] = val
    return front


def _training(args, cfg: dict):
    """Merge flags over the config file. Returns (TrainConfig, auto_forces)."""
    train = dict(cfg)
    if args.history is not None:
        train["P"] = args.history
    if args.iters is not None:
        train["max_iters"] = args.iters
    if args.seed is not None:
        train["seed"] = args.seed
    forces = args.forces if args.forces is not None else train.pop("R", "auto")
    auto = forces == "auto"
    train["R"] = 1 if auto else int(forces)
    return TrainConfig.from_dict(train), auto


def _fit(env: EnvelopeMatrix, cfg: TrainConfig, auto: bool):
    if auto:
        rep, bic = select_forces(env, cfg)
        logger.info("BIC by force count: %s", bic)
        return rep
    return optimize(env, cfg)


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- commands ---------------------------------------------------------------------

def cmd_decompose(args) -> int:
    front, _, _ = _split_config(_read_config(args.config))
    front = _frontend(args, front)
    buf = load_audio(args.input)
    env, carriers, fb, _ = decompose(buf, front["channels"], front["f_lo"], front["f_hi"],
                                     front["lengthscale_ms"], front["decimation"])
    args.out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(env, args.out / "envelopes.csv")
    write_matrix_csv(EnvelopeMatrix(carriers, buf.sample_rate, nonnegative=False),
                     args.out / "carriers.csv")
    _write_json({"filterbank": fb.to_dict(),
                 "demod": {"lengthscale_ms": front["lengthscale_ms"],
                           "decimation": front["decimation"],
                           "sample_rate": buf.sample_rate}},
                args.out / "fb.json")
    print(f"wrote {env.n_channels} x {env.n_frames} envelopes to {args.out}")
    return EXIT_OK


def _sibling(explicit, envelopes: Path, name: str):
    if explicit is not None:
        return explicit
    cand = envelopes.parent / name
    return cand if cand.exists() else None


def cmd_train(args) -> int:
    _, _, train_cfg = _split_config(_read_config(args.config))
    cfg, auto = _training(args, train_cfg)
    env = read_matrix_csv(args.envelopes)
    fb_path = _sibling(args.fb, args.envelopes, "fb.json")
    fb, demod = None, {}
    if fb_path is not None:
        with open(fb_path) as fh:
            spec = json.load(fh)
        fb, demod = ErbFilterbank.from_dict(spec["filterbank"]), spec.get("demod", {})
        if fb.n_channels != env.n_channels:
            raise CliError(f"{fb_path} describes {fb.n_channels} channels, "
                           f"{args.envelopes} has {env.n_channels}")
    carriers = None
    car_path = _sibling(args.carriers, args.envelopes, "carriers.csv")
    if car_path is not None and fb is not None:
        carriers = analyze_carriers(read_matrix_csv(car_path, nonnegative=False).values, fb)

    report = _fit(env, cfg, auto)
    skip = skip_mask(env, cfg.skip_threshold_db)
    u, _ = smoothed_latents(env, report.params, skip)
    config_dict = {**cfg.to_dict(), "R": report.params.R, "forces": "auto" if auto else cfg.R}
    model = ModelFile(params=report.params, frame_rate=env.frame_rate,
                      initial_envelope=env.values[:, 0],
                      modulator=fit_modulator(u, env.frame_rate), filterbank=fb, demod=demod,
                      carriers=carriers,
                      provenance={"config": config_dict, "config_hash": config_hash(config_dict),
                                  "loglik": report.final_loglik})
    args.out.mkdir(parents=True, exist_ok=True)
    model.save(args.out / "model.json")
    _write_json(report.to_dict(), args.out / "report.json")
    print(f"final log likelihood {report.final_loglik:.6g} with R={report.params.R}")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK if report.converged else EXIT_WARN


def cmd_reconstruct(args) -> int:
    model = ModelFile.load(args.model)
    env = read_matrix_csv(args.envelopes)
    if env.n_channels != model.params.M:
        raise CliError(f"{args.envelopes} has {env.n_channels} channels, "
                       f"the model expects {model.params.M}")
    rec = reconstruct(env, model.params, skip_mask(env))
    args.out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(rec, args.out / "recon.csv")
    metrics = {"rms": rms_error(rec.values, env.values),
               "cosine": cosine_distance(rec.values, env.values)}
    _write_json(metrics, args.out / "metrics.json")
    print(f"rms {metrics['rms']:.6g}  cosine {metrics['cosine']:.6g}")
    return EXIT_OK


def generate_audio(model: ModelFile, duration: float, seed: int) -> AudioBuffer:
    """Sample forces, run the envelope model and render audio."""
    if model.filterbank is None or model.carriers is None:
        raise CliError("model has no filterbank or carrier model; train it from decompose output")
    n_frames = max(1, int(round(duration * model.frame_rate)))
    seeds = np.random.SeedSequence(seed).spawn(2)
    u = sample_latents(model.params, model.modulator, n_frames, seeds[0], model.frame_rate)
    env = generate_envelopes(model.params, model.layout, u, frame_rate=model.frame_rate,
                             x0=model.initial_envelope)
    return render(env, model.carriers, model.filterbank, seeds[1])


def cmd_sample(args) -> int:
    model = ModelFile.load(args.model)
    buf = generate_audio(model, args.duration, args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(buf, args.out)
    manifest = {"seed": args.seed, "duration": args.duration, "model_hash": file_hash(args.model),
                "n_samples": len(buf), "sample_rate": buf.sample_rate}
    _write_json(manifest, args.out.with_name(args.out.stem + ".manifest.json"))
    print(f"wrote {len(buf)} samples to {args.out}")
    return EXIT_OK


def evaluate_sound(path, front: dict, cfg: TrainConfig, auto: bool, baselines: dict):
    """Metrics of the three methods on one sound: {method: {"rms", "cosine"}}."""
    buf = load_audio(path)
    env, _, _, _ = decompose(buf, front["channels"], front["f_lo"], front["f_hi"],
                             front["lengthscale_ms"], front["decimation"])
    report = _fit(env, cfg, auto)
    rec = reconstruct(env, report.params, skip_mask(env, cfg.skip_threshold_db)).values
    K = report.params.R
    V = env.values
    nf = nmf(V, K, baselines["nmf_iters"], cfg.seed).reconstruction()
    tf = tnmf(V, K, baselines["nmf_iters"], baselines["tnmf_beta"], cfg.seed).reconstruction()
    return {name: {"rms": rms_error(r, V), "cosine": cosine_distance(r, V)}
            for name, r in (("LFM", rec), ("tNMF", tf), ("NMF", nf))}


def _workers() -> int:
    env = os.environ.get("LFM_SOUND_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise CliError(f"LFM_SOUND_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise CliError(f"LFM_SOUND_THREADS must be >= 1, got {n}")
        return n
    return 1


def cmd_evaluate(args) -> int:
    front, baselines, train_cfg = _split_config(_read_config(args.config))
    front = _frontend(args, front)
    cfg, auto = _training(args, train_cfg)
    if not args.sound_dir.is_dir():
        raise CliError(f"{args.sound_dir} is not a directory")
    wavs = sorted(p for p in args.sound_dir.iterdir() if p.suffix.lower() == ".wav")
    if not wavs:
        raise CliError(f"no WAV files in {args.sound_dir}")
    workers = _workers()
    # each worker trains single-threaded so the pool width is the parallelism cap
    cfg = TrainConfig.from_dict({**cfg.to_dict(), "n_jobs": 1 if workers > 1 else cfg.n_jobs})
    jobs = [(p, front, cfg, auto, baselines) for p in wavs]
    results, failed = {}, []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(evaluate_sound, *j) for j in jobs]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append(f.result())
                except Exception as exc:  # noqa: BLE001 - reported per sound
                    outcomes.append(exc)
    else:
        outcomes = []
        for j in jobs:
            try:
                outcomes.append(evaluate_sound(*j))
            except Exception as exc:  # noqa: BLE001 - reported per sound
                outcomes.append(exc)
    for path, out in zip(wavs, outcomes):
        if isinstance(out, Exception):
            logger.error("%s: excluded (%s)", path.name, out)
            failed.append(path.name)
        else:
            results[path.stem] = out
    if not results:
        raise CliError("every sound failed; no report written")
    rep = relative_report({s: r["LFM"] for s, r in results.items()},
                          {s: r["tNMF"] for s, r in results.items()},
                          {s: r["NMF"] for s, r in results.items()})
    args.out.parent.mkdir(parents=True, exist_ok=True)
    rep.write_csv(args.out, extra_excluded=failed)
    print(rep.table())
    if failed:
        print("failed: " + ", ".join(failed))
    return EXIT_OK


COMMANDS = {"decompose": cmd_decompose, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "sample": cmd_sample, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
    except (CliError, AudioFormatError, ModelFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except _EXPECTED as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
