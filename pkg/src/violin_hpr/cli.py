"""Command line entry point: gen, analyze, train, reconstruct, eval, replay.

Every command writes ``resolved_config.json`` next to its outputs. Running
``violin-hpr replay <that file>`` repeats the command with identical results.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (CorpusSpec, NoteNameError, SegmentationError, SplitSpec, WavError, build_corpus,
                      parse_note_filename, read_manifest, read_wav, split_indices, stem_for, write_wav)
from .dsp_core import AnalysisConfig
from .envelope import FrameFeatures, read_features_csv, stack_features, write_features_csv
from .eval import dump_envelopes, mse_report, silhouette, tsne_embed, write_embedding_csv, write_mse_csv
from .models import ArchSpec, TrainingDiverged, latent_codes, load_bundle, reconstruct, save_bundle, train
from .nn import CheckpointError
from .pipeline import analyze_note, resynthesize

CONFIG_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
SNAPSHOT = "resolved_config.json"

log = logging.getLogger("violin_hpr")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def default_config() -> dict:
    return {
        "version": CONFIG_VERSION,
        "seed": 0,
        "analysis": AnalysisConfig().to_dict(),
        "corpus": {k: v for k, v in CorpusSpec().to_dict().items() if k != "seed"},
        "arch": ArchSpec().to_dict(),
        "split": {"train_fraction": 0.5, "unit": "frame"},
        "eval": {"octaves": [], "perplexity": 30.0, "tsne_iters": 1000, "max_points": 600, "dump_frames": 2},
    }


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k in ("invocation",):
            out[k] = v
            continue
        if k not in base:
            raise UsageError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> dict:
    if "=" not in item:
        raise UsageError(f"--set expects key=value, got {item!r}")
    key, val = item.split("=", 1)
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(val)
    return cfg


def load_config(path, overrides=()) -> dict:
    cfg = default_config()
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON ({exc})")
        if user.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise UsageError(f"config version {user.get('version')} unsupported (expected {CONFIG_VERSION})")
        cfg = _merge(cfg, user)
    for item in overrides:
        cfg = apply_override(cfg, item)
    return cfg


def _build(cls, d: dict):
    names = {f.name for f in fields(cls)}
    bad = set(d) - names
    if bad:
        raise UsageError(f"unknown {cls.__name__} fields: {sorted(bad)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}")


def analysis_config(cfg) -> AnalysisConfig:
    return _build(AnalysisConfig, cfg["analysis"])


def write_snapshot(out_dir, cfg: dict, command: str, args: dict) -> None:
    snap = copy.deepcopy(cfg)
    snap["invocation"] = {"command": command, "args": args}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / SNAPSHOT).write_text(json.dumps(snap, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------- commands

def cmd_gen(cfg, out):
    spec = _build(CorpusSpec, {**cfg["corpus"], "seed": int(cfg["seed"])})
    recs = build_corpus(spec, out)
    write_snapshot(out, cfg, "gen", {"out": str(out)})
    log.info("wrote %d notes to %s", len(recs), out)


def _corpus_files(corpus: Path) -> list:
    man = corpus / "manifest.csv"
    if man.exists():
        return [corpus / r["filename"] for r in read_manifest(man)]
    return sorted(corpus.glob("*.wav"))


def cmd_analyze(cfg, corpus, out):
    corpus, out = Path(corpus), Path(out)
    if not corpus.is_dir():
        raise DataError(f"corpus directory {corpus} not found")
    acfg = analysis_config(cfg)
    files = _corpus_files(corpus)
    if not files:
        raise DataError(f"no WAV files in {corpus}")
    allf, failures = [], []
    (out / "notes").mkdir(parents=True, exist_ok=True)
    for path in files:
        stem = path.stem
        try:
            parse_note_filename(path.name)
            x, fs = read_wav(path)
            if fs != acfg.sample_rate_hz:
                raise DataError(f"sample rate {fs} != analysis rate {acfg.sample_rate_hz}")
            an = analyze_note(x, fs, stem, acfg)
        except (SegmentationError, WavError, NoteNameError, DataError) as exc:
            failures.append((path.name, str(exc)))
            log.warning("%s: %s", path.name, exc)
            continue
        write_features_csv(out / "notes" / f"{stem}.csv", an.features)
        allf += an.features
    write_features_csv(out / "features.csv", allf)
    with open(out / "failures.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["filename", "error"])
        wr.writerows(failures)
    write_snapshot(out, cfg, "analyze", {"corpus": str(corpus), "out": str(out)})
    log.info("%d frames from %d notes, %d failures", len(allf), len(files) - len(failures), len(failures))


def _load_features(path) -> list:
    try:
        feats = read_features_csv(path)
    except FileNotFoundError:
        raise DataError(f"features file {path} not found")
    except ValueError as exc:
        raise DataError(str(exc))
    if not feats:
        raise DataError(f"{path} holds no frames")
    return feats


def _frame_keys(feats) -> list:
    return [f"{f.note_id}:{f.frame_index}" for f in feats]


def _split(cfg, feats):
    sspec = _build(SplitSpec, {**cfg["split"], "seed": int(cfg["seed"])})
    mask = split_indices([f.note_id for f in feats], sspec)
    return mask, sspec


def cmd_train(cfg, features, out):
    feats = _load_features(features)
    arch = _build(ArchSpec, cfg["arch"])
    mask, sspec = _split(cfg, feats)
    f0, h, r = stack_features(feats)
    keys = _frame_keys(feats)
    split = {"unit": sspec.unit, "train_fraction": sspec.train_fraction, "seed": sspec.seed,
             "features": str(features), "test": [k for k, m in zip(keys, mask) if not m]}
    model = train(f0[mask], h[mask], r[mask], arch, cfg["seed"], f0[~mask], h[~mask], r[~mask], split)
    save_bundle(model, out)
    write_snapshot(out, cfg, "train", {"features": str(features), "out": str(out)})
    log.info("trained %s: final test loss %.6g", arch.kind, model.total_curve()[-1])


def cmd_reconstruct(cfg, model_dir, wav, out):
    out = Path(out)
    acfg = analysis_config(cfg)
    try:
        model = load_bundle(model_dir)
    except (FileNotFoundError, CheckpointError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load model {model_dir}: {exc}")
    x, fs = read_wav(wav)
    stem = Path(wav).stem
    an = analyze_note(x, fs, stem, acfg)
    f0, h, r = stack_features(an.features)
    h_hat, r_hat = reconstruct(model, f0, h, r)
    recon = [FrameFeatures(ft.note_id, ft.frame_index, ft.f0_hz, hh, rr)
             for ft, hh, rr in zip(an.features, h_hat, r_hat)]
    seed = int(cfg["seed"])
    y_rec, _, _ = resynthesize(recon, acfg, seed)
    y_pass, _, _ = resynthesize(an.features, acfg, seed)
    write_wav(out / f"{stem}_recon.wav", y_rec, fs)
    write_wav(out / f"{stem}_passthrough.wav", y_pass, fs)
    write_features_csv(out / f"{stem}_recon_features.csv", recon)
    dump_envelopes(out / "envelopes", stem, recon, [hp.harmonic for hp in an.hpr], acfg.fft_size, acfg.sample_rate_hz)
    write_snapshot(out, cfg, "reconstruct", {"model": str(model_dir), "wav": str(wav), "out": str(out)})


def cmd_eval(cfg, models, features, out):
    out = Path(out)
    feats = _load_features(features)
    by_key = dict(zip(_frame_keys(feats), feats))
    ecfg = cfg["eval"]
    rows = []
    for mdir in models:
        try:
            model = load_bundle(mdir)
        except (FileNotFoundError, CheckpointError, KeyError, ValueError) as exc:
            raise DataError(f"cannot load model {mdir}: {exc}")
        test_keys = model.split.get("test")
        if test_keys is None:
            raise DataError(f"{mdir}: bundle has no split manifest")
        missing = [k for k in test_keys if k not in by_key]
        if missing:
            raise DataError(f"{mdir}: {len(missing)} test frames absent from {features}")
        test = [by_key[k] for k in test_keys]
        if ecfg["octaves"]:
            test = [f for f in test if parse_note_filename(f.note_id).octave in ecfg["octaves"]]
        if not test:
            raise DataError("no test frames after octave filtering")
        metas = [parse_note_filename(f.note_id) for f in test]
        f0, h, r = stack_features(test)
        name = Path(mdir).name
        rows += mse_report(model, f0, h, r, [m.note for m in metas], name)
        labels = np.array([m.note_index for m in metas])
        rng = np.random.default_rng(int(cfg["seed"]))
        n_pts = min(int(ecfg["max_points"]), len(test))
        if n_pts >= 3 * float(ecfg["perplexity"]) and len(set(labels.tolist())) > 1:
            pick = np.sort(rng.choice(len(test), n_pts, replace=False))
            for net in model.networks:
                z = latent_codes(model, f0[pick], h[pick], r[pick], net)
                y = tsne_embed(z, float(ecfg["perplexity"]), int(ecfg["tsne_iters"]), int(cfg["seed"]))
                write_embedding_csv(out / f"embedding_{name}_{net}.csv", y, labels[pick])
                log.info("%s/%s note silhouette %.3f", name, net, silhouette(y, labels[pick]))
        # envelope overlays for the first frames of each note
        h_hat, r_hat = reconstruct(model, f0, h, r)
        seen = {}
        for i, ft in enumerate(test):
            if seen.get(ft.note_id, 0) >= int(ecfg["dump_frames"]):
                continue
            seen[ft.note_id] = seen.get(ft.note_id, 0) + 1
            dump_envelopes(out / "envelopes" / name / "input", ft.note_id, [ft])
            dump_envelopes(out / "envelopes" / name / "recon", ft.note_id,
                           [FrameFeatures(ft.note_id, ft.frame_index, ft.f0_hz, h_hat[i], r_hat[i])])
    write_mse_csv(out / "mse_report.csv", rows)
    write_snapshot(out, cfg, "eval", {"models": [str(m) for m in models], "features": str(features), "out": str(out)})


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="violin-hpr", description="Harmonic plus residual violin tone analysis and VAE modelling.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-c", "--config", help="JSON run configuration (see README)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set arch.epochs=200")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("gen", help="generate the synthetic note corpus")
    g.add_argument("--out", required=True, help="corpus directory")
    a = sub.add_parser("analyze", help="per-frame harmonic/residual features of a corpus")
    a.add_argument("--corpus", required=True)
    a.add_argument("--out", required=True)
    t = sub.add_parser("train", help="train one architecture on a features table")
    t.add_argument("--features", required=True)
    t.add_argument("--out", required=True, help="model bundle directory")
    r = sub.add_parser("reconstruct", help="resynthesize a note through a model (and pass-through)")
    r.add_argument("--model", required=True)
    r.add_argument("--wav", required=True)
    r.add_argument("--out", required=True)
    e = sub.add_parser("eval", help="MSE report, latent embeddings and envelope dumps")
    e.add_argument("--models", required=True, nargs="+")
    e.add_argument("--features", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--octaves", nargs="+", choices=["L", "M", "U"],
                   help="restrict test frames to these octaves (sets eval.octaves)")
    rp = sub.add_parser("replay", help="re-run a command from its resolved_config.json")
    rp.add_argument("snapshot")
    return p


def run(cfg: dict, command: str, args: dict) -> None:
    if command == "gen":
        cmd_gen(cfg, Path(args["out"]))
    elif command == "analyze":
        cmd_analyze(cfg, args["corpus"], args["out"])
    elif command == "train":
        cmd_train(cfg, args["features"], args["out"])
    elif command == "reconstruct":
        cmd_reconstruct(cfg, args["model"], args["wav"], args["out"])
    elif command == "eval":
        cmd_eval(cfg, args["models"], args["features"], args["out"])
    else:
        raise UsageError(f"unknown command {command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "replay":
            try:
                snap = json.loads(Path(ns.snapshot).read_text())
            except (FileNotFoundError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read snapshot {ns.snapshot}: {exc}")
            inv = snap.pop("invocation", None)
            if not inv:
                raise UsageError("snapshot has no invocation record")
            cfg = _merge(default_config(), snap)
            command, args = inv["command"], inv["args"]
        else:
            cfg = load_config(ns.config, ns.set)
            cfg.pop("invocation", None)
            if ns.seed is not None:
                cfg["seed"] = ns.seed
            if getattr(ns, "octaves", None):
                cfg["eval"]["octaves"] = list(ns.octaves)
            command = ns.command
            args = {k: v for k, v in vars(ns).items()
                    if k in ("out", "corpus", "features", "model", "wav", "models")}
        run(cfg, command, args)
    except UsageError as exc:
        print(f"violin-hpr: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"violin-hpr: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, WavError, SegmentationError, NoteNameError, CheckpointError, FileNotFoundError) as exc:
        print(f"violin-hpr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
