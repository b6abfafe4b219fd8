"""``revfp`` command line: simulate-rooms, generate, featurize, train, grid-search, evaluate, predict."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .dataset import (
    SNR_LEVELS,
    TARGET_RMS,
    DatasetManifest,
    check_disjoint,
    generate_samples,
    joint_normalization,
    load_room_rirs,
    load_speech_dir,
    render_sample,
    simulate_room_set,
    split_by_room,
    synthetic_corpus,
)
from .dsp import DEFAULT_FS, Signal, read_wav, resample, write_wav
from .errors import DataError, InvalidInputError, NumericalError, RevfpError
from .features import (
    CLIP_SAMPLES,
    FeatureStats,
    Recipe,
    assemble_features,
    decode_features,
    read_features,
    recipe_channels,
    write_features,
)
from .metrics import evaluate
from .nn import ModelCheckpoint, predict
from .rir import read_rooms, write_rooms
from .train import TrainConfig, feature_path, grid_search, stats_path, train

logger = logging.getLogger("revfp.cli")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _StageFormatter(logging.Formatter):
    def format(self, record):
        stage = getattr(record, "stage", None) or record.name.rsplit(".", 1)[-1]
        msg = record.getMessage().replace("\n", " ")
        return f"level={record.levelname} stage={stage} msg={json.dumps(msg)}"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _pool(workers: int):
    return ThreadPoolExecutor(max_workers=max(1, workers))


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


# --------------------------------------------------------------------------
# simulate-rooms
# --------------------------------------------------------------------------

def cmd_simulate_rooms(args) -> int:
    out = Path(args.out)
    cfg = {"count": args.count, "volume_range": [args.volume_min, args.volume_max],
           "alpha_range": [args.alpha_min, args.alpha_max], "receivers": args.receivers,
           "seed": args.seed}
    chash = config_hash(cfg)

    def one(i):
        return simulate_room_set(1, (args.volume_min, args.volume_max), (args.alpha_min, args.alpha_max),
                                 args.receivers, seed=args.seed, prefix="sim", index_offset=i)[0]

    with _pool(args.workers) as pool:
        sims = list(pool.map(one, range(args.count)))
    rooms = []
    for room, irs in sims:
        entries = []
        for k, ir in enumerate(irs):
            rel = f"rirs/{room.id}_{k}.wav"
            write_wav(out / rel, ir.signal)
            entries.append({"path": rel, "source": list(ir.source_pos), "mic": list(ir.mic_pos)})
        room.extra.update({"rirs": entries, "config_hash": chash})
        rooms.append(room)
        logger.info("room %s V=%.1f m3 alpha=%.2f rt60=%.3f s (sabine %.3f s)", room.id, room.volume_m3,
                    room.absorption, room.rt60_s, room.extra["sabine_rt60_s"])
    write_rooms(out / "rooms.jsonl", rooms)
    print(f"wrote {len(rooms)} rooms, {sum(len(r.extra['rirs']) for r in rooms)} RIRs to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------

def _cache_dir(args, out: Path) -> Path:
    env = os.environ.get("REVFP_CACHE")
    if env:
        return Path(env)
    return Path(args.cache) if args.cache else out / "audio"


def _audio_ref(path: Path, base: Path) -> str:
    try:
        return str(path.resolve().relative_to(base.resolve()))
    except ValueError:
        return str(path.resolve())


def _resolve_audio(manifest_path: Path, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else manifest_path.parent / p


def _speech(args):
    if args.speech_dir:
        return load_speech_dir(args.speech_dir), {"speech_dir": str(args.speech_dir)}
    corpus = synthetic_corpus(args.synthetic_clips, args.synthetic_seconds, args.seed)
    return corpus, {"synthetic_clips": args.synthetic_clips, "synthetic_seconds": args.synthetic_seconds}


def cmd_generate(args) -> int:
    out = Path(args.out)
    rooms_path = Path(args.rooms)
    rooms = read_rooms(rooms_path)
    if not rooms:
        raise DataError(f"{rooms_path} lists no rooms")
    rirs = load_room_rirs(rooms, rooms_path.parent)
    refs = {r.id: [e["path"] for e in r.extra.get("rirs", [])] for r in rooms}
    corpus, speech_cfg = _speech(args)
    assignment = split_by_room(rooms, (6, 2, 2), args.seed, allow_simulated_test=args.allow_simulated_test)
    records = generate_samples(rooms, rirs, corpus, args.per_room, args.seed, assignment,
                               replicate_snr=args.replicate_snr, rir_refs=refs)
    check_disjoint(records)
    cfg = {"rooms": _file_sha(rooms_path), "per_room": args.per_room, "seed": args.seed,
           "replicate_snr": args.replicate_snr, "allow_simulated_test": args.allow_simulated_test,
           **speech_cfg}
    cache = _cache_dir(args, out)
    speech = {c.ref: c for c in corpus}

    def render(rec):
        path = cache / f"{rec.content_key()}.wav"
        if args.force or not path.exists():
            write_wav(path, render_sample(rec, rirs, speech))
        return path

    with _pool(args.workers) as pool:
        paths = list(pool.map(render, records))
    for rec, path in zip(records, paths):
        rec.audio = _audio_ref(path, out)
    manifest = DatasetManifest(records, joint_normalization(records),
                               {"seed": args.seed, "config_hash": config_hash(cfg), "config": cfg})
    manifest.write(out / "manifest.jsonl")
    print(split_summary(manifest, rooms))
    return EXIT_OK


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def split_summary(manifest: DatasetManifest, rooms) -> str:
    prov = {r.id: r.provenance for r in rooms}
    lines = [f"{'Data Split':<12}{'# of samples':>14}{'Real Rooms':>12}{'Simulated Rooms':>17}"]
    for split in ("train", "val", "test"):
        recs = manifest.split(split)
        ids = {r.room_id for r in recs}
        real = sum(prov.get(i) == "measured" for i in ids)
        lines.append(f"{split.capitalize():<12}{len(recs):>14}{real:>12}{len(ids) - real:>17}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# featurize
# --------------------------------------------------------------------------

def _feature_ok(path: Path, expected_channels) -> bool:
    try:
        t = decode_features(path.read_bytes())
    except (OSError, DataError):
        return False
    return t.channels == expected_channels


def cmd_featurize(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = DatasetManifest.read(manifest_path)
    recipe = Recipe.parse(args.recipe)
    features_dir = Path(args.out) if args.out else manifest_path.parent / "features"
    expected = recipe_channels(recipe)

    def one(rec):
        path = feature_path(features_dir, recipe, rec.sample_id)
        if not args.force and path.exists() and _feature_ok(path, expected):
            return None
        try:
            if rec.audio is None:
                raise DataError("record has no audio reference")
            x = read_wav(_resolve_audio(manifest_path, rec.audio))
            write_features(path, assemble_features(x, recipe))
        except (DataError, InvalidInputError) as exc:
            return f"{rec.sample_id}: {exc}"
        return None

    with _pool(args.workers) as pool:
        failures = [f for f in pool.map(one, manifest.records) if f]
    for f in failures:
        logger.error("featurize failed for %s", f)
    train_recs = [r for r in manifest.split("train")
                  if feature_path(features_dir, recipe, r.sample_id).exists()]
    if train_recs:
        tensors = [read_features(feature_path(features_dir, recipe, r.sample_id)) for r in train_recs]
        stats = FeatureStats.from_tensors(tensors)
        _write_json(stats_path(features_dir, recipe),
                    {**stats.to_json(), "seed": manifest.meta.get("seed"),
                     "config_hash": manifest.meta.get("config_hash"), "train_samples": len(train_recs)})
    rows = sum(c.bands for c in expected)
    print(f"recipe {recipe.value}: {len(manifest.records) - len(failures)} feature files "
          f"({rows} stacked rows), {len(failures)} failed")
    return EXIT_DATA if failures else EXIT_OK


# --------------------------------------------------------------------------
# train / grid-search
# --------------------------------------------------------------------------

GRID_ALIASES = {"lr": "initial_lr", "batch": "batch_size", "l2": "l2_lambda",
                "batch_size": "batch_size", "initial_lr": "initial_lr", "l2_lambda": "l2_lambda"}


def parse_grid(spec: str) -> Dict[str, list]:
    """``"lr=1e-3,1e-4;batch=16,32"`` -> {"initial_lr": [...], "batch_size": [...]}."""
    axes = {}
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        if "=" not in part:
            raise InvalidInputError(f"bad grid axis {part!r}; expected name=v1,v2")
        name, values = part.split("=", 1)
        key = GRID_ALIASES.get(name.strip())
        if key is None:
            raise InvalidInputError(f"unknown grid axis {name!r}; use lr, batch or l2")
        caster = int if key == "batch_size" else float
        try:
            axes[key] = [caster(v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise InvalidInputError(f"bad grid value in {part!r}: {exc}") from exc
    if not axes:
        raise InvalidInputError("empty grid")
    return axes


def _grid_arg(spec: str) -> Dict[str, list]:
    try:
        return parse_grid(spec)
    except InvalidInputError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, initial_lr=args.lr,
                       l2_lambda=args.l2, lr_patience=args.patience, early_stop=args.early_stop,
                       seed=args.seed)


def _features_dir(args) -> Path:
    return Path(args.features) if args.features else Path(args.manifest).parent / "features"


def _run_grid(args, manifest, base):
    axes = args.grid if isinstance(args.grid, dict) else parse_grid(args.grid)
    best, table = grid_search(manifest, _features_dir(args), args.recipe, args.target, base, axes,
                              epochs=args.grid_epochs)
    return best, table


def cmd_train(args) -> int:
    manifest = DatasetManifest.read(args.manifest)
    cfg = _train_config(args)
    out = Path(args.out)
    if args.grid:
        best, table = _run_grid(args, manifest, cfg)
        _write_json(out.with_suffix(".grid.json"), table)
        best.epochs = cfg.epochs
        cfg = best
        print(f"grid search: {len(table)} configs, best lr={cfg.initial_lr:g} "
              f"batch={cfg.batch_size} l2={cfg.l2_lambda:g}")
    model, history = train(manifest, _features_dir(args), args.recipe, args.target, cfg)
    model.config["config_hash"] = config_hash({"train": cfg.to_json(), "recipe": args.recipe,
                                               "target": args.target, "manifest": _file_sha(args.manifest)})
    digest = model.save(out)
    _write_json(out.with_suffix(".history.json"), {"seed": cfg.seed, "history": history})
    print(f"checkpoint {out} sha256={digest[:16]} best_epoch={model.config.get('best_epoch')} "
          f"val_loss={model.config['best_val_loss']:.5f}")
    return EXIT_OK


def cmd_grid_search(args) -> int:
    manifest = DatasetManifest.read(args.manifest)
    best, table = _run_grid(args, manifest, _train_config(args))
    if args.out:
        _write_json(args.out, {"best": best.to_json(), "runs": table})
    for row in table:
        print(json.dumps(row, sort_keys=True))
    print(f"best: lr={best.initial_lr:g} batch={best.batch_size} l2={best.l2_lambda:g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate / predict
# --------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    model = ModelCheckpoint.load(args.checkpoint)
    manifest = DatasetManifest.read(args.manifest)
    reports = evaluate(model, manifest, _features_dir(args), args.split, out_dir=args.out,
                       checkpoint_path=args.checkpoint, manifest_path=args.manifest,
                       group_by_snr=args.group_by_snr)
    for r in reports:
        m = r.to_json()["metrics"]
        rho = "n/a" if m["pearson_rho"] is None else f"{m['pearson_rho']:.4f}"
        vr = "n/a" if m["variance_ratio"] is None else f"{m['variance_ratio']:.4f}"
        print(f"{r.split} {r.target}: MSE={m['mse']:.4f} rho={rho} MM={m['mean_mult']:.4f} VR={vr} n={len(r.pairs)}")
    return EXIT_OK


def load_clip(path) -> Signal:
    """A WAV prepared like generated samples: 16 kHz, first 4 s, fixed RMS."""
    x = read_wav(path)
    if x.sample_rate != DEFAULT_FS:
        x = resample(x, DEFAULT_FS)
    if len(x) < CLIP_SAMPLES:
        raise InvalidInputError(f"{path}: need at least 4 s of audio, got {x.duration:.2f} s")
    if len(x) > CLIP_SAMPLES:
        logger.warning("%s: using the first 4 s of %.2f s", path, x.duration)
    s = x.samples[:CLIP_SAMPLES]
    rms = math.sqrt(float(np.mean(s**2)))
    if rms == 0:
        raise InvalidInputError(f"{path}: silent audio")
    return Signal(s * (TARGET_RMS / rms), DEFAULT_FS)


def cmd_predict(args) -> int:
    model = ModelCheckpoint.load(args.checkpoint)
    stats = FeatureStats.from_json(model.feature_stats) if model.feature_stats else None
    feats = assemble_features(load_clip(args.wav), model.recipe, stats=stats)
    est = predict(model, feats.values[None])
    print(f"recipe={model.recipe} target={model.target_mode} checkpoint={args.checkpoint}")
    if "volume_m3" in est:
        print(f"volume_m3={float(est['volume_m3'][0]):.3f}")
    if "rt60_s" in est:
        print(f"rt60_s={float(est['rt60_s'][0]):.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", help="feature directory (default: <manifest dir>/features)")
    p.add_argument("--recipe", default="PlusPhase", choices=[r.value for r in Recipe])
    p.add_argument("--target", default="volume", choices=["volume", "rt60", "joint"])
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--patience", type=int, default=25, help="epochs without val improvement before halving lr")
    p.add_argument("--early-stop", type=int, default=None, help="stop after this many epochs without improvement")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=_grid_arg, help='grid axes, e.g. "lr=1e-3,1e-4;batch=16,32;l2=0,1e-4"')
    p.add_argument("--grid-epochs", type=int, default=None, help="per-run epoch budget during grid search")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="revfp", description=__doc__)
    parser.add_argument("--version", action="version", version=f"revfp {__version__}")
    parser.add_argument("--config", help="JSON/YAML file of flag defaults; explicit flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate-rooms", help="simulate shoebox rooms and their RIRs")
    p.add_argument("--count", type=int, default=30)
    p.add_argument("--volume-min", type=float, default=20.0)
    p.add_argument("--volume-max", type=float, default=2000.0)
    p.add_argument("--alpha-min", type=float, default=0.1)
    p.add_argument("--alpha-max", type=float, default=0.7)
    p.add_argument("--receivers", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate_rooms)

    p = sub.add_parser("generate", help="render noisy reverberant samples and a manifest")
    p.add_argument("--rooms", required=True, help="rooms JSON-lines manifest")
    p.add_argument("--speech-dir", help="directory of dry mono WAVs (default: synthetic speech)")
    p.add_argument("--synthetic-clips", type=int, default=16)
    p.add_argument("--synthetic-seconds", type=float, default=10.0)
    p.add_argument("--per-room", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replicate-snr", action="store_true", help="emit every draw at all five SNR levels")
    p.add_argument("--allow-simulated-test", action="store_true",
                   help="let simulated rooms enter the test split")
    p.add_argument("--cache", help="audio cache dir (default <out>/audio; REVFP_CACHE overrides)")
    p.add_argument("--force", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("featurize", help="compute feature files for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--recipe", default="PlusPhase", choices=[r.value for r in Recipe])
    p.add_argument("--out", help="feature directory (default: <manifest dir>/features)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a CNN regressor")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid-search", help="search batch size, learning rate and L2 strength")
    _add_train_flags(p)
    p.add_argument("--out", help="results JSON path")
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("evaluate", help="metrics and scatter data for one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--group-by-snr", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="estimate volume/RT60 for one WAV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("wav")
    p.set_defaults(func=cmd_predict)
    return parser


def _load_config(path) -> dict:
    import yaml

    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError(f"config {path} must be a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _apply_config(parser: argparse.ArgumentParser, defaults: dict) -> None:
    """Install config-file values as defaults; flags given on the command line still win."""
    subs = parser._subparsers._group_actions[0].choices
    known = {a.dest for a in parser._actions}
    for sub in subs.values():
        known |= {a.dest for a in sub._actions}
    unknown = set(defaults) - known
    if unknown:
        raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
    for p in (parser, *subs.values()):
        for action in p._actions:
            if action.dest in defaults:
                action.required = False
                p.set_defaults(**{action.dest: defaults[action.dest]})


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config_path = pre.parse_known_args(argv)[0].config
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_StageFormatter())
    root = logging.getLogger("revfp")
    root.handlers[:] = [handler]
    root.propagate = False
    try:
        if config_path:
            _apply_config(parser, _load_config(config_path))
        args = parser.parse_args(argv)
        root.setLevel(logging.INFO if args.verbose else logging.WARNING)
        if args.command == "grid-search" and not args.grid:
            parser.error("grid-search needs --grid")
        return args.func(args)
    except NumericalError as exc:
        logger.error("%s", exc)
        return EXIT_NUMERIC
    except InvalidInputError as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    except RevfpError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
