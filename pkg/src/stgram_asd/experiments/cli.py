"""Command line entry point: ``stgram-asd <subcommand> --config run.yaml --override key=value``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import yaml

from ..dataio import DatasetManifest, load_clip, scan_dataset
from ..features import FeatureCache
from ..metrics import build_report
from ..scorer import read_scores, score_split, write_scores
from ..trainer import load_bundle, train
from .ablation import run_ablation
from .config import ExperimentConfig, RunDir, load_config
from .embeddings import export_embeddings, plot_embeddings
from .synthetic import generate_synthetic_dataset

logger = logging.getLogger("stgram_asd")


def _manifests(cfg: ExperimentConfig, run: RunDir) -> tuple[DatasetManifest, DatasetManifest]:
    prepared = run.path / "manifests"
    if (prepared / "train.json").exists() and (prepared / "test.json").exists():
        return DatasetManifest.from_json(prepared / "train.json"), DatasetManifest.from_json(prepared / "test.json")
    tr = scan_dataset(cfg.roots(), "train")
    return tr, scan_dataset(cfg.roots(), "test", id_map=tr.id_map)


def _write_rejects(rejects, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["path", "reason"])
        w.writerows(rejects)


def cmd_prepare(cfg: ExperimentConfig, args) -> None:
    run = RunDir(cfg.run_dir)
    tr = scan_dataset(cfg.roots(), "train")
    te = scan_dataset(cfg.roots(), "test", id_map=tr.id_map)
    for m in (tr, te):
        for ext in ("json", "csv"):
            target = run.claim(f"manifests/{m.split}.{ext}")
            m.to_json(target) if ext == "json" else m.to_csv(target)
            run.record(target, "prepare")
        if m.rejects:
            target = run.claim(f"manifests/{m.split}_rejects.csv")
            _write_rejects(m.rejects, target)
            run.record(target, "prepare")
    print(f"train: {len(tr)} clips, {tr.class_count} machine IDs; test: {len(te)} clips; rejects: {len(tr.rejects) + len(te.rejects)}")

    if cfg.train.feature_kind == "Tgram":
        return
    cache = FeatureCache(cfg.cache_dir or run.path / "cache")
    kind = "Spec" if cfg.train.feature_kind == "Spec" else "Sgram"
    for entry in (*tr, *te):
        clip = load_clip(entry.path, cfg.spectral.sample_rate, cfg.model.clip_length, cfg.train.pad_mode, cfg.train.resample)
        cache.get_or_compute(clip, kind, cfg.spectral)
    if cache.directory.resolve().is_relative_to(run.path.resolve()):
        run.record_many(sorted(cache.directory.glob("*.npz")), "prepare")
    print(f"cached {kind} features in {cache.directory}")


def cmd_train(cfg: ExperimentConfig, args) -> None:
    run = RunDir(cfg.run_dir)
    final = run.claim("train/final.bundle")
    tr, _ = _manifests(cfg, run)
    cache = cfg.cache_dir or (run.path / "cache" if (run.path / "cache").exists() else None)
    bundle = train(tr, cfg.train, cfg.spectral, cfg.model, out_dir=final.parent, cache_dir=cache)
    run.record_many(sorted(final.parent.iterdir()), "train")
    cfg_file = run.claim("train/config.yaml")
    cfg_file.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    run.record(cfg_file, "train")
    last = bundle.history[-1]
    print(f"trained {bundle.epoch} epochs: loss {last['mean_loss']:.4f}, accuracy {last['train_accuracy']:.3f} -> {final}")


def _bundle_path(cfg, args) -> Path:
    return Path(args.bundle) if args.bundle else cfg.run_dir / "train" / "final.bundle"


def cmd_score(cfg: ExperimentConfig, args) -> None:
    run = RunDir(cfg.run_dir)
    out = run.claim("scores.csv")
    bundle = load_bundle(_bundle_path(cfg, args))
    _, te = _manifests(cfg, run)
    records = score_split(bundle, te, cfg.score_batch_size)
    write_scores(records, out)
    run.record(out, "score")
    if records.incomplete:
        rej = run.claim("score_rejects.csv")
        _write_rejects(records.rejects, rej)
        run.record(rej, "score")
        print(f"warning: {len(records.rejects)} clips could not be scored (see {rej})", file=sys.stderr)
    print(f"scored {len(records)} clips -> {out}")


def cmd_evaluate(cfg: ExperimentConfig, args) -> None:
    run = RunDir(cfg.run_dir)
    scores = Path(args.scores) if args.scores else run.path / "scores.csv"
    p = cfg.p if args.p is None else args.p
    report = build_report(read_scores(scores), p)
    targets = {ext: run.claim(f"report.{ext}") for ext in ("json", "csv", "txt")}
    report.to_json(targets["json"])
    report.to_csv(targets["csv"])
    table = report.render()
    targets["txt"].write_text(table + "\n")
    for t in targets.values():
        run.record(t, "evaluate")
    print(table)


def cmd_ablate(cfg: ExperimentConfig, args) -> None:
    cfg.roots()
    run = RunDir(cfg.run_dir)
    table_txt = run.claim("ablation/table.txt")
    result = run_ablation(cfg, out_dir=table_txt.parent)
    result.to_csv(run.claim("ablation/table.csv"))
    result.to_json(run.claim("ablation/table.json"))
    table_txt.write_text(result.render() + "\n")
    run.record_many(sorted(f for f in table_txt.parent.rglob("*") if f.is_file()), "ablate")
    print(result.render())
    if result.failures:
        raise RuntimeError(f"{len(result.failures)} ablation cell(s) failed: {', '.join(result.failures)}")


def cmd_embed(cfg: ExperimentConfig, args) -> None:
    run = RunDir(cfg.run_dir)
    out = run.claim(args.out or "embeddings.csv")
    bundle = load_bundle(_bundle_path(cfg, args))
    _, te = _manifests(cfg, run)
    export_embeddings(bundle, te, out, batch_size=cfg.score_batch_size)
    run.record(out, "embed")
    print(f"wrote {len(te)} embeddings -> {out}")


def cmd_plot(cfg: ExperimentConfig, args) -> None:
    run = RunDir(cfg.run_dir)
    src = Path(args.embeddings) if args.embeddings else run.path / "embeddings.csv"
    prefix = args.out or f"plot_{args.method}"
    run.claim(prefix + ".png")
    run.claim(prefix + "_coords.csv")
    png, coords = plot_embeddings(src, run.path / prefix, args.method, args.machine_type, cfg.seed)
    run.record(png, "plot")
    run.record(coords, "plot")
    print(f"wrote {png} and {coords}")


def cmd_synth(cfg: ExperimentConfig, args) -> None:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"{out} is not empty")
    generate_synthetic_dataset(
        out,
        n_types=args.types,
        ids_per_type=args.ids_per_type,
        n_train=args.n_train,
        n_test_normal=args.n_test,
        n_test_anomaly=args.n_test,
        clip_length=args.clip_length,
        sample_rate=cfg.spectral.sample_rate,
        seed=cfg.seed,
    )
    print(f"synthetic dataset written to {out}")


COMMANDS = {
    "prepare": (cmd_prepare, "scan the dataset, write manifests and cache spectral features"),
    "train": (cmd_train, "train a model bundle"),
    "score": (cmd_score, "score the test split with a trained bundle"),
    "evaluate": (cmd_evaluate, "compute AUC/pAUC/mAUC from a score CSV"),
    "ablate": (cmd_ablate, "run the input-feature / loss ablation matrix"),
    "embed": (cmd_embed, "export latent embeddings of the test split"),
    "plot": (cmd_plot, "project embeddings to 2-D and plot them"),
    "synth": (cmd_synth, "generate the synthetic desk-scale dataset"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stgram-asd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override, repeatable")
        if name in ("score", "embed"):
            p.add_argument("--bundle", help="model bundle (default: <run>/train/final.bundle)")
        if name == "evaluate":
            p.add_argument("--scores", help="score CSV (default: <run>/scores.csv)")
            p.add_argument("--p", type=float, default=None, help="pAUC FPR limit (default: config p)")
        if name in ("embed", "plot"):
            p.add_argument("--out", help="output file name inside the run directory")
        if name == "plot":
            p.add_argument("--embeddings", help="embedding CSV (default: <run>/embeddings.csv)")
            p.add_argument("--method", choices=("tsne", "pca"), default="tsne")
            p.add_argument("--machine-type", help="plot only this machine type")
        if name == "synth":
            p.add_argument("--out", required=True, help="dataset root to create")
            p.add_argument("--types", type=int, default=2)
            p.add_argument("--ids-per-type", type=int, default=2)
            p.add_argument("--n-train", type=int, default=50)
            p.add_argument("--n-test", type=int, default=20, help="normal and anomalous test clips per ID")
            p.add_argument("--clip-length", type=int, default=16_000)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.override)
        COMMANDS[args.command][0](cfg, args)
    except Exception as exc:  # noqa: BLE001 - CLI contract: one-line diagnostic, nonzero exit
        if args.verbose:
            logger.exception("failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
