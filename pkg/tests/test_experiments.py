import csv
import json

import numpy as np
import pytest
import yaml

from conftest import TINY_MODEL, TINY_SPECTRAL
from stgram_asd.dataio import ConfigurationError, DatasetManifest, scan_dataset
from stgram_asd.experiments import cli
from stgram_asd.experiments.config import DATA_ROOT_ENV, ArtifactExists, ExperimentConfig, RunDir, load_config
from stgram_asd.experiments.embeddings import compute_embeddings, export_embeddings, read_embeddings
from stgram_asd.experiments.synthetic import generate_synthetic_dataset
from stgram_asd.metrics import MetricsReport
from stgram_asd.trainer import TrainConfig, train


def write_config(path, data_root, out_dir, **extra):
    d = {
        "data_root": str(data_root),
        "output_dir": str(out_dir),
        "run_id": "r1",
        "spectral": {"mel_bins": TINY_SPECTRAL.mel_bins},
        "model": {"clip_length": TINY_MODEL.clip_length, "mfn": "small"},
        "train": {"epochs": 5, "batch_size": 8, "base_lr": 1e-3},
    }
    d.update(extra)
    path.write_text(yaml.safe_dump(d))
    return path


# ---------------------------------------------------------------- config


def test_defaults_follow_the_reference_setup():
    cfg = ExperimentConfig()
    assert cfg.train.epochs == 200 and cfg.train.batch_size == 128 and cfg.train.base_lr == 1e-4
    assert cfg.spectral.mel_bins == 128 and cfg.model.arcface_margin == 0.7 and cfg.model.arcface_scale == 30.0
    assert cfg.p == 0.1
    assert [f"{f}/{h}" for f, h in cfg.ablation] == ["LogMel/CEE", "Tgram/CEE", "Spec/CEE", "STgram/CEE", "STgram/ArcFace"]


def test_file_env_and_override_precedence(tmp_path, monkeypatch):
    path = write_config(tmp_path / "c.yaml", "/from/file", tmp_path)
    monkeypatch.delenv(DATA_ROOT_ENV, raising=False)
    assert load_config(path).data_root == "/from/file"
    monkeypatch.setenv(DATA_ROOT_ENV, "/from/env")
    cfg = load_config(path, ["train.epochs=2", "spectral.hop_length=256"])
    assert cfg.data_root == "/from/env"
    assert cfg.train.epochs == 2 and cfg.spectral.hop_length == 256
    assert load_config(path, ["data_root=/from/flag"]).data_root == "/from/flag"


def test_train_seed_follows_top_level_seed(tmp_path):
    assert load_config(None, ["seed=7"]).train.seed == 7
    assert load_config(None, ["seed=7", "train.seed=3"]).train.seed == 3


def test_bad_configs_are_rejected(tmp_path):
    with pytest.raises(ConfigurationError, match="unknown"):
        load_config(None, ["trian.epochs=2"])
    with pytest.raises(ConfigurationError, match="unknown keys in 'train'"):
        load_config(None, ["train.epoch=2"])
    with pytest.raises(ConfigurationError):
        load_config(None, ["train.epochs=0"])
    with pytest.raises(ConfigurationError):
        load_config(None, ["noequals"])
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(ablation=[("MFCC", "CEE")])


def test_config_round_trips_through_yaml(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.yaml", tmp_path, tmp_path), ["model.mfn=small"])
    again = ExperimentConfig.from_dict(yaml.safe_load(yaml.safe_dump(cfg.to_dict())))
    assert again == cfg


def test_run_dir_refuses_overwrite(tmp_path):
    run = RunDir(tmp_path / "run")
    target = run.claim("scores.csv")
    target.write_text("x")
    run.record(target, "score")
    with pytest.raises(ArtifactExists):
        run.claim("scores.csv")
    listed = json.loads((tmp_path / "run" / "run_manifest.json").read_text())["artifacts"]
    assert listed[0]["path"] == "scores.csv" and listed[0]["subcommand"] == "score"
    with pytest.raises(ArtifactExists):
        RunDir(tmp_path / "run").claim("scores.csv")


# ---------------------------------------------------------------- CLI


@pytest.fixture(scope="module")
def cli_run(tiny_root, tmp_path_factory, monkeypatch_module):
    """prepare -> train -> score -> evaluate -> embed on the tiny corpus."""
    base = tmp_path_factory.mktemp("cli")
    monkeypatch_module.delenv(DATA_ROOT_ENV, raising=False)
    cfg = write_config(base / "c.yaml", tiny_root, base / "runs")
    args = ["--config", str(cfg)]
    codes = {
        "prepare": cli.main(["prepare", *args]),
        "train": cli.main(["train", *args, "--override", "train.epochs=2"]),
        "score": cli.main(["score", *args]),
        "evaluate": cli.main(["evaluate", *args, "--scores", str(base / "runs" / "r1" / "scores.csv"), "--p", "0.1"]),
        "embed": cli.main(["embed", *args]),
    }
    return codes, base / "runs" / "r1", cfg


@pytest.fixture(scope="module")
def monkeypatch_module():
    mp = pytest.MonkeyPatch()
    yield mp
    mp.undo()


def test_cli_pipeline_succeeds(cli_run):
    codes, run, _ = cli_run
    assert codes == dict.fromkeys(codes, 0)
    for rel in (
        "manifests/train.json",
        "manifests/test.csv",
        "train/final.bundle",
        "train/train_log.csv",
        "train/config.yaml",
        "scores.csv",
        "report.json",
        "report.csv",
        "report.txt",
        "embeddings.csv",
    ):
        assert (run / rel).is_file(), rel


def test_override_sets_epoch_count(cli_run):
    _, run, _ = cli_run
    with open(run / "train" / "train_log.csv") as f:
        assert len(list(csv.DictReader(f))) == 2
    assert yaml.safe_load((run / "train" / "config.yaml").read_text())["train"]["epochs"] == 2


def test_prepare_caches_features(cli_run):
    _, run, _ = cli_run
    manifest = DatasetManifest.from_json(run / "manifests" / "test.json")
    assert len(manifest) == 2 * 2 * 6
    assert len(list((run / "cache").glob("*.npz"))) == 2 * 2 * (6 + 6)


def test_every_artifact_is_in_the_run_manifest(cli_run):
    _, run, _ = cli_run
    listed = {a["path"] for a in json.loads((run / "run_manifest.json").read_text())["artifacts"]}
    on_disk = {str(p.relative_to(run)) for p in run.rglob("*") if p.is_file() and p.name != "run_manifest.json"}
    assert on_disk == listed


def test_report_is_reproducible_from_disk(cli_run, tmp_path):
    _, run, _ = cli_run
    report = MetricsReport.from_json(run / "report.json")
    again = tmp_path / "again"
    assert cli.main(["evaluate", "--override", f"output_dir={again}", "--scores", str(run / "scores.csv")]) == 0
    assert MetricsReport.from_json(again / "default" / "report.json") == report
    assert "Average" in (run / "report.txt").read_text()


def test_rerun_is_refused(cli_run, capsys):
    _, _, cfg = cli_run
    assert cli.main(["score", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ArtifactExists")


def test_embedding_file_layout(cli_run):
    _, run, _ = cli_run
    values, labels = read_embeddings(run / "embeddings.csv")
    header = (run / "embeddings.csv").read_text().splitlines()[0].split(",")
    assert values.shape == (24, 64) and len(header) == 64 + 3
    assert header[-3:] == ["machine_type", "machine_id", "condition"]
    assert {lab[2] for lab in labels} == {"normal", "anomaly"}


@pytest.mark.parametrize("method", ["pca", "tsne"])
def test_plot_writes_image_and_coordinates(cli_run, method):
    _, run, cfg = cli_run
    assert cli.main(["plot", "--config", str(cfg), "--method", method, "--machine-type", "synth0"]) == 0
    assert (run / f"plot_{method}.png").stat().st_size > 0
    rows = list(csv.DictReader(open(run / f"plot_{method}_coords.csv")))
    assert len(rows) == 12 and {r["machine_type"] for r in rows} == {"synth0"}


def test_ablate_on_missing_dataset(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv(DATA_ROOT_ENV, raising=False)
    cfg = write_config(tmp_path / "c.yaml", tmp_path / "no_such_dataset", tmp_path / "runs")
    assert cli.main(["ablate", "--config", str(cfg)]) != 0
    assert "dataset root does not exist" in capsys.readouterr().err
    assert not list((tmp_path / "runs").rglob("table.*"))


def test_unknown_flag_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_synth_subcommand(tmp_path):
    out = tmp_path / "synth"
    assert cli.main(["synth", "--out", str(out), "--types", "1", "--ids-per-type", "2", "--n-train", "3", "--n-test", "2", "--clip-length", "4000"]) == 0
    tr = scan_dataset(out, "train")
    te = scan_dataset(out, "test")
    assert len(tr) == 6 and len(te) == 8 and tr.class_count == 2
    assert cli.main(["synth", "--out", str(out)]) == 1


def test_synthetic_generator_is_seeded(tmp_path):
    a = generate_synthetic_dataset(tmp_path / "a", n_types=1, ids_per_type=1, n_train=2, n_test_normal=1, n_test_anomaly=1, clip_length=2000, seed=3)
    b = generate_synthetic_dataset(tmp_path / "b", n_types=1, ids_per_type=1, n_train=2, n_test_normal=1, n_test_anomaly=1, clip_length=2000, seed=3)
    files = sorted(p.relative_to(a) for p in a.rglob("*.wav"))
    assert files == sorted(p.relative_to(b) for p in b.rglob("*.wav"))
    assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files)


# ---------------------------------------------------------------- embeddings


@pytest.fixture(scope="module")
def two_class(tmp_path_factory):
    root = generate_synthetic_dataset(
        tmp_path_factory.mktemp("two"), n_types=1, ids_per_type=2, n_train=20, n_test_normal=10, n_test_anomaly=5, clip_length=8_000, seed=2
    )
    tr = scan_dataset(root, "train")
    bundle = train(tr, TrainConfig(epochs=10, batch_size=8, base_lr=1e-3, feature_kind="STgram", head_kind="ArcFace"), TINY_SPECTRAL, TINY_MODEL)
    return bundle, scan_dataset(root, "test", id_map=tr.id_map)


def test_trained_embeddings_separate_the_classes(two_class):
    bundle, test = two_class
    normal = DatasetManifest([e for e in test if e.label.condition == "normal"], "test", test.id_map)
    emb = compute_embeddings(bundle, normal)
    labels = np.array([e.label.class_index for e in normal])
    assert set(labels) == {0, 1}
    c0, c1 = emb[labels == 0].mean(0), emb[labels == 1].mean(0)
    within = np.mean([np.linalg.norm(e - (c0 if y == 0 else c1)) for e, y in zip(emb, labels)])
    assert np.linalg.norm(c0 - c1) > within


def test_identical_clips_give_identical_rows(two_class, tmp_path):
    bundle, test = two_class
    e = test.entries[0]
    dup = DatasetManifest([e, test.entries[1], e, e], "test", test.id_map)
    values, _ = read_embeddings(export_embeddings(bundle, dup, tmp_path / "e.csv", batch_size=3))
    assert values.shape == (4, bundle.model.mfn.embedding_dim)
    assert np.array_equal(values[0], values[2]) and np.array_equal(values[0], values[3])


def test_embedding_feature_kind_must_match(two_class, tmp_path):
    bundle, test = two_class
    with pytest.raises(ValueError, match="STgram"):
        export_embeddings(bundle, test, tmp_path / "e.csv", feature_kind="LogMel")
