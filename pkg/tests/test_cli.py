import csv
import json

import numpy as np
import pytest

from crossfeat.cli import EXIT_MISSING, EXIT_OK, EXIT_USAGE, main
from crossfeat.diffcore import load_checkpoint
from crossfeat.geometry import mma_curve
from crossfeat.matching import MatchList
from crossfeat.synth import load_dataset

TINY = """\
seed: 0
scene.num_landmarks: 20
scene.latent_dim: 6
dataset.scenes: 4
dataset.val_fraction: 0.5
descriptor.descA.dim: 8
descriptor.descA.style: superpoint
descriptor.descB.dim: 12
augment.epochs: 2
augment.warmup_steps: 1
augment.aft_layers.superpoint: 1
translate.epochs: 2
translate.batch_size: 64
translate.emb_dim: 16
bench.images: 3
bench.features: 64
bench.warmup: 1
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return str(p)


def run(cfg, out, *args):
    return main([args[0], "--config", cfg, "--out", str(out), "--workers", "1", *args[1:]])


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    out = root / "run"
    for cmd in ("gen", "train-augment", "train-translate"):
        assert run(str(cfg), out, cmd) == EXIT_OK
    return str(cfg), out


def test_gen_writes_every_combination(cfg, tmp_path):
    out = tmp_path / "run"
    assert run(cfg, out, "gen", "--set", "dataset.scenes=2") == EXIT_OK
    files = sorted((out / "data").glob("*.mcha"))
    assert len(files) == 2 * 2 * 2 * 2
    assert (out / "data" / "config.resolved.yaml").exists()
    first = {f.name: f.read_bytes() for f in files}
    assert run(cfg, out, "gen", "--set", "dataset.scenes=2") == EXIT_USAGE
    assert run(cfg, out, "gen", "--set", "dataset.scenes=2", "--force") == EXIT_OK
    assert {f.name: f.read_bytes() for f in sorted((out / "data").glob("*.mcha"))} == first
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    assert len(manifest["scenes"]) == 2 and len(load_dataset(out / "data").pairs) == 2


def test_dry_run_writes_nothing(cfg, tmp_path, capsys):
    out = tmp_path / "run"
    for cmd in ("gen", "train-augment", "train-translate", "match", "eval", "bench"):
        assert run(cfg, out, cmd, "--dry-run") == EXIT_OK
        assert "scene.num_landmarks: 20" in capsys.readouterr().out
    assert not out.exists()


def test_usage_errors(cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["nonsense"]) == EXIT_USAGE
    assert run(cfg, out, "gen", "--set", "novalue") == EXIT_USAGE
    assert run(cfg, out, "gen", "--set", "augment.epochz=1") == EXIT_USAGE
    assert "unknown config key" in capsys.readouterr().err


def test_missing_prerequisites(cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(cfg, out, "train-augment") == EXIT_MISSING
    assert run(cfg, out, "plot") == EXIT_MISSING
    assert run(cfg, out, "gen") == EXIT_OK
    assert run(cfg, out, "train-translate") == EXIT_MISSING
    assert run(cfg, out, "bench") == EXIT_MISSING
    assert run(cfg, out, "match") == EXIT_MISSING
    assert "train-augment" in capsys.readouterr().err
    # direct matching needs no models
    assert run(cfg, out, "match", "--set", "match.mode=direct", "--set", "match.map=detB/descA",
               "--set", "match.query=detA/descA") == EXIT_OK


def test_eval_without_models_lists_skips(cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(cfg, out, "gen") == EXIT_OK
    assert run(cfg, out, "eval") == EXIT_MISSING
    err = capsys.readouterr().err
    assert "skipped" in err and "Ours^EMB" in err
    rows = read_rows(out / "eval" / "report.csv")
    assert {r["mode"] for r in rows} == {"Direct"}


def test_loss_csv_has_one_row_per_step(trained):
    cfg, out = trained
    rows = read_rows(out / "models" / "augment_loss.csv")
    ds = load_dataset(out / "data")
    assert len(rows) == 2 * 2 * len(ds.splits["train"])  # descriptors x epochs x pairs
    for name in ("augment.ckpt", "translate.ckpt", "translate_plain.ckpt", "config.resolved.yaml"):
        assert (out / "models" / name).exists()
    trows = read_rows(out / "models" / "translate_loss.csv")
    assert {r["variant"] for r in trows} == {"translate", "translate_plain"}


def test_resume_matches_uninterrupted_training(trained, tmp_path):
    cfg, ref = trained
    out = tmp_path / "run"
    assert run(cfg, out, "gen") == EXIT_OK
    for cmd in ("train-augment", "train-translate"):
        assert run(cfg, out, cmd, "--stop-after", "1") == EXIT_OK
        assert run(cfg, out, cmd) == EXIT_OK
    for name in ("augment_loss.csv", "translate_loss.csv"):
        assert (out / "models" / name).read_text() == (ref / "models" / name).read_text()
    for name in ("augment.ckpt", "translate.ckpt", "translate_plain.ckpt"):
        a, b = load_checkpoint(out / "models" / name), load_checkpoint(ref / "models" / name)
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_eval_report_and_plots(trained):
    cfg, out = trained
    assert run(cfg, out, "eval") == EXIT_OK
    rows = read_rows(out / "eval" / "report.csv")
    ds = load_dataset(out / "data")
    n_val = len(ds.splits["val"])
    per = {}
    for r in rows:
        per.setdefault((r["sequence"], r["config"], r["mode"]), []).append(int(r["threshold_px"]))
    assert all(sorted(ts) == list(range(1, 11)) for ts in per.values())
    assert {r["case"] for r in rows} == {"homogeneous", "cross-detector", "cross-descriptor", "heterogeneous"}
    assert len({s for s, _, _ in per}) == n_val
    assert list((out / "eval").glob("*.svg"))
    header = (out / "eval" / "report.csv").read_text().splitlines()[0]
    assert header.startswith("# model augment.ckpt sha256=")

    # totals re-derivable from the per-match dumps
    by_scene = {p.scene_id: p for p in ds.pairs}
    for r in rows[:: 10 * 7]:
        ml = MatchList.from_csv((out / "eval" / "matches" / f"{r['sequence']}_{r['config'].replace('/', '-')}_"
                                 f"{r['mode']}.csv").read_text())
        m_alg, q_alg = r["config"].split("-")
        pair = by_scene[r["sequence"]]
        q, m = pair.view(0, *q_alg.split("+")), pair.view(1, *m_alg.split("+"))
        curve = mma_curve(ml, q, m, pair.h)
        t = int(r["threshold_px"])
        assert curve.num_inliers_at[t - 1] == int(r["num_inliers"]) and curve.num_matches == int(r["num_matches"])

    assert run(cfg, out, "plot") == EXIT_OK


def test_match_writes_lists_with_checksums(trained):
    cfg, out = trained
    assert run(cfg, out, "match") == EXIT_OK
    files = sorted((out / "eval" / "matches").glob("*_embedded.csv"))
    assert files
    text = files[0].read_text()
    assert text.startswith("# mode=embedded") and "# model translate.ckpt sha256=" in text


def test_bench_table(trained, capsys):
    cfg, out = trained
    assert run(cfg, out, "bench") == EXIT_OK
    rows = read_rows(out / "bench" / "timing.csv")
    assert [r["stage"] for r in rows] == ["augmentation"] * 4 + ["translation"] * 2
    assert all(int(r["samples"]) == 3 and int(r["features"]) == 64 for r in rows)
    assert all(float(r["mean_ms"]) > 0 for r in rows)
    assert "±" in capsys.readouterr().out


def test_log_level_environment(cfg, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MATCHA_LOG", "debug")
    assert run(cfg, tmp_path / "run", "gen", "--dry-run") == EXIT_OK
