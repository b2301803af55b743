import filecmp
from pathlib import Path

import pytest

from exefuse.cli import main, resolve_config, CliError
from exefuse.manifest import read_manifest

SMALL = """\
synth.n_entities = 60
synth.n_relations = 5
synth.n_facts = 300
synth.n_rules = 2
pretrain.epochs = 10
pretrain.lr = 0.05
model.d = 8
model.d_emb = 8
model.n_rules = 3
model.n_protos = 6
model.hidden = 8
domain.epochs = 2
train.epochs = 3
train.lr = 0.01
"""


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.cfg"
    p.write_text(SMALL)
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory, small_cfg):
    root = tmp_path_factory.mktemp("run")
    bench, w = root / "bench", root / "w"
    assert run("synth", "--config", small_cfg, "--seed", 3, "--out", bench) == 0
    assert run("prepare", "--bench", bench, "--seed", 3, "--out", w) == 0
    assert run("pretrain", "--config", small_cfg, "--out", w) == 0
    assert run("train", "--config", small_cfg, "--out", w) == 0
    assert run("evaluate", "--out", w) == 0
    return root


def test_gradcheck_exit_code(capsys):
    assert run("gradcheck", "--seed", 1) == 0
    out = capsys.readouterr().out
    err = float(out.strip().splitlines()[-1].split(":")[1])
    assert out.strip().splitlines()[-1].startswith("max relative error:")
    assert err < 1e-4


def test_synth_twice_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("synth", "--seed", 5, "--set", "synth.n_facts=300", "--out", tmp_path / d) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == []
    assert read_manifest(tmp_path / "a" / "manifest")["seed"] == "5"


def test_train_without_prepare_names_missing_file(tmp_path, capsys):
    assert run("train", "--out", tmp_path) != 0
    err = capsys.readouterr().err
    assert "dkg.tsv" in err and "prepare" in err


def test_unknown_flag_and_command_show_usage(capsys):
    with pytest.raises(SystemExit) as e:
        run("train", "--bogus", "1", "--out", "x")
    assert e.value.code != 0
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        run("frobnicate")
    assert e.value.code != 0


@pytest.mark.parametrize("setting,field", [("model.tau=-1", "model"), ("train.lam=abc", "train.lam"),
                                           ("nope.key=1", "nope.key"), ("holdout=1.5", "holdout")])
def test_bad_values_name_the_field(tmp_path, capsys, setting, field):
    assert run("synth", "--set", setting, "--out", tmp_path) == 2
    assert field in capsys.readouterr().err


def test_precedence_defaults_file_flags(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("model.tau = 2.0\nseed = 4\n")
    cfg = resolve_config(str(cfg_file), {"model.tau": 3.0}, {"seed": "9", "model.n_rules": "5"})
    assert cfg["model.tau"] == 3.0 and cfg["seed"] == 4 and cfg["model.n_rules"] == 5
    with pytest.raises(CliError):
        resolve_config(None, {"scheme": "s3"})


def test_stage_artifacts_and_manifests(work):
    w = work / "w"
    for name in ("prepare", "pretrain", "train", "evaluate"):
        man = read_manifest(w / f"{name}.manifest")
        assert man["command"] == name
        assert man["seed"] == "3"  # inherited from prepare through the upstream chain
    assert read_manifest(w / "train.manifest")["model.d"] == "8"
    train_man = read_manifest(w / "train.manifest")
    assert "output.model.ckpt" in train_man and "input.embeddings.ckpt" in train_man
    metrics = (w / "metrics.tsv").read_text().splitlines()
    assert metrics[0].startswith("config\tacc\tp\tr\tf1")
    rows = {line.split("\t")[0] for line in metrics[1:]}
    assert {"test", "valid", "ref"} <= rows
    pred = (w / "predictions.tsv").read_text().splitlines()
    assert pred[0] == "head\trel\ttail\tlabel\tprob"
    usage = (w / "rule_usage.tsv").read_text().splitlines()
    assert usage[0] == "rule\tmean_prob\ttop_count" and len(usage) == 1 + 3
    assert not list(w.glob("*.tmp"))


def test_manifest_reruns_stage_identically(work, tmp_path):
    w = work / "w"
    before = (w / "embeddings.ckpt").read_bytes()
    assert run("pretrain", "--config", w / "pretrain.manifest", "--out", w) == 0
    assert (w / "embeddings.ckpt").read_bytes() == before


def test_fuse_and_scale(work):
    w = work / "w"
    assert run("fuse", "--out", w, "--top-m", 2) == 0
    lines = (w / "fused.tsv").read_text().splitlines()
    assert lines[0].startswith("head\trel\ttail\tp")
    assert run("scale", "--out", w, "--sizes", "100,200", "--repetitions", 2) == 0
    rows = (w / "scaling.tsv").read_text().splitlines()
    assert len(rows) == 3 and rows[2].split("\t")[-1]
    assert run("scale", "--out", w, "--sizes", "100") == 2


def test_ablate(work, tmp_path, small_cfg):
    out = tmp_path / "abl"
    assert run("ablate", "--config", small_cfg, "--bench", work / "bench", "--variants", "full,no_exec_score",
               "--seeds", "0", "--out", out) == 0
    summary = (out / "ablation_summary.tsv").read_text().splitlines()
    assert [r.split("\t")[0] for r in summary[1:]] == ["full", "no_exec_score"]
    assert run("ablate", "--bench", work / "bench", "--variants", "nonsense", "--out", out) == 2


def test_prepare_with_explicit_files_and_holdout(work, tmp_path):
    b = work / "bench"
    out = tmp_path / "p"
    assert run("prepare", "--dkg", b / "dkg.tsv", "--gkg", b / "gkg.tsv", "--alignment", b / "alignment.tsv",
               "--candidates", b / "gold.tsv", "--holdout", 0.2, "--out", out) == 0
    assert int(read_manifest(out / "prepare.manifest")["n_held_entities"]) > 0
    assert run("prepare", "--dkg", b / "dkg.tsv", "--out", tmp_path / "q") == 2
