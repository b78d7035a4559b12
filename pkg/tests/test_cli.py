import json

import pytest

from advbct.cli import main, parse_args
from advbct.data import read_csv
from advbct.model import Checkpoint

QUICK = ["--epochs", "3"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out-dir", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    train = str(data_dir / "train.csv")
    paths = {name: root / name for name in ("old", "new", "star")}
    assert main(["train", "--role", "old", "--train", train, "--out-dir", str(paths["old"]), *QUICK]) == 0
    assert main([
        "train", "--role", "new", "--train", train, "--out-dir", str(paths["new"]),
        "--old-checkpoint", str(paths["old"] / "checkpoint.abct"), *QUICK,
    ]) == 0
    assert main(["train", "--role", "independent", "--train", train, "--out-dir", str(paths["star"]), *QUICK]) == 0
    return paths


def test_gen_data_outputs(data_dir, tmp_path):
    train = read_csv(data_dir / "train.csv")
    assert len(train) == 1600
    assert len(read_csv(data_dir / "query.csv")) == 100
    assert len(read_csv(data_dir / "gallery.csv")) == 300
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["command"] == "gen-data"
    assert main(["gen-data", "--out-dir", str(tmp_path)]) == 0
    for name in ("train.csv", "query.csv", "gallery.csv"):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()


def test_train_roles(trained):
    old = Checkpoint.load(trained["old"] / "checkpoint.abct")
    new = Checkpoint.load(trained["new"] / "checkpoint.abct")
    star = Checkpoint.load(trained["star"] / "checkpoint.abct")
    assert (trained["old"] / "geometry.abct").exists()
    assert old.discriminator is None and star.discriminator is None
    assert new.discriminator is not None
    assert new.embed.d_emb == old.embed.d_emb == 16
    curve = (trained["new"] / "loss_curve.csv").read_text().splitlines()
    assert curve[0] == "epoch,L_cls,L_adv,L_p2s,gamma,total" and len(curve) == 4


def test_train_errors(data_dir, tmp_path, capsys):
    train = str(data_dir / "train.csv")
    assert main(["train", "--role", "new", "--train", train, "--out-dir", str(tmp_path)]) == 2
    assert main(["train", "--role", "new", "--method", "bogus", "--train", train,
                 "--old-checkpoint", "x", "--out-dir", str(tmp_path)]) == 2
    assert main(["train", "--role", "old", "--train", str(tmp_path / "missing.csv"),
                 "--out-dir", str(tmp_path)]) == 3
    assert main(["train", "--role", "new", "--train", train, "--old-checkpoint",
                 str(tmp_path / "missing.abct"), "--out-dir", str(tmp_path)]) == 3
    assert main(["train"]) == 2
    assert "error" in capsys.readouterr().err


def test_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nepochs = 7\nlr = 0.05\n")
    args = parse_args(["bench", "--config", str(cfg)])
    assert args.epochs == 7 and args.lr == 0.05
    args = parse_args(["bench", "--config", str(cfg), "--epochs", "2"])
    assert args.epochs == 2
    cfg.write_text("nonsense = 1\n")
    assert main(["bench", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2


def test_eval_report(trained, data_dir, tmp_path, capsys):
    q, g = str(data_dir / "query.csv"), str(data_dir / "gallery.csv")
    old, new, star = (str(trained[k] / "checkpoint.abct") for k in ("old", "new", "star"))
    assert main(["eval", "--old", old, "--new", new, "--star", star, "--query", q, "--gallery", g,
                 "--out-dir", str(tmp_path / "a")]) == 0
    doc = json.loads((tmp_path / "a" / "report.json").read_text())
    assert {"p_up", "p_comp", "p_beta_score", "test_sets", "percent"} <= set(doc)
    assert set(doc["test_sets"][0]) == {"self_old", "self_new", "self_star", "cross", "name"}
    assert main(["eval", "--old", old, "--new", new, "--star", star, "--query", q, "--gallery", g,
                 "--out-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()

    assert main(["eval", "--old", old, "--new", old, "--query", q, "--gallery", g,
                 "--out-dir", str(tmp_path / "c")]) == 0
    same = json.loads((tmp_path / "c" / "report.json").read_text())
    s = same["test_sets"][0]
    assert s["cross"] == s["self_old"] == s["self_new"]
    assert same["p_comp"] is None
    capsys.readouterr()


def test_backfill_command(trained, data_dir, tmp_path):
    args = ["backfill", "--old", str(trained["old"] / "checkpoint.abct"),
            "--new", str(trained["new"] / "checkpoint.abct"),
            "--query", str(data_dir / "query.csv"), "--gallery", str(data_dir / "gallery.csv")]
    assert main(args + ["--steps", "2", "--out-dir", str(tmp_path / "a")]) == 0
    lines = (tmp_path / "a" / "backfill.csv").read_text().splitlines()
    assert lines[0] == "rho,map" and len(lines) == 3
    assert main(args + ["--out-dir", str(tmp_path / "b")]) == 0
    assert len((tmp_path / "b" / "backfill.csv").read_text().splitlines()) == 12
    assert main(args + ["--steps", "1", "--out-dir", str(tmp_path / "c")]) == 2


def test_bench_extended_class(tmp_path, capsys):
    assert main(["bench", "--allocation", "extended-class", "--epochs", "2", "--steps", "3",
                 "--out-dir", str(tmp_path)]) == 0
    old = Checkpoint.load(tmp_path / "old_checkpoint.abct")
    assert old.classifier.n_classes == 6
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["old_classes"] == 6
    assert {r["method"] for r in summary["rows"]} == {"baseline", "advbct"}
    assert capsys.readouterr().out.startswith("allocation,model_old,model_new")


def test_bench_ablations_and_enlarged(tmp_path):
    assert main(["bench", "--allocation", "enlarged-backbone-data", "--epochs", "1", "--steps", "2",
                 "--ablations", "cls+adv,cls+p2s", "--out-dir", str(tmp_path)]) == 0
    new = Checkpoint.load(tmp_path / "advbct_checkpoint.abct")
    assert new.embed.dims == [32, 128, 128, 16]
    for name in ("cls+adv", "cls+p2s"):
        assert (tmp_path / f"report_{name}.json").exists()


def test_bench_from_csv(data_dir, tmp_path):
    argv = ["bench", "--epochs", "1", "--steps", "2", "--train", str(data_dir / "train.csv"),
            "--query", str(data_dir / "query.csv"), "--gallery", str(data_dir / "gallery.csv")]
    assert main(argv + ["--out-dir", str(tmp_path)]) == 0
    assert main(["bench", "--train", str(data_dir / "train.csv"), "--out-dir", str(tmp_path)]) == 2
