"""Smoke runs of every subcommand on a tiny synthetic dataset."""
import csv
import json

import pytest

from l2lesion.cli import DEFAULT_SUBSETS, main, modality_flags, parse_subset
from l2lesion.errors import BadSubset

TINY = ["--set", "volumes_per_class=3", "--set", "depth=4", "--set", "height=32", "--set", "width=32",
        "--set", "detect_split=0.4,0.3,0.3", "--set", "split=0.6,0.4", "--set", "epochs=1",
        "--set", "channels=2,4", "--set", "hidden=8", "--set", "max_proposals=20",
        "--set", "rois_per_image=4", "--set", "augment="]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert main(["synth", "--seed", "5", "--out", str(out)] + TINY) == 0
    return out


def _run(*argv):
    return main(list(argv) + TINY)


def test_synth_layout(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["format"] == "l2lesion-dataset-1"
    assert len(list((dataset / "volumes").glob("*.mvol"))) == 15


def test_synth_reproducible(dataset, tmp_path):
    assert main(["synth", "--seed", "5", "--out", str(tmp_path / "b")] + TINY) == 0
    for name in ("manifest.json", "volumes.csv", "classify_split.csv", "detect_split.csv"):
        assert (tmp_path / "b" / name).read_bytes() == (dataset / name).read_bytes()


def test_train_classify_and_eval(dataset, tmp_path, capsys):
    out = tmp_path / "cls"
    assert _run("train-classify", "--dataset", str(dataset), "--out", str(out), "--format", "csv") == 0
    for name in ("report.json", "report.csv", "curve.csv", "checkpoint/manifest.json"):
        assert (out / name).exists(), name
    ev = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--dataset", str(dataset),
                 "--out", str(ev)]) == 0
    a = json.loads((out / "report.json").read_text())
    b = json.loads((ev / "report.json").read_text())
    assert a == b
    assert main(["schema-check", str(out), str(ev)]) == 0


def test_train_detect(dataset, tmp_path):
    out = tmp_path / "det"
    assert _run("train-detect", "--dataset", str(dataset), "--out", str(out)) == 0
    with open(out / "steps.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    for r in rows:
        assert float(r["cls_loss"]) + float(r["bbox_loss"]) == float(r["total"])
    assert main(["schema-check", str(out)]) == 0


def test_gradcheck(tmp_path, capsys):
    assert main(["gradcheck", "--scope", "l2", "--trials", "20", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "EXPECTED FAIL" in text
    assert json.loads((tmp_path / "gradcheck.json").read_text())["ok"]


def test_ablations(dataset, tmp_path):
    assert _run("ablate-modality", "--dataset", str(dataset), "--out", str(tmp_path),
                "--subsets", "FLAIR", "T1,T1c,T2,FLAIR") == 0
    with open(tmp_path / "modality_ablation.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["T1", "T1c", "T2", "F/D", "Dice"]
    assert [r[:4] for r in rows[1:]] == [["-", "-", "-", "x"], ["x", "x", "x", "x"]]
    assert _run("ablate-pooling", "--dataset", str(dataset), "--out", str(tmp_path)) == 0
    with open(tmp_path / "pooling_ablation.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert [r[1] for r in rows[1:]] == ["max", "l2"]
    assert main(["schema-check", str(tmp_path)]) == 0


class TestExitCodes:
    def test_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["bogus"])
        assert exc.value.code == 1

    def test_unknown_config_key(self, tmp_path):
        assert main(["train-classify", "--set", "nope=1", "--out", str(tmp_path)]) == 1

    def test_bad_seed(self, tmp_path):
        assert main(["synth", "--seed", "-1", "--out", str(tmp_path)]) == 1

    def test_missing_dataset(self, tmp_path):
        assert main(["train-classify", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path)]) == 2

    def test_bad_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path), "--out", str(tmp_path)]) == 2

    def test_empty_subset(self, tmp_path):
        assert main(["ablate-modality", "--subsets", ",", "--out", str(tmp_path)]) == 1

    def test_schema_missing_path(self, tmp_path):
        assert main(["schema-check", str(tmp_path / "nothing")]) == 2

    def test_schema_bad_artifact(self, tmp_path):
        (tmp_path / "curve.csv").write_text("wrong,header\n1,2\n")
        assert main(["schema-check", str(tmp_path)]) == 2


def test_subset_helpers():
    assert parse_subset("T1, FLAIR") == ("T1", "FLAIR")
    assert parse_subset("T1+T2") == ("T1", "T2")
    with pytest.raises(BadSubset):
        parse_subset(" , ")
    assert modality_flags(("T1", "DWI")) == ["x", "-", "-", "x"]
    assert len(DEFAULT_SUBSETS) == 9
