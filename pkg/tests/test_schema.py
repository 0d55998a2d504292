import json

from l2lesion.data import SynthConfig, generate_synthetic_dataset
from l2lesion.dataset import read_dataset, write_dataset
from l2lesion.metrics import confusion, derive_metrics, emit_report
from l2lesion.models import ClassifierNet, save_checkpoint
from l2lesion.proposals import RegionProposal, write_proposals_csv
from l2lesion.schema import check_path

SMALL = SynthConfig(volumes_per_class=2, depth=3, height=16, width=16)


def _kinds(results):
    return {r.kind: r.ok for r in results}


def _dataset(tmp_path):
    vols = generate_synthetic_dataset(SMALL)
    write_dataset(vols, tmp_path / "ds", SMALL, (0.5, 0.5), (0.5, 0.0, 0.5), (1, 2, 4), 0)
    return tmp_path / "ds", vols


def test_dataset_round_trip(tmp_path):
    path, vols = _dataset(tmp_path)
    back, cls_split, det_split = read_dataset(path)
    assert [v.volume_id for v in back] == [v.volume_id for v in vols]
    assert set(cls_split.values()) == {"train", "test"}
    assert all(v.label in (1, 2, 4) for v in back if v.volume_id in det_split)


def test_clean_tree_passes(tmp_path):
    path, _ = _dataset(tmp_path)
    emit_report(derive_metrics(confusion([0, 1], [0, 1], 2)), tmp_path / "report.json")
    save_checkpoint(ClassifierNet(channels=(2, 2)), tmp_path / "checkpoint")
    write_proposals_csv([RegionProposal(0, 0, 2, 2, 0.5)], tmp_path / "proposals.csv")
    results = check_path(str(tmp_path))
    assert all(r.ok for r in results), [r for r in results if not r.ok]
    kinds = _kinds(results)
    assert {"dataset", "mvol", "report", "checkpoint", "proposals"} <= set(kinds)


def test_damaged_volume_detected(tmp_path):
    path, _ = _dataset(tmp_path)
    vol = sorted((path / "volumes").glob("*.mvol"))[0]
    raw = bytearray(vol.read_bytes())
    raw[-1] ^= 0xFF
    vol.write_bytes(bytes(raw))
    assert not _kinds(check_path(str(path)))["dataset"]


def test_damaged_checkpoint_detected(tmp_path):
    save_checkpoint(ClassifierNet(channels=(2, 2)), tmp_path / "ck")
    f = tmp_path / "ck" / "params" / "fc.weights.txt"
    f.write_text(f.read_text() + "0\n")
    assert _kinds(check_path(str(tmp_path / "ck"))) == {"checkpoint": False}


def test_bad_report(tmp_path):
    d = derive_metrics(confusion([0, 1], [0, 1], 2)).to_dict()
    d["accuracy"] = 1.5
    (tmp_path / "report.json").write_text(json.dumps(d))
    assert _kinds(check_path(str(tmp_path))) == {"report": False}


def test_steps_sum(tmp_path):
    (tmp_path / "steps.csv").write_text("step,cls_loss,bbox_loss,total\n0,0.1,0.2,0.30000000000000004\n")
    assert _kinds(check_path(str(tmp_path))) == {"steps": True}
    (tmp_path / "steps.csv").write_text("step,cls_loss,bbox_loss,total\n0,0.1,0.2,0.3\n")
    assert _kinds(check_path(str(tmp_path))) == {"steps": False}


def test_unknown_files_skipped(tmp_path):
    (tmp_path / "notes.txt").write_text("hello")
    assert check_path(str(tmp_path)) == []
