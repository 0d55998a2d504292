import struct
from dataclasses import replace

import numpy as np
import pytest

from l2lesion.data import (
    MAGIC,
    MultiModalVolume,
    SynthConfig,
    augment,
    balance_classes,
    extract_slices,
    fuse_modalities,
    generate_synthetic_dataset,
    load_volume,
    normalize,
    save_volume,
    scale_image,
    split_volumes,
)
from l2lesion.errors import BadMagic, InconsistentDims, MissingModality, TruncatedFile
from l2lesion.proposals import RegionProposal
from l2lesion.tensor import Tensor

SMALL = SynthConfig(volumes_per_class=1, depth=4, height=24, width=24)


def _vol(mods=("T1", "T1c", "FLAIR"), shape=(3, 8, 8), seed=0, boxes=()):
    rng = np.random.default_rng(seed)
    return MultiModalVolume({m: Tensor(rng.random(shape)) for m in mods}, 2, list(boxes), "v0")


class TestMVOL:
    def test_round_trip(self, tmp_path):
        vol = _vol(boxes=[(1, 2, 3, 5, 6, 2)])
        path = tmp_path / "v0.mvol"
        save_volume(vol, path)
        back = load_volume(path)
        assert back.label == 2 and back.lesion_boxes == [(1, 2, 3, 5, 6, 2)]
        assert back.volume_id == "v0"
        for m, t in vol.modalities.items():
            ref = normalize(t.data.astype(np.float32).astype(np.float64))
            assert np.array_equal(back.modalities[m].data, ref)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "v.mvol"
        save_volume(_vol(mods=("T2",), shape=(1, 2, 2)), path)
        raw = path.read_bytes()
        assert raw[:6] == MAGIC
        assert struct.unpack("<I", raw[6:10]) == (1,)
        assert raw[10:26] == b"T2".ljust(16, b"\x00")
        assert len(raw) == 6 + 4 + 16 + 12 + 16 + 8

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.mvol"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(BadMagic):
            load_volume(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "v.mvol"
        save_volume(_vol(), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(TruncatedFile):
            load_volume(path)

    def test_inconsistent_dims(self, tmp_path):
        path = tmp_path / "v.mvol"
        save_volume(_vol(mods=("T1",), shape=(1, 2, 2)), path)
        raw = bytearray(path.read_bytes())
        # append a second modality with different dims
        extra = b"T2".ljust(16, b"\x00") + struct.pack("<3I", 1, 3, 3) + np.zeros(9, "<f4").tobytes()
        body = raw[10:10 + 16 + 12 + 16]
        tail = raw[10 + 16 + 12 + 16:]
        path.write_bytes(MAGIC + struct.pack("<I", 2) + bytes(body) + extra + bytes(tail))
        with pytest.raises(InconsistentDims):
            load_volume(path)

    def test_constant_modality_normalizes_to_zero(self):
        assert not normalize(np.full((2, 2), 3.0)).any()

    def test_construct_mismatch(self):
        with pytest.raises(InconsistentDims):
            MultiModalVolume({"T1": Tensor(np.zeros((1, 2, 2))), "T2": Tensor(np.zeros((1, 3, 3)))})


class TestFusion:
    def test_channel_order(self):
        vol = _vol()
        sl = fuse_modalities(vol, ("FLAIR", "T1"), 1)
        assert sl.image.shape == (2, 8, 8)
        assert np.array_equal(sl.image.data[0], vol.modalities["FLAIR"].data[1])
        assert np.array_equal(sl.image.data[1], vol.modalities["T1"].data[1])

    def test_missing(self):
        with pytest.raises(MissingModality):
            fuse_modalities(_vol(mods=("T1", "T1c")), ("T1", "T1c", "FLAIR"))

    def test_fallback(self):
        vol = _vol(mods=("T1", "T1c", "DWI"))
        sl = fuse_modalities(vol, ("T1", "T1c", "FLAIR"), 0, fallback={"FLAIR": "DWI"})
        assert np.array_equal(sl.image.data[2], vol.modalities["DWI"].data[0])

    @pytest.mark.parametrize("view,shape", [("axial", (3, 8, 8)), ("coronal", (3, 3, 8)), ("sagittal", (3, 3, 8))])
    def test_views(self, view, shape):
        assert fuse_modalities(_vol(), index=1, view=view).image.shape == shape


class TestSlices:
    def test_counts(self):
        vol = _vol(boxes=[(1, 0, 0, 2, 2, 2)])
        assert len(extract_slices(vol)) == 3
        assert [s.source[1] for s in extract_slices(vol, lesion_only=True)] == [1]

    def test_lesion_only_without_boxes_keeps_all(self):
        assert len(extract_slices(_vol(), lesion_only=True)) == 3

    def test_boxes_follow_slice(self):
        vol = _vol(boxes=[(2, 1, 2, 4, 6, 2)])
        sl = extract_slices(vol)[2]
        assert sl.boxes == [(RegionProposal(1, 2, 4, 6), 2)]

    def test_coronal_boxes_from_mask(self):
        vol = _vol(boxes=[(0, 1, 2, 4, 6, 2), (1, 1, 2, 4, 6, 2)])
        sl = extract_slices(vol, view="coronal")[3]  # y = 3 crosses both slices
        assert sl.boxes == [(RegionProposal(1, 0, 4, 2), 2)]


class TestAugment:
    def test_hflip(self):
        sl = extract_slices(_vol(boxes=[(0, 1, 2, 3, 5, 2)]))[0]
        orig, flipped = augment(sl, ["hflip"])
        assert orig is sl
        assert np.array_equal(flipped.image.data, sl.image.data[:, :, ::-1])
        assert flipped.boxes == [(RegionProposal(5, 2, 7, 5), 2)]

    def test_vflip_twice_identity(self):
        sl = extract_slices(_vol(boxes=[(0, 1, 2, 3, 5, 2)]))[0]
        once = augment(sl, ["vflip"])[1]
        twice = augment(once, ["vflip"])[1]
        assert np.array_equal(twice.image.data, sl.image.data) and twice.boxes == sl.boxes

    def test_scale_one_identity(self):
        img = np.random.default_rng(0).random((2, 8, 8))
        assert np.array_equal(scale_image(img, 1.0), img)

    def test_scale_defaults(self):
        sl = extract_slices(_vol())[0]
        assert len(augment(sl, ["scale"])) == 3

    def test_unknown(self):
        with pytest.raises(ValueError):
            augment(extract_slices(_vol())[0], ["rotate"])


class TestSplits:
    def test_disjoint_and_covering(self):
        labels = [0] * 10 + [1] * 7 + [2] * 3
        groups = split_volumes(labels, (0.7, 0.1, 0.2), seed=3)
        flat = sorted(i for g in groups for i in g)
        assert flat == list(range(20))

    def test_stratified(self):
        labels = [0] * 10 + [1] * 10
        train, test = split_volumes(labels, (0.8, 0.2), seed=0)
        assert sum(labels[i] for i in test) == 2 and len(test) == 4

    def test_seeded(self):
        labels = list(range(5)) * 4
        assert split_volumes(labels, (0.5, 0.5), 7) == split_volumes(labels, (0.5, 0.5), 7)

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            split_volumes([0, 1], (0.5, 0.6))


class TestSynthetic:
    def test_bit_reproducible(self):
        a = generate_synthetic_dataset(SMALL)
        b = generate_synthetic_dataset(SMALL)
        for va, vb in zip(a, b):
            assert va.lesion_boxes == vb.lesion_boxes
            for m in va.modalities:
                assert va.modalities[m].data.tobytes() == vb.modalities[m].data.tobytes()

    def test_classes_and_boxes(self):
        vols = generate_synthetic_dataset(SMALL)
        assert [v.label for v in vols] == [0, 1, 2, 3, 4]
        assert not vols[0].lesion_boxes
        for v in vols[1:]:
            assert v.lesion_boxes and all(b[5] == v.label for b in v.lesion_boxes)

    def test_survives_mvol_round_trip(self, tmp_path):
        vol = generate_synthetic_dataset(SMALL)[1]
        save_volume(vol, tmp_path / "v.mvol")
        back = load_volume(tmp_path / "v.mvol")
        for m in vol.modalities:
            assert np.array_equal(back.modalities[m].data, vol.modalities[m].data)

    def test_lesion_bright_on_flair(self):
        vol = generate_synthetic_dataset(SMALL)[1]
        z, x0, y0, x1, y1, _ = vol.lesion_boxes[len(vol.lesion_boxes) // 2]
        flair = vol.modalities["FLAIR"].data[z]
        assert flair[y0:y1, x0:x1].mean() > flair[flair > 0.05].mean()

    def test_bad_config(self):
        with pytest.raises(ValueError):
            SynthConfig(volumes_per_class=0)


def _softmax_regression(x, y, k, iters=2000, lr=0.5):
    w = np.zeros((x.shape[1] + 1, k))
    xb = np.hstack([x, np.ones((len(x), 1))])
    onehot = np.eye(k)[y]
    for _ in range(iters):
        z = xb @ w
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * xb.T @ (p - onehot) / len(x)
    return w


def test_mean_intensity_is_not_enough():
    # classes must differ in structure, not in a global brightness offset
    from l2lesion.config import RunConfig
    from l2lesion.train import _slices, load_dataset

    cfg = RunConfig()
    vols, split, _ = load_dataset(cfg)
    tr, te = _slices(vols, split, "train", cfg), _slices(vols, split, "test", cfg)
    xtr = np.array([s.image.data.mean(axis=(1, 2)) for s in tr])
    xte = np.array([s.image.data.mean(axis=(1, 2)) for s in te])
    mu, sd = xtr.mean(axis=0), xtr.std(axis=0)
    w = _softmax_regression((xtr - mu) / sd, np.array([s.label for s in tr]), 5)
    pred = np.argmax(np.hstack([(xte - mu) / sd, np.ones((len(xte), 1))]) @ w, axis=1)
    acc = float(np.mean(pred == np.array([s.label for s in te])))
    assert acc < 0.6, acc


def test_balance_classes():
    sl = extract_slices(_vol(shape=(2, 8, 8)))
    items = [sl[0]] * 5 + [replace(sl[1], label=3)] * 2
    out = balance_classes(items, seed=1)
    assert out[:7] == items
    labels = [s.label for s in out]
    assert labels.count(2) == labels.count(3) == 5
    assert out == balance_classes(items, seed=1)
    assert balance_classes([]) == []
