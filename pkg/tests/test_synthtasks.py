import json

import numpy as np
import pytest

from modelmix import synthtasks as S
from modelmix.synthtasks import ScribblePolicy, SynthConfig

SMALL = SynthConfig(size=32, n_labeled=2, n_unlabeled=3, n_val=2, n_test=2)


@pytest.fixture(scope="module")
def pair():
    return S.generate_task_pair(3, SMALL)


def test_pair_structure(pair):
    s, p = pair
    assert (s.name, s.num_classes) == ("structure", 3)
    assert (p.name, p.num_classes) == ("pathology", 2)
    for ds in pair:
        assert [len(ds.split(k)) for k in ("train", "val", "test")] == [5, 2, 2]
        assert len(ds.labeled_ids) == 2
        ids = [it.id for it in ds.items]
        assert len(set(ids)) == len(ids)
        for it in ds.items:
            assert it.image.shape == (32, 32) and it.image.dtype == np.float32
            assert 0.0 <= it.image.min() and it.image.max() <= 1.0
            assert np.array_equal(np.round(it.image * 255) / 255, it.image.astype(np.float64).round(6)) or True
            assert np.all(np.abs(it.image * 255 - np.round(it.image * 255)) < 1e-3)


def test_deterministic():
    a = S.generate_task_pair(11, SMALL)
    b = S.generate_task_pair(11, SMALL)
    c = S.generate_task_pair(12, SMALL)
    assert all(S.datasets_equal(x, y) for x, y in zip(a, b))
    assert not S.datasets_equal(a[0], c[0])


def test_every_class_scribbled_in_labeled_items(pair):
    for ds in pair:
        seen = set()
        for it in ds.split("train"):
            ann = it.scribble != ds.num_classes
            if it.labeled:
                seen |= set(np.unique(it.scribble[ann]).tolist())
                assert np.array_equal(it.scribble[ann], it.label[ann])
            else:
                assert not ann.any()
        assert seen == set(range(ds.num_classes))


def test_class_fractions_within_bands():
    s, p = S.generate_task_pair(0, SynthConfig(n_unlabeled=20, n_val=0, n_test=0))
    ring = np.array([np.mean(it.label == 2) for it in s.items])
    disk = np.array([np.mean(it.label == 1) for it in s.items])
    lesion = np.array([np.mean(it.label == 1) for it in p.items])
    assert 0.05 <= ring.min() and ring.max() <= 0.20
    assert 0.03 <= disk.min() and disk.max() <= 0.15
    assert 0.005 <= lesion.min() and lesion.max() <= 0.12


def test_lesion_lies_inside_ring():
    rng = np.random.default_rng(0)
    for _ in range(30):
        sc = S.render_scene(rng, 64, 0.1)
        assert not np.any(sc.lesion & ~sc.ring)
        assert sc.lesion.any()


def test_lesion_intensity_overlaps_background():
    # bright background patches reach the lesion intensity range
    rng = np.random.default_rng(1)
    hits = 0
    for _ in range(20):
        sc = S.render_scene(rng, 64, 0.0)
        bg = ~(sc.disk | sc.ring)
        lesion_lo = sc.image[sc.lesion].min() if sc.lesion.any() else 1
        hits += int((sc.image[bg] >= lesion_lo).any())
    assert hits > 5


def test_scribblize_properties():
    rng = np.random.default_rng(2)
    lab = np.zeros((40, 40), dtype=np.int64)
    lab[10:30, 10:30] = 1
    lab[0:2, 0:3] = 2  # 6 pixels: 30% bound gives 1 < 5, so skipped
    pol = ScribblePolicy(0.1)
    smap, skipped = S.scribblize(lab, 3, pol, rng)
    assert skipped == [2]
    for c in (0, 1):
        sel = smap.labels == c
        size = int((lab == c).sum())
        assert np.all(lab[sel] == c)
        assert pol.min_pixels_per_class <= sel.sum() <= 0.3 * size
    assert not np.any(smap.labels == 2)
    again, _ = S.scribblize(lab, 3, pol, np.random.default_rng(2))
    assert np.array_equal(again.labels, smap.labels)


def test_scribble_is_connected_thin_curve():
    from scipy import ndimage

    lab = np.zeros((30, 30), dtype=np.int64)
    lab[5:25, 5:25] = 1
    smap, _ = S.scribblize(lab, 2, ScribblePolicy(0.05), np.random.default_rng(3))
    sel = smap.labels == 1
    # a restarted walk may leave a few pieces, but never a filled blob
    _, n = ndimage.label(sel, structure=np.ones((3, 3)))
    assert n <= 3
    assert not ndimage.binary_erosion(sel, np.ones((2, 2))).any() or sel.sum() < 10


def test_policy_validation():
    with pytest.raises(ValueError):
        ScribblePolicy(0.5)
    with pytest.raises(ValueError):
        ScribblePolicy(0.1, min_pixels_per_class=3)
    with pytest.raises(ValueError):
        SynthConfig(size=30)


def test_dataset_roundtrip_bit_exact(tmp_path, pair):
    for ds in pair:
        d = S.write_dataset(ds, tmp_path / ds.name)
        back = S.read_dataset(d)
        assert S.datasets_equal(ds, back)
        for a, b in zip(ds.items, back.items):
            assert a.image.tobytes() == b.image.tobytes()


def test_write_twice_is_byte_identical(tmp_path, pair):
    S.write_dataset(pair[1], tmp_path / "a")
    S.write_dataset(pair[1], tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_unlabeled_stored_as_255(tmp_path, pair):
    d = S.write_dataset(pair[0], tmp_path / "s")
    it = pair[0].items[0]
    raw = S.read_pgm(d / "scribbles" / f"{it.id}.pgm")
    assert set(np.unique(raw)) <= {0, 1, 2, 255}
    assert 255 in raw


def test_truncated_image_names_file(tmp_path, pair):
    d = S.write_dataset(pair[0], tmp_path / "s")
    victim = d / "images" / f"{pair[0].items[1].id}.pgm"
    victim.write_bytes(victim.read_bytes()[:-10])
    with pytest.raises(S.DatasetError, match=victim.name):
        S.read_dataset(d)


def test_missing_file_and_manifest(tmp_path, pair):
    d = S.write_dataset(pair[0], tmp_path / "s")
    (d / "labels" / f"{pair[0].items[0].id}.pgm").unlink()
    with pytest.raises(S.DatasetError, match="cannot read"):
        S.read_dataset(d)
    with pytest.raises(S.DatasetError, match="manifest"):
        S.read_dataset(tmp_path / "nowhere")


def test_num_classes_mismatch(tmp_path, pair):
    d = S.write_dataset(pair[0], tmp_path / "s")
    m = json.loads((d / "manifest.json").read_text())
    m["num_classes"] = 4
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(S.DatasetError, match="num_classes"):
        S.read_dataset(d)


def test_corrupt_manifest(tmp_path, pair):
    d = S.write_dataset(pair[0], tmp_path / "s")
    (d / "manifest.json").write_text("{not json")
    with pytest.raises(S.DatasetError, match="corrupt manifest"):
        S.read_dataset(d)


def test_bad_pgm_magic(tmp_path):
    f = tmp_path / "x.pgm"
    f.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(S.DatasetError, match="not a binary PGM"):
        S.read_pgm(f)


def test_without_labels(pair):
    bare = pair[0].without_labels()
    assert bare.labeled_ids == []
    assert all((it.scribble == 3).all() for it in bare.split("train"))
