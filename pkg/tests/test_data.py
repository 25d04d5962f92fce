import json

import numpy as np
import pytest
from PIL import Image

from unicon.data import (
    load_manifest,
    load_mask,
    load_slice,
    save_manifest,
    save_prediction,
)
from unicon.errors import BadAgeIndex, IndexOutOfRange, MissingFile, ShapeMismatch

from conftest import make_volume_files


def test_load_manifest_two_volumes(small_manifest):
    m = load_manifest(small_manifest)
    assert len(m.volumes) == 2
    assert m.split == "train"
    rec = m.volumes[0]
    assert (rec.Z, rec.H, rec.W) == (4, 16, 20)
    assert rec.annotated_slices == [1, 2]


def test_manifest_round_trip(small_manifest, tmp_path):
    m = load_manifest(small_manifest)
    out = save_manifest(m, tmp_path / "copy.json")
    m2 = load_manifest(out)
    assert [v.volume_id for v in m2.volumes] == [v.volume_id for v in m.volumes]
    assert [v.slice_paths for v in m2.volumes] == [v.slice_paths for v in m.volumes]
    assert [v.annotated for v in m2.volumes] == [v.annotated for v in m.volumes]


def _rewrite(path, fn):
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))


def test_bad_age_index(small_manifest):
    _rewrite(small_manifest, lambda d: d["volumes"][0].update(age_index=4))
    with pytest.raises(BadAgeIndex):
        load_manifest(small_manifest)


def test_mask_shape_mismatch(small_manifest, tmp_path):
    Image.fromarray(np.zeros((5, 5), np.uint8)).save(tmp_path / "v0" / "mask_0001.png")
    with pytest.raises(ShapeMismatch):
        load_manifest(small_manifest)


def test_missing_slice(small_manifest, tmp_path):
    (tmp_path / "v1" / "img_0003.png").unlink()
    with pytest.raises(MissingFile):
        load_manifest(small_manifest)


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingFile):
        load_manifest(tmp_path / "nope.json")


def test_duplicate_volume_ids(tmp_path):
    v = make_volume_files(tmp_path, "v0")
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"name": "d", "split": "train", "volumes": [v, v]}))
    with pytest.raises(Exception, match="duplicate"):
        load_manifest(p)


def test_train_volume_without_annotation(tmp_path):
    v = make_volume_files(tmp_path, "v0", annotated=())
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"name": "d", "split": "train", "volumes": [v]}))
    with pytest.raises(Exception, match="annotated"):
        load_manifest(p)
    p.write_text(json.dumps({"name": "d", "split": "test", "volumes": [v]}))
    assert load_manifest(p).volumes[0].annotated_slices == []


def _one_slice_record(tmp_path, arr):
    Image.fromarray(arr).save(tmp_path / "s.png")
    v = {
        "volume_id": "x",
        "age_index": 0,
        "shape": [1, *arr.shape],
        "slice_paths": ["s.png"],
        "annotated_slices": [],
    }
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"name": "d", "split": "test", "volumes": [v]}))
    return load_manifest(p).volumes[0]


def test_load_slice_zero(tmp_path):
    rec = _one_slice_record(tmp_path, np.zeros((4, 6), np.uint16))
    assert np.array_equal(load_slice(rec, 0), np.zeros((4, 6)))


def test_load_slice_max(tmp_path):
    rec = _one_slice_record(tmp_path, np.full((4, 6), 65535, np.uint16))
    assert np.array_equal(load_slice(rec, 0), np.ones((4, 6)))


def test_load_slice_mid_value(tmp_path):
    rec = _one_slice_record(tmp_path, np.full((4, 6), 32768, np.uint16))
    assert load_slice(rec, 0)[0, 0] == pytest.approx(32768 / 65535, abs=1e-12)
    assert load_slice(rec, 0)[0, 0] == pytest.approx(0.50001, abs=1e-5)


def test_load_slice_tiff(tmp_path):
    arr = np.arange(24, dtype=np.uint16).reshape(4, 6) * 1000
    Image.fromarray(arr).save(tmp_path / "s.tif")
    rec = _one_slice_record(tmp_path, arr)
    rec.slice_paths[0] = tmp_path / "s.tif"
    np.testing.assert_allclose(load_slice(rec, 0), arr / 65535.0)


def test_load_slice_index_error(small_manifest):
    rec = load_manifest(small_manifest).volumes[0]
    with pytest.raises(IndexOutOfRange):
        load_slice(rec, rec.Z)
    with pytest.raises(IndexOutOfRange):
        load_slice(rec, -1)


def test_every_slice_loads(small_manifest):
    for rec in load_manifest(small_manifest).volumes:
        for z in range(rec.Z):
            img = load_slice(rec, z)
            assert img.shape == (rec.H, rec.W)
            assert 0 <= img.min() and img.max() <= 1


def test_prediction_round_trip(tmp_path, rng):
    mask = (rng.random((13, 17)) > 0.4).astype(np.uint8)
    path = save_prediction("vol", 3, mask, tmp_path)
    assert path.name == "pred_0003.png"
    assert np.array_equal(load_mask(path), mask)
    # load -> save -> load is the identity
    again = save_prediction("vol", 4, load_mask(path), tmp_path)
    assert np.array_equal(load_mask(again), mask)


def test_prediction_all_zero(tmp_path):
    path = save_prediction("vol", 0, np.zeros((8, 8), np.uint8), tmp_path)
    assert not load_mask(path).any()


def test_prediction_rejects_non_binary(tmp_path):
    with pytest.raises(ValueError):
        save_prediction("vol", 0, np.full((4, 4), 2), tmp_path)
