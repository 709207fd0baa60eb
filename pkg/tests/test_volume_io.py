import json

import numpy as np
import pytest

from covidct.errors import CorruptionError, FormatError, UnsupportedFormatError, ValidationError
from covidct.volume_io import (
    CtVolume,
    DatasetManifest,
    ManifestEntry,
    NamedTensorArchive,
    load_weights,
    read_array,
    read_manifest,
    read_volume,
    save_weights,
    write_array,
    write_manifest,
    write_volume,
)


def random_volume(rng, shape=(8, 16, 16), case_id="case"):
    vox = rng.integers(-1024, 3072, size=shape, dtype=np.int16)
    spacing = tuple(rng.uniform(0.3, 5.0, size=3))
    return CtVolume(vox, spacing, case_id)


def test_read_volume_declared_shape(tmp_path):
    vox = np.zeros((60, 512, 512), dtype="<i2")
    vox[1, 2, 3] = 1234
    (tmp_path / "a.raw").write_bytes(vox.tobytes())
    meta = {"case_id": "a", "shape": [60, 512, 512], "spacing_mm": [2.5, 0.7, 0.7], "dtype": "int16", "voxel_file": "a.raw"}
    (tmp_path / "a.json").write_text(json.dumps(meta))
    v = read_volume(tmp_path / "a.json")
    assert v.shape == (60, 512, 512)
    assert v.spacing_mm == (2.5, 0.7, 0.7)
    assert v.voxels[1, 2, 3] == 1234


def test_single_voxel(tmp_path):
    v = CtVolume(np.full((1, 1, 1), -1000, dtype=np.int16), (1.0, 1.0, 1.0), "one")
    write_volume(v, tmp_path / "one.json")
    raw = (tmp_path / "one.raw").read_bytes()
    assert raw == np.int16(-1000).astype("<i2").tobytes()
    assert read_volume(tmp_path / "one.json").voxels[0, 0, 0] == -1000


def test_round_trip_random_volumes(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        v = random_volume(rng, case_id=f"c{i}")
        p = write_volume(v, tmp_path / f"c{i}.json")
        back = read_volume(p)
        assert back.voxels.tobytes() == v.voxels.tobytes()
        assert back.spacing_mm == v.spacing_mm and back.case_id == v.case_id


def test_overwrite_is_byte_identical(tmp_path):
    v = random_volume(np.random.default_rng(1))
    p = write_volume(v, tmp_path / "v.json")
    first = (p.read_bytes(), (tmp_path / "v.raw").read_bytes())
    write_volume(v, p)
    assert (p.read_bytes(), (tmp_path / "v.raw").read_bytes()) == first


def test_extreme_hu_round_trip(tmp_path):
    vox = np.array([[[-1024, 3071]]], dtype=np.int16)
    v = CtVolume(vox, (1, 1, 1), "x")
    assert np.array_equal(read_volume(write_volume(v, tmp_path / "x.json")).voxels, vox)


@pytest.mark.parametrize("bad", [-1025, 3072])
def test_out_of_range_hu_rejected(bad):
    with pytest.raises(ValidationError):
        CtVolume(np.array([[[bad]]], dtype=np.int16), (1, 1, 1), "x")


def test_missing_sidecar_field(tmp_path):
    v = random_volume(np.random.default_rng(2))
    p = write_volume(v, tmp_path / "v.json")
    meta = json.loads(p.read_text())
    del meta["spacing_mm"]
    p.write_text(json.dumps(meta))
    with pytest.raises(FormatError):
        read_volume(p)


def test_truncated_voxels(tmp_path):
    v = random_volume(np.random.default_rng(3))
    p = write_volume(v, tmp_path / "v.json")
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-2])
    with pytest.raises(CorruptionError):
        read_volume(p)


@pytest.mark.parametrize("spacing", [[0, 1, 1], [1, -2, 1], [1, 1, float("inf")]])
def test_bad_spacing(tmp_path, spacing):
    v = random_volume(np.random.default_rng(4))
    p = write_volume(v, tmp_path / "v.json")
    meta = json.loads(p.read_text())
    meta["spacing_mm"] = spacing
    p.write_text(json.dumps(meta).replace("Infinity", "1e999"))
    with pytest.raises(ValidationError):
        read_volume(p)


def test_float_stack_stage(tmp_path):
    arr = np.random.default_rng(5).random((3, 4, 4)).astype(np.float32)
    p = write_array(tmp_path / "s.json", arr, case_id="s", spacing_mm=(1, 1, 1), stage="normalized")
    back, meta = read_array(p)
    assert meta["stage"] == "normalized" and meta["dtype"] == "float32"
    assert back.tobytes() == arr.tobytes()


def test_manifest_round_trip(tmp_path):
    m = DatasetManifest([
        ManifestEntry("a", tmp_path / "volumes" / "a.json", "Control", "train"),
        ManifestEntry("b", tmp_path / "volumes" / "b.json", "Covid", "test"),
    ])
    p = write_manifest(m, tmp_path / "manifest.json")
    rows = json.loads(p.read_text())
    assert set(rows[0]) == {"case_id", "path", "label", "split"}
    assert rows[0]["path"] == "volumes/a.json"
    back = read_manifest(p)
    assert [(e.case_id, e.label, e.split) for e in back] == [("a", "Control", "train"), ("b", "Covid", "test")]
    assert back.get("a").path == tmp_path / "volumes" / "a.json"


def test_manifest_rejects_unknown_label(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps([{"case_id": "a", "path": "a.json", "label": "Flu", "split": "train"}]))
    with pytest.raises(ValidationError):
        read_manifest(p)


def test_manifest_rejects_duplicates():
    with pytest.raises(ValidationError):
        DatasetManifest([ManifestEntry("a", "x", "CAP"), ManifestEntry("a", "y", "CAP")])


def random_archive(rng, n=3):
    tensors = {f"layer{i}.weight": rng.standard_normal(tuple(rng.integers(1, 5, size=rng.integers(1, 4))))
               for i in range(n)}
    return NamedTensorArchive(tensors, {"seed": "7", "epoch": "3"})


@pytest.mark.parametrize("suffix", ["", ".zip"])
def test_archive_round_trip(tmp_path, suffix):
    rng = np.random.default_rng(6)
    a = random_archive(rng)
    b = load_weights(save_weights(a, tmp_path / f"w{suffix}"))
    assert list(b.tensors) == list(a.tensors)
    assert b.equals(a)


def test_archive_empty_metadata(tmp_path):
    a = NamedTensorArchive({"x": np.ones(2)}, {})
    assert load_weights(save_weights(a, tmp_path / "w")).metadata == {}


def test_archive_zero_tensor_bytes(tmp_path):
    save_weights(NamedTensorArchive({"z": np.zeros(1)}), tmp_path / "w")
    manifest = json.loads((tmp_path / "w" / "manifest.json").read_text())
    assert (tmp_path / "w" / manifest["tensors"][0]["file"]).read_bytes() == b"\x00\x00\x00\x00"


def test_archive_rejects_other_dtype(tmp_path):
    save_weights(NamedTensorArchive({"z": np.zeros(1)}), tmp_path / "w")
    mpath = tmp_path / "w" / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["tensors"][0]["dtype"] = "float16"
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(UnsupportedFormatError):
        load_weights(tmp_path / "w")


def test_archive_truncated(tmp_path):
    save_weights(NamedTensorArchive({"z": np.zeros((2, 3))}), tmp_path / "w")
    f = tmp_path / "w" / "tensor_0000.bin"
    f.write_bytes(f.read_bytes()[:-1])
    with pytest.raises(CorruptionError):
        load_weights(tmp_path / "w")
