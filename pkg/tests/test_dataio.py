import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from detpipe.dataio import (
    BoundingBox,
    DatasetError,
    DuplicateCaseError,
    InstanceTableError,
    MissingFileError,
    PayloadSizeError,
    UnknownClassError,
    VolumeHeader,
    dumps_artifact,
    encode_volume,
    load_dataset,
    load_softmax,
    load_volume,
    read_json_artifact,
    write_case,
    write_dataset,
    write_dataset_json,
    write_json_artifact,
    write_softmax,
)


def make_two_case_dataset(root, objects_class=0, classes=("lesion",)):
    for i, cid in enumerate(("a", "b")):
        labels = np.zeros((8, 8, 8), dtype=np.uint16)
        labels[1:4, 2:5, 3:6] = 1
        image = np.full((8, 8, 8), float(i), dtype=np.float32)
        write_case(root, cid, image, (1.0, 1.0, 2.0), "f32", labels, {1: 0},
                   [BoundingBox((1, 2, 3), (4, 5, 6), objects_class)], [1])
    write_dataset_json(root, "toy", classes, [("a", "train"), ("b", "test")])


class TestLoadVolume:
    def test_f32_layout_example(self):
        vol = load_volume(VolumeHeader((2, 1, 1), (1, 1, 1), "f32"), struct.pack("<2f", 1.0, 2.0))
        assert vol.data[0, 0, 0] == 1.0
        assert vol.data[1, 0, 0] == 2.0

    def test_u8_z_axis_example(self):
        vol = load_volume(VolumeHeader((1, 1, 2), (1, 1, 1), "u8"), bytes([7, 9]))
        assert vol.data[0, 0, 1] == 9

    def test_truncated_payload(self):
        with pytest.raises(PayloadSizeError, match="truncated"):
            load_volume(VolumeHeader((1, 1, 2), (1, 1, 1), "u8"), bytes([7]))

    def test_oversized_payload(self):
        with pytest.raises(PayloadSizeError, match="mismatch"):
            load_volume(VolumeHeader((1, 1, 1), (1, 1, 1), "u8"), bytes([7, 9]))

    def test_unsupported_dtype(self):
        with pytest.raises(DatasetError):
            VolumeHeader((1, 1, 1), (1, 1, 1), "f64")

    @pytest.mark.parametrize("dims,spacing", [((0, 1, 1), (1, 1, 1)), ((1, 1, 1), (1, 0, 1)),
                                              ((1, 1), (1, 1, 1))])
    def test_header_invariants(self, dims, spacing):
        with pytest.raises(DatasetError):
            VolumeHeader(dims, spacing)

    @given(st.tuples(*[st.integers(1, 6)] * 3), st.sampled_from(["f32", "i16", "u8", "u16"]), st.data())
    def test_linearization(self, dims, dtype, data):
        n = dims[0] * dims[1] * dims[2]
        values = np.arange(n) % 200
        fmt = {"f32": "f", "i16": "h", "u8": "B", "u16": "H"}[dtype]
        payload = struct.pack(f"<{n}{fmt}", *values.tolist())
        vol = load_volume(VolumeHeader(dims, (1, 1, 1), dtype), payload)
        x = data.draw(st.integers(0, dims[0] - 1))
        y = data.draw(st.integers(0, dims[1] - 1))
        z = data.draw(st.integers(0, dims[2] - 1))
        assert vol.data[x, y, z] == values[x + dims[0] * (y + dims[1] * z)]

    @given(st.tuples(*[st.integers(1, 5)] * 3))
    def test_encode_roundtrip(self, dims):
        arr = np.random.default_rng(0).integers(0, 60000, dims).astype(np.uint16)
        vol = load_volume(VolumeHeader(dims, (1, 1, 1), "u16"), encode_volume(arr, "u16"))
        np.testing.assert_array_equal(vol.data, arr)


class TestBoundingBox:
    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox((0, 0, 0), (0, 1, 1))

    def test_extent_mm(self):
        box = BoundingBox((0, 0, 0), (10, 10, 10))
        assert box.extent_mm((0.5, 1, 2)) == (5.0, 10.0, 20.0)
        assert box.volume == 1000

    def test_integral_floats_become_ints(self):
        box = BoundingBox((1.0, 2.0, 3.0), (4.0, 5.5, 6.0), 1, 0.5)
        assert box.min == (1, 2, 3) and isinstance(box.min[0], int)
        assert box.max[1] == 5.5
        assert BoundingBox.from_dict(box.to_dict()) == box


class TestLoadDataset:
    def test_valid_two_cases(self, tmp_path):
        make_two_case_dataset(tmp_path)
        ds = load_dataset(tmp_path)
        assert [c.id for c in ds.cases] == ["a", "b"]
        assert ds.case("b").split == "test"
        assert ds.case("a").objects == (BoundingBox((1, 2, 3), (4, 5, 6), 0),)
        assert ds.case("b").load_image().data[0, 0, 0] == 1.0

    def test_payload_size_mismatch(self, tmp_path):
        make_two_case_dataset(tmp_path)
        header = {"dims": [128, 128, 128], "spacing_mm": [1, 1, 1], "dtype": "f32"}
        (tmp_path / "images" / "a.json").write_text(json.dumps(header))
        (tmp_path / "images" / "a.raw").write_bytes(bytes(100))
        with pytest.raises(PayloadSizeError):
            load_dataset(tmp_path)

    def test_unknown_class(self, tmp_path):
        make_two_case_dataset(tmp_path, objects_class=5, classes=("x", "y"))
        with pytest.raises(UnknownClassError):
            load_dataset(tmp_path)

    def test_missing_file(self, tmp_path):
        make_two_case_dataset(tmp_path)
        (tmp_path / "images" / "b.raw").unlink()
        with pytest.raises(MissingFileError):
            load_dataset(tmp_path)

    def test_missing_dataset_json(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_dataset(tmp_path)

    def test_duplicate_case(self, tmp_path):
        make_two_case_dataset(tmp_path)
        write_dataset_json(tmp_path, "toy", ["lesion"], [("a", "train"), ("a", "val")])
        with pytest.raises(DuplicateCaseError):
            load_dataset(tmp_path)

    def test_instance_missing_from_table(self, tmp_path):
        make_two_case_dataset(tmp_path)
        labels = np.zeros((8, 8, 8), dtype=np.uint16)
        labels[0, 0, 0] = 2
        labels[1:4, 2:5, 3:6] = 1
        write_case(tmp_path, "a", np.zeros((8, 8, 8), np.float32), (1, 1, 2), "f32", labels, {1: 0})
        with pytest.raises(InstanceTableError):
            load_dataset(tmp_path)

    def test_object_class_disagrees_with_table(self, tmp_path):
        make_two_case_dataset(tmp_path, classes=("x", "y"))
        labels = np.zeros((8, 8, 8), dtype=np.uint16)
        labels[1:4, 2:5, 3:6] = 1
        write_case(tmp_path, "a", np.zeros((8, 8, 8), np.float32), (1, 1, 2), "f32", labels, {1: 1},
                   [BoundingBox((1, 2, 3), (4, 5, 6), 0)], [1])
        with pytest.raises(InstanceTableError):
            load_dataset(tmp_path)

    def test_exclusion_unknown_case(self, tmp_path):
        make_two_case_dataset(tmp_path)
        write_dataset_json(tmp_path, "toy", ["lesion"], [("a", "train"), ("b", "test")], [("zzz", 1)])
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_write_load_roundtrip(self, tmp_path, small_dataset):
        write_dataset(small_dataset, tmp_path / "copy")
        again = load_dataset(tmp_path / "copy")
        assert again == small_dataset

    def test_load_is_pure(self, small_dataset):
        assert load_dataset(small_dataset.root) == load_dataset(small_dataset.root)


class TestSoftmaxIO:
    def test_roundtrip(self, tmp_path):
        soft = np.random.default_rng(0).random((3, 4, 5, 6)).astype(np.float32)
        write_softmax(tmp_path, "c", soft, (1, 1, 1))
        np.testing.assert_array_equal(load_softmax(tmp_path, "c"), soft)

    def test_size_mismatch(self, tmp_path):
        soft = np.ones((2, 2, 2, 2), dtype=np.float32)
        write_softmax(tmp_path, "c", soft, (1, 1, 1))
        (tmp_path / "softmax" / "c.raw").write_bytes(bytes(12))
        with pytest.raises(PayloadSizeError):
            load_softmax(tmp_path, "c")


class TestJsonArtifact:
    def test_identical_bytes(self, tmp_path):
        value = {"b": [1.0, 0.1, -0.0], "a": {"z": 1, "y": np.float64(1 / 3)}, "c": np.arange(3)}
        write_json_artifact(value, tmp_path / "one.json")
        write_json_artifact(value, tmp_path / "two.json")
        assert (tmp_path / "one.json").read_bytes() == (tmp_path / "two.json").read_bytes()
        text = (tmp_path / "one.json").read_text()
        assert text.index('"a"') < text.index('"b"')
        assert "-0.0" not in text

    def test_lossless_floats(self, tmp_path):
        value = {"x": 0.1 + 0.2, "y": 1e-300}
        write_json_artifact(value, tmp_path / "f.json")
        assert read_json_artifact(tmp_path / "f.json") == value

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            write_json_artifact({}, tmp_path / "no" / "such" / "dir" / "x.json")

    def test_nan_becomes_null(self):
        assert json.loads(dumps_artifact({"v": float("nan")})) == {"v": None}
