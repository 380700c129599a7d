import json

import numpy as np
import pytest
from PIL import Image

from igcam import fixtures, model_io
from igcam.attribution import SaliencyMap
from igcam.errors import InputFormatError, StructuralError, ValidationError
from igcam.postprocess import render

# the layer list documented for the shipped quadrant bundle
QUADRANT_LAYERS = [
    ("conv1", "conv2d"), ("relu1", "relu"), ("conv2", "conv2d"),
    ("relu2", "relu"), ("flatten", "flatten"), ("fc", "linear"),
]


def write_png(arr, path):
    Image.fromarray(arr).save(path, format="PNG")
    return path


@pytest.fixture
def saved_random(tmp_path, random_nets):
    model = random_nets[0].model
    model_io.save_bundle(model, tmp_path / "m.json", tmp_path / "m.bin")
    return model, tmp_path / "m.json", tmp_path / "m.bin"


class TestBundle:
    def test_round_trip_bit_exact(self, saved_random):
        model, mpath, bpath = saved_random
        loaded = model_io.load_bundle(mpath, bpath)
        assert [(l.name, l.kind, dict(l.params)) for l in loaded.layers] == \
               [(l.name, l.kind, dict(l.params)) for l in model.layers]
        for name, tensors in model.weights.items():
            for key, arr in tensors.items():
                assert loaded.weights[name][key].tobytes() == arr.tobytes()
        assert loaded.input_shape == model.input_shape and loaded.class_count == model.class_count

    def test_blob_is_little_endian_float64(self, saved_random):
        model, _, bpath = saved_random
        first = np.frombuffer(bpath.read_bytes()[:8], dtype="<f8")[0]
        assert first == model.weights["conv1"]["weight"].ravel()[0]

    def test_truncated_blob(self, saved_random):
        _, mpath, bpath = saved_random
        data = bpath.read_bytes()
        bpath.write_bytes(data[:-16])
        with pytest.raises(InputFormatError,
                           match=f"expected {len(data)} bytes, got {len(data) - 16} bytes"):
            model_io.load_bundle(mpath, bpath)

    def test_version_mismatch(self, saved_random):
        _, mpath, bpath = saved_random
        doc = json.loads(mpath.read_text())
        doc["format_version"] = 99
        mpath.write_text(json.dumps(doc))
        with pytest.raises(InputFormatError, match="format_version"):
            model_io.load_bundle(mpath, bpath)

    def test_overlapping_offsets(self, saved_random):
        _, mpath, bpath = saved_random
        doc = json.loads(mpath.read_text())
        doc["layers"][0]["bias"]["offset"] = 0
        mpath.write_text(json.dumps(doc))
        with pytest.raises(InputFormatError, match="overlaps"):
            model_io.load_bundle(mpath, bpath)

    def test_shape_inconsistency(self, saved_random):
        _, mpath, bpath = saved_random
        doc = json.loads(mpath.read_text())
        doc["layers"][0]["weight"]["shape"] = [3, 4, 3, 3]
        mpath.write_text(json.dumps(doc))
        with pytest.raises(InputFormatError):
            model_io.load_bundle(mpath, bpath)

    def test_non_finite_weight(self, saved_random):
        _, mpath, bpath = saved_random
        data = bytearray(bpath.read_bytes())
        data[:8] = np.array([np.nan], dtype="<f8").tobytes()
        bpath.write_bytes(bytes(data))
        with pytest.raises(ValidationError):
            model_io.load_bundle(mpath, bpath)

    def test_malformed_json(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        (tmp_path / "m.bin").write_bytes(b"")
        with pytest.raises(InputFormatError):
            model_io.load_bundle(tmp_path / "m.json", tmp_path / "m.bin")

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputFormatError):
            model_io.load_bundle(tmp_path / "absent.json", tmp_path / "absent.bin")

    def test_shipped_quadrant_bundle(self, data_dir):
        model = model_io.load_bundle(data_dir / "quadrant" / "model.json", data_dir / "quadrant" / "model.bin")
        assert [(l.name, l.kind) for l in model.layers] == QUADRANT_LAYERS
        assert model.input_shape == (1, 16, 16) and model.class_count == 2
        ref = fixtures.quadrant_model()
        for name, tensors in ref.weights.items():
            for key, arr in tensors.items():
                assert np.array_equal(model.weights[name][key], arr)


class TestImages:
    def test_black(self, tmp_path):
        img = model_io.load_image(write_png(np.zeros((2, 2), np.uint8), tmp_path / "b.png"))
        assert img.shape == (1, 2, 2) and not np.any(img)

    def test_white_rgb(self, tmp_path):
        img = model_io.load_image(write_png(np.full((3, 5, 3), 255, np.uint8), tmp_path / "w.png"))
        assert img.shape == (3, 3, 5) and np.all(img == 1.0)

    def test_gradient_resized_golden(self, tmp_path):
        row = np.array([0, 85, 170, 255], np.uint8)
        path = write_png(np.tile(row, (4, 1)), tmp_path / "g.png")
        img = model_io.load_image(path, (1, 2, 2))
        np.testing.assert_allclose(img[0], [[1 / 6, 5 / 6], [1 / 6, 5 / 6]], rtol=0, atol=1e-15)

    def test_grey_replicated(self, tmp_path, rng):
        arr = rng.integers(0, 256, size=(4, 4), dtype=np.uint8)
        img = model_io.load_image(write_png(arr, tmp_path / "g.png"), (3, 4, 4))
        assert img.shape == (3, 4, 4)
        assert np.array_equal(img[0], img[2]) and np.array_equal(img[1], arr / 255.0)

    def test_rgb_to_single_channel(self, tmp_path):
        arr = np.zeros((2, 2, 3), np.uint8)
        arr[..., 0] = 255
        img = model_io.load_image(write_png(arr, tmp_path / "r.png"), (1, 2, 2))
        np.testing.assert_allclose(img, 1 / 3)

    def test_sixteen_bit_rejected(self, tmp_path):
        path = tmp_path / "d.png"
        Image.fromarray(np.full((2, 2), 40000, np.uint16)).save(path, format="PNG")
        with pytest.raises(InputFormatError, match="bit depth"):
            model_io.load_image(path)

    def test_undecodable(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"\x89PNG garbage")
        with pytest.raises(InputFormatError):
            model_io.load_image(tmp_path / "x.png")

    def test_save_round_trip(self, tmp_path, quadrant):
        model_io.save_image(quadrant.images[0], tmp_path / "q.png")
        assert np.array_equal(model_io.load_image(tmp_path / "q.png"), quadrant.images[0])


class TestMasks:
    def test_all_255(self, tmp_path):
        gt = model_io.load_mask(write_png(np.full((3, 7), 255, np.uint8), tmp_path / "m.png"))
        assert gt.positive_count == 21

    def test_three_pixels(self, tmp_path):
        arr = np.zeros((5, 5), np.uint8)
        arr[0, 0], arr[2, 3], arr[4, 4] = 1, 128, 255
        assert model_io.load_mask(write_png(arr, tmp_path / "m.png")).positive_count == 3

    def test_shape_mismatch_names_both(self, tmp_path):
        path = write_png(np.zeros((3, 3), np.uint8), tmp_path / "m.png")
        with pytest.raises(StructuralError, match=r"\(3, 3\).*\(4, 4\)"):
            model_io.load_mask(path, (4, 4))

    def test_round_trip(self, tmp_path):
        mask = fixtures.quadrant_mask()
        model_io.save_mask(mask, tmp_path / "m.png")
        assert np.array_equal(model_io.load_mask(tmp_path / "m.png").mask, mask)


class TestSaliencyDump:
    @pytest.mark.parametrize("resolution,signed", [("feature", False), ("image", True)])
    def test_round_trip(self, tmp_path, rng, resolution, signed):
        values = rng.normal(size=(5, 7))
        smap = SaliencyMap(values, resolution, "integrated_gradients", signed=signed)
        model_io.save_saliency(smap, tmp_path / "s.sal")
        back = model_io.load_saliency(tmp_path / "s.sal")
        assert back.values.tobytes() == values.tobytes()
        assert (back.resolution, back.method, back.signed) == (resolution, "integrated_gradients", signed)

    def test_truncated(self, tmp_path):
        model_io.save_saliency(SaliencyMap(np.ones((2, 2)), "image", "grad_cam"), tmp_path / "s.sal")
        data = (tmp_path / "s.sal").read_bytes()
        (tmp_path / "s.sal").write_bytes(data[:-1])
        with pytest.raises(InputFormatError):
            model_io.load_saliency(tmp_path / "s.sal")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "s.sal").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(InputFormatError):
            model_io.load_saliency(tmp_path / "s.sal")


class TestHeatmap:
    def test_round_trip(self, tmp_path, rng):
        hm = render(rng.uniform(size=(6, 4)))
        model_io.save_heatmap(hm, tmp_path / "h.png")
        assert np.array_equal(model_io.load_heatmap(tmp_path / "h.png"), hm.rgba)


class TestDataset:
    def test_missing_files_listed(self, tmp_path):
        write_png(np.zeros((2, 2), np.uint8), tmp_path / "a.png")
        model_io.save_dataset([
            {"id": "0", "image": "a.png", "mask": "nomask0.png", "label": 0},
            {"id": "1", "image": "noimg.png", "mask": "nomask1.png", "label": 0},
        ], tmp_path / "d.json")
        with pytest.raises(InputFormatError) as info:
            model_io.load_dataset(tmp_path / "d.json")
        msg = str(info.value)
        assert all(name in msg for name in ("nomask0.png", "noimg.png", "nomask1.png"))

    def test_label_range(self, data_dir):
        with pytest.raises(ValidationError):
            model_io.load_dataset(data_dir / "quadrant" / "dataset.json", class_count=0)

    def test_shipped(self, data_dir):
        index = model_io.load_dataset(data_dir / "quadrant" / "dataset.json", 2)
        assert len(index.records) == 10 and all(r.label == 0 for r in index.records)

    def test_malformed(self, tmp_path):
        (tmp_path / "d.json").write_text('{"records": [{"id": 1}]}')
        with pytest.raises(InputFormatError):
            model_io.load_dataset(tmp_path / "d.json")
