import numpy as np
import pytest

from psrfcn.detection import Box, iou
from psrfcn.errors import ConfigError, FormatError, ParseError, PlacementError
from psrfcn.ppm import decode_ppm, encode_ppm, to_pixels
from psrfcn.synth import (
    MAX_PAIR_IOU,
    DatasetSpec,
    generate_split,
    parse_annotations,
    read_dataset,
    read_manifest_spec,
    render_scene,
    scene_rng,
    shape_mask,
    write_dataset,
)

SMALL = DatasetSpec(n_train=6, n_val=3, n_test=3, seed=11)


def test_scenes_are_deterministic():
    a = generate_split(SMALL, "train")
    b = generate_split(SMALL, "train")
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and x.annotations == y.annotations


def test_scene_independent_of_split_size():
    bigger = DatasetSpec(n_train=20, n_val=3, n_test=3, seed=11)
    assert np.array_equal(generate_split(SMALL, "val")[2].image, generate_split(bigger, "val")[2].image)


def test_splits_and_seeds_differ():
    assert not np.array_equal(generate_split(SMALL, "train")[0].image, generate_split(SMALL, "val")[0].image)
    other = DatasetSpec(n_train=6, n_val=3, n_test=3, seed=12)
    assert not np.array_equal(generate_split(SMALL, "train")[0].image, generate_split(other, "train")[0].image)


def _fill_class(scene, cls_box_index):
    """Classify one object by how much of its box its own colour fills."""
    cls, box = scene.annotations[cls_box_index]
    x1, y1, x2, y2 = (int(v) for v in box)
    patch = scene.image[:, y1:y2, x1:x2]
    cy, cx = patch.shape[1] // 2, patch.shape[2] // 2
    ref = np.median(patch[:, cy - 1 : cy + 2, cx - 1 : cx + 2].reshape(3, -1), axis=1)
    fill = np.mean(np.linalg.norm(patch - ref[:, None, None], axis=0) < 0.25)
    return 2 if fill > 0.9 else (1 if fill > 0.65 else 3)


def test_thousand_scenes_are_valid_and_labels_match_shapes():
    spec = DatasetSpec(n_train=1000, n_val=1, n_test=1, seed=5)
    hits = total = 0
    for i in range(1000):
        scene = render_scene(spec, scene_rng(spec, "train", i))
        assert scene.image.shape == (3, 64, 64)
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
        assert spec.objects_min <= len(scene.annotations) <= spec.objects_max
        for n, (cls, box) in enumerate(scene.annotations):
            assert cls in (1, 2, 3)
            assert 0 <= box.x1 < box.x2 <= 64 and 0 <= box.y1 < box.y2 <= 64
            assert spec.size_min <= box.x2 - box.x1 <= spec.size_max
            for _, other in scene.annotations[:n]:
                assert iou(box, other) < MAX_PAIR_IOU
            hits += _fill_class(scene, n) == cls
            total += 1
    assert hits / total > 0.9


@pytest.mark.parametrize("cls", [1, 2, 3])
@pytest.mark.parametrize("size", [8, 13, 21])
def test_shape_tight_box_within_one_pixel(cls, size):
    box = Box(10.0, 7.0, 10.0 + size, 7.0 + size)
    ys, xs = np.nonzero(shape_mask(cls, box, 64, 64))
    tight = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
    assert np.max(np.abs(np.subtract(tight, tuple(box)))) <= 1


def test_ppm_header_and_size():
    scene = generate_split(SMALL, "test")[0]
    buf = encode_ppm(to_pixels(scene.image))
    assert buf.startswith(b"P6\n64 64\n255\n")
    assert len(buf) == len(b"P6\n64 64\n255\n") + 12288


def test_ppm_round_trip_and_comments():
    px = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    assert np.array_equal(decode_ppm(encode_ppm(px)), px)
    assert np.array_equal(decode_ppm(b"P6 # made by hand\n7 5\n255\n" + px.tobytes()), px)


@pytest.mark.parametrize(
    "buf",
    [b"P5\n1 1\n255\n\x00", b"P6\n2 2\n255\n\x00\x00", b"P6\n1 1\n65535\n\x00\x00\x00", b"P6\nx 1\n255\n"],
)
def test_ppm_rejects_bad_input(buf):
    with pytest.raises(FormatError):
        decode_ppm(buf)


def test_dataset_round_trip(tmp_path):
    write_dataset(SMALL, tmp_path)
    assert read_manifest_spec(tmp_path) == SMALL
    loaded = read_dataset(tmp_path)
    for split in ("train", "val", "test"):
        fresh = generate_split(SMALL, split)
        assert [s.image_id for s in loaded[split]] == [s.image_id for s in fresh]
        for a, b in zip(loaded[split], fresh):
            assert a.annotations == b.annotations
            # images are stored as 8-bit, so they come back within half a level
            assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-12


def test_annotation_parse_error_has_line_number():
    text = "a 1 0 0 5 5\n\nb 2 0 0 5\n"
    with pytest.raises(ParseError, match="ann.txt:3"):
        parse_annotations(text, "ann.txt")
    with pytest.raises(ParseError, match=":1:"):
        parse_annotations("a 1 5 5 0 0\n", "ann.txt")


def test_missing_manifest_is_io_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "nowhere")


@pytest.mark.parametrize("field", ["n_train", "n_val", "n_test"])
def test_empty_split_is_config_error(field):
    with pytest.raises(ConfigError):
        DatasetSpec(**{field: 0})


def test_invalid_specs():
    with pytest.raises(ConfigError):
        DatasetSpec(height=16)
    with pytest.raises(ConfigError):
        DatasetSpec(objects_min=3, objects_max=2)
    with pytest.raises(ConfigError):
        DatasetSpec(size_min=10, size_max=100)


def test_overfull_scene_raises_placement_error():
    spec = DatasetSpec(height=32, width=32, size_min=30, size_max=32, objects_min=4, objects_max=4)
    with pytest.raises(PlacementError):
        render_scene(spec, scene_rng(spec, "train", 0))
