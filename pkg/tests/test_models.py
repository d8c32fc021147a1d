import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pyraflow.models import (
    DescriptorError,
    MockClassifier,
    MockDetector,
    MockSegmenter,
    ModelDescriptor,
    create_mock_runner,
    format_descriptor,
    parse_descriptor,
)

CLASSIFIER_TEXT = """\
# grade classifier
name: grader
task: patch_classification
input_size: 128 128 3
num_classes: 4
class_names: benign; grade1; grade2; grade3
magnification: 10
patch_size: 256
batch_size: 8
"""


def descriptor(**overrides):
    base = dict(
        name="m", task="patch_classification", input_width=64,
        input_height=64, input_channels=3, num_classes=4,
        class_names=("a", "b", "c", "d"), target_magnification=10.0,
        patch_size=64,
    )
    base.update(overrides)
    return ModelDescriptor(**base)


# -- descriptor parsing -----------------------------------------------------


def test_parse_full_descriptor():
    d = parse_descriptor(CLASSIFIER_TEXT)
    assert d.name == "grader"
    assert d.task == "patch_classification"
    assert (d.input_width, d.input_height, d.input_channels) == (128, 128, 3)
    assert d.num_classes == 4
    assert d.class_names == ("benign", "grade1", "grade2", "grade3")
    assert d.target_magnification == 10.0
    assert d.patch_size == 256
    assert d.batch_size == 8
    assert d.warnings == ()


def test_batch_size_defaults_to_one():
    text = CLASSIFIER_TEXT.replace("batch_size: 8\n", "")
    assert parse_descriptor(text).batch_size == 1


def test_unknown_key_warns_with_line_number():
    text = CLASSIFIER_TEXT + "vendor_field: 12\n"
    d = parse_descriptor(text)
    assert len(d.warnings) == 1
    assert "line 10" in d.warnings[0] and "vendor_field" in d.warnings[0]


def test_duplicate_key_warns_and_last_wins():
    text = CLASSIFIER_TEXT + "patch_size: 512\n"
    d = parse_descriptor(text)
    assert d.patch_size == 512
    assert any("duplicate" in w for w in d.warnings)


def test_warnings_do_not_affect_equality():
    plain = parse_descriptor(CLASSIFIER_TEXT)
    noisy = parse_descriptor(CLASSIFIER_TEXT + "extra: x\n")
    assert plain == noisy


def test_missing_key_is_an_error():
    text = CLASSIFIER_TEXT.replace("magnification: 10\n", "")
    with pytest.raises(DescriptorError, match="magnification"):
        parse_descriptor(text)


def test_malformed_line_reports_line_number():
    text = "name: x\ntask patch_classification\n"
    with pytest.raises(DescriptorError, match="line 2"):
        parse_descriptor(text)


def test_bad_input_size_reports_line_number():
    text = CLASSIFIER_TEXT.replace("input_size: 128 128 3",
                                   "input_size: 128 128")
    with pytest.raises(DescriptorError, match="line 4"):
        parse_descriptor(text)


def test_non_integer_value_reports_line_number():
    text = CLASSIFIER_TEXT.replace("patch_size: 256", "patch_size: big")
    with pytest.raises(DescriptorError, match="line 8"):
        parse_descriptor(text)


def test_comments_and_blank_lines_ignored():
    text = "\n# header\n\n" + CLASSIFIER_TEXT
    assert parse_descriptor(text).name == "grader"


def test_round_trip_through_format():
    d = parse_descriptor(CLASSIFIER_TEXT)
    assert parse_descriptor(format_descriptor(d)) == d


@pytest.mark.parametrize("overrides", [
    dict(task="unknown_task"),
    dict(num_classes=0, class_names=()),
    dict(batch_size=0),
    dict(target_magnification=0.0),
    dict(class_names=("a", "b")),
    dict(patch_size=-1),
])
def test_descriptor_validation(overrides):
    with pytest.raises(DescriptorError):
        descriptor(**overrides)


# -- mock classifier --------------------------------------------------------


def test_classifier_class_boundaries():
    d = descriptor()
    runner = MockClassifier(d)
    batch = np.stack([
        np.full((64, 64, 3), v, dtype=np.float32)
        for v in (0.0, 0.24, 0.25, 0.5, 0.75, 1.0)
    ])
    out = runner.invoke(batch)
    assert out.shape == (6, 4)
    assert out.dtype == np.float32
    # floor(4m) clamped: 0, 0, 1, 2, 3, and 4 clamps to 3.
    assert out.argmax(axis=1).tolist() == [0, 0, 1, 2, 3, 3]
    assert (out.sum(axis=1) == 1.0).all()


def test_classifier_requires_four_classes():
    with pytest.raises(ValueError, match="4-class"):
        MockClassifier(descriptor(num_classes=2, class_names=("a", "b")))
    with pytest.raises(ValueError, match="patch_classification"):
        MockClassifier(descriptor(task="detection"))


def test_classifier_rejects_non_batch_input():
    runner = MockClassifier(descriptor())
    with pytest.raises(ValueError, match="batch"):
        runner.invoke(np.zeros((64, 64, 3), dtype=np.float32))


# -- mock segmenter ---------------------------------------------------------


def test_segmenter_thresholds_channel_mean():
    d = descriptor(task="patch_segmentation", num_classes=2,
                   class_names=("bg", "fg"))
    runner = MockSegmenter(d)
    patch = np.zeros((1, 2, 2, 3), dtype=np.float32)
    patch[0, 0, 0] = 0.49
    patch[0, 0, 1] = 0.5
    patch[0, 1, 0] = 1.0
    patch[0, 1, 1] = 0.2
    out = runner.invoke(patch)
    assert out.shape == (1, 2, 2)
    assert out.tolist() == [[[1, 0], [0, 1]]]


def test_segmenter_requires_segmentation_task():
    with pytest.raises(ValueError, match="segmentation"):
        MockSegmenter(descriptor(num_classes=2, class_names=("a", "b")))


# -- mock detector ----------------------------------------------------------


def _boxes_as_tuples(dets):
    return sorted((int(d.x), int(d.y), int(d.w), int(d.h)) for d in dets)


def test_detector_finds_dark_components():
    patch = np.ones((32, 32, 3), dtype=np.float32)
    patch[2:6, 3:9] = 0.0        # 4x6 solid block, area 24
    patch[20:22, 20:22] = 0.0    # 2x2 block, area 4
    patch[30, 30] = 0.0          # single pixel, dropped by min_area
    d = descriptor(task="detection", num_classes=1, class_names=("cell",))
    out = MockDetector(d).invoke(patch[np.newaxis])
    assert len(out) == 1
    assert _boxes_as_tuples(out[0]) == [(3, 2, 6, 4), (20, 20, 2, 2)]
    solid = next(b for b in out[0] if b.w == 6)
    assert solid.score == 1.0
    assert all(b.class_id == 0 for b in out[0])


def test_detector_uses_four_connectivity():
    # Two pixels touching only diagonally are separate components of area 1
    # each, so min_area 4 discards both; with min_area 1 they are two boxes.
    patch = np.ones((8, 8, 3), dtype=np.float32)
    patch[2, 2] = 0.0
    patch[3, 3] = 0.0
    d = descriptor(task="detection", num_classes=1, class_names=("cell",))
    assert MockDetector(d).invoke(patch[np.newaxis]) == [[]]
    out = MockDetector(d, min_area=1).invoke(patch[np.newaxis])
    assert len(out[0]) == 2


def test_detector_score_is_fill_fraction():
    patch = np.ones((16, 16, 3), dtype=np.float32)
    # L-shape: 3 wide, 3 tall, 5 pixels set in a 3x3 box.
    patch[4, 4:7] = 0.0
    patch[5, 4] = 0.0
    patch[6, 4] = 0.0
    d = descriptor(task="detection", num_classes=1, class_names=("cell",))
    out = MockDetector(d).invoke(patch[np.newaxis])
    assert len(out[0]) == 1
    assert out[0][0].score == pytest.approx(5 / 9)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=40)
def test_detector_matches_flood_fill_reference(seed):
    rng = np.random.default_rng(seed)
    dark = rng.random((24, 24)) < 0.3
    patch = np.ones((24, 24, 3), dtype=np.float32)
    patch[dark] = 0.0
    d = descriptor(task="detection", num_classes=1, class_names=("cell",))
    got = MockDetector(d).invoke(patch[np.newaxis])[0]
    expected = oracles.connected_components_reference(dark, min_area=4)
    assert _boxes_as_tuples(got) == sorted(
        (x, y, w, h) for x, y, w, h, _ in expected)
    by_box = {(x, y, w, h): area for x, y, w, h, area in expected}
    for det in got:
        area = by_box[(int(det.x), int(det.y), int(det.w), int(det.h))]
        assert det.score == pytest.approx(area / (det.w * det.h))


def test_create_mock_runner_dispatch():
    assert isinstance(create_mock_runner(descriptor()), MockClassifier)
    assert isinstance(
        create_mock_runner(descriptor(task="image_segmentation",
                                      num_classes=2, class_names=("a", "b"))),
        MockSegmenter)
    assert isinstance(
        create_mock_runner(descriptor(task="detection", num_classes=1,
                                      class_names=("cell",))),
        MockDetector)
