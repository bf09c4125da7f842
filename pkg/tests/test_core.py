import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noctis.core import (CITYSCAPES, DESK, ClassCatalog, ClassDef, ConsistencyError, DatasetEntry, DatasetIndex,
                         FormatError, ImageBuffer, LabelMap, SegmentMeta, ValidationError, decode_panoptic,
                         encode_panoptic, id_to_rgb, load_catalog, load_manifest, manifest_digest, read_image,
                         read_panoptic, rgb_to_id, save_manifest, validate, write_image, write_panoptic)

from oracles import TINY, random_map

ROAD, CAR = DESK.class_id("road"), DESK.class_id("car")
VOID = DESK.void_id


def test_builtin_catalogs():
    assert len(CITYSCAPES) == 19
    assert CITYSCAPES.names[:3] == ["road", "sidewalk", "building"]
    assert [CITYSCAPES[c].name for c in CITYSCAPES.thing_ids] == [
        "person", "rider", "car", "truck", "bus", "train", "motorcycle", "bicycle"]
    assert sorted(DESK[c].name for c in DESK.thing_ids) == ["car", "person", "pole", "traffic light"]
    assert sorted(DESK[c].name for c in DESK.stuff_ids) == ["building", "road", "sidewalk", "sky", "vegetation"]


@pytest.mark.parametrize("classes,void", [
    ((ClassDef(1, "a", True), ClassDef(0, "b", False)), 255),  # not dense
    ((ClassDef(0, "a", True), ClassDef(1, "b", False)), 1),  # void collides
    ((ClassDef(0, "a", True), ClassDef(1, "b", True)), 255),  # no stuff
    ((ClassDef(0, "a", False), ClassDef(1, "b", False)), 255),  # no thing
])
def test_catalog_invariants(classes, void):
    with pytest.raises(ValidationError):
        ClassCatalog(classes, void)


def test_catalog_round_trip(tmp_path):
    p = tmp_path / "cat.json"
    p.write_text(json.dumps(TINY.to_dict()))
    again = load_catalog(p)
    assert again == TINY and again.digest() == TINY.digest()
    assert load_catalog("cityscapes") is CITYSCAPES
    assert TINY.eval_ids == [0, 1, 2, 3]


def test_id_formula():
    assert id_to_rgb(np.array(300)).tolist() == [44, 1, 0]
    ids = np.array([0, 1, 255, 256, 65535, 65536, (1 << 24) - 1])
    assert np.array_equal(rgb_to_id(id_to_rgb(ids)), ids)


def test_encode_all_void():
    rgb, metas = encode_panoptic(LabelMap.void(4, 5, DESK), DESK)
    assert rgb.shape == (4, 5, 3) and not rgb.any() and metas == []
    assert decode_panoptic(np.zeros((4, 5, 3), np.uint8), [], DESK) == LabelMap.void(4, 5, DESK)


def test_decode_hand_example():
    ids = np.array([[5, 5], [7, 0]])
    metas = [SegmentMeta(5, ROAD, 2, (0, 0, 2, 1)), SegmentMeta(7, CAR, 1, (0, 1, 1, 1))]
    lm = decode_panoptic(id_to_rgb(ids), metas, DESK)
    assert lm.sem.tolist() == [[ROAD, ROAD], [CAR, VOID]]
    assert lm.inst.tolist() == [[0, 0], [1, 0]]


def test_decode_errors():
    ids = np.array([[5, 5, 5], [0, 0, 0]])
    with pytest.raises(ConsistencyError):
        decode_panoptic(id_to_rgb(ids), [SegmentMeta(5, ROAD, 10, (0, 0, 3, 1))], DESK)
    with pytest.raises(FormatError):
        decode_panoptic(id_to_rgb(ids), [], DESK)


def test_encode_segment_meta():
    sem = np.array([[ROAD, CAR, CAR], [ROAD, VOID, CAR]])
    inst = np.array([[0, 4, 4], [0, 0, 4]])
    rgb, metas = encode_panoptic(LabelMap(sem, inst), DESK, scores={(CAR, 4): 0.7})
    assert [(m.id, m.class_id, m.area, m.bbox) for m in metas] == [(1, ROAD, 2, (0, 0, 1, 2)),
                                                                    (2, CAR, 3, (1, 0, 2, 2))]
    assert metas[1].score == 0.7 and metas[0].score is None
    assert rgb_to_id(rgb).tolist() == [[1, 2, 2], [1, 0, 2]]


def test_encode_rejects_invalid_map():
    sem = np.array([[DESK.class_id("sky"), ROAD]])
    with pytest.raises(ValidationError, match=r"y=0, x=0"):
        encode_panoptic(LabelMap(sem, np.array([[3, 0]])), DESK)


def test_codec_round_trip_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        lm = random_map(rng, (int(rng.integers(1, 20)), int(rng.integers(1, 20))))
        rgb, metas = encode_panoptic(lm, TINY)
        back = decode_panoptic(rgb, metas, TINY)
        assert back == lm.canonical()
        # decode then encode reproduces the id image exactly
        rgb2, metas2 = encode_panoptic(back, TINY)
        assert np.array_equal(rgb2, rgb) and metas2 == metas


def test_ids_follow_first_occurrence():
    sem = np.array([[CAR, ROAD], [CAR, CAR]])
    inst = np.array([[9, 0], [2, 9]])
    rgb, metas = encode_panoptic(LabelMap(sem, inst), DESK)
    assert rgb_to_id(rgb).tolist() == [[1, 2], [3, 1]]
    assert decode_panoptic(rgb, metas, DESK).inst.tolist() == [[1, 0], [2, 1]]


def test_panoptic_files(tmp_path):
    rng = np.random.default_rng(1)
    lm = random_map(rng, (12, 9), catalog=TINY)
    write_panoptic(tmp_path / "a.png", lm, TINY)
    assert (tmp_path / "a.json").exists()
    assert read_panoptic(tmp_path / "a.png", TINY) == lm.canonical()


def test_validate_violations():
    sky = DESK.class_id("sky")
    assert validate(LabelMap(np.array([[ROAD, CAR]]), np.array([[0, 1]])), DESK).ok
    rep = validate(LabelMap(np.array([[ROAD, sky]]), np.array([[0, 3]])), DESK)
    assert [v.kind for v in rep.violations] == ["instance on stuff"] and rep.violations[0].pixel == (0, 1)
    rep = validate(LabelMap(np.array([[99]]), np.array([[0]])), CITYSCAPES)
    assert [v.kind for v in rep.violations] == ["unknown class"]
    rep = validate(LabelMap(np.array([[VOID]]), np.array([[2]])), DESK)
    assert [v.kind for v in rep.violations] == ["instance on void"]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0, 1, 2, 3, 4, 7, 255]), st.integers(-1, 3)), min_size=1, max_size=30))
def test_validate_matches_definition(pixels):
    sem = np.array([[p[0] for p in pixels]])
    inst = np.array([[p[1] for p in pixels]])
    thing = {c.id for c in TINY.classes if c.is_thing}
    expected = all(
        (c in range(len(TINY)) or c == TINY.void_id) and i >= 0 and (i == 0 or c in thing)
        for c, i in pixels
    )
    assert validate(LabelMap(sem, inst), TINY).ok == expected


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ids_stable_under_pixel_permutation_of_values(seed):
    # Relabelling instance ids never changes the encoded id image.
    rng = np.random.default_rng(seed)
    lm = random_map(rng, (8, 8))
    perm = rng.permutation(50) + 1
    inst = np.where(lm.inst > 0, perm[lm.inst], 0)
    a, _ = encode_panoptic(lm, TINY)
    b, _ = encode_panoptic(LabelMap(lm.sem, inst), TINY)
    assert np.array_equal(a, b)


def test_image_buffer(tmp_path):
    with pytest.raises(ValidationError):
        ImageBuffer(np.full((2, 2, 3), 1.5))
    img = ImageBuffer(np.random.default_rng(0).random((5, 6, 3)))
    write_image(tmp_path / "i.png", img)
    back = read_image(tmp_path / "i.png")
    assert np.max(np.abs(back.pixels - img.pixels)) <= 0.5 / 255 + 1e-12


def test_manifest_round_trip(tmp_path):
    (tmp_path / "d" / "images").mkdir(parents=True)
    img = ImageBuffer(np.zeros((4, 4, 3)))
    write_image(tmp_path / "d" / "images" / "a.png", img)
    write_panoptic(tmp_path / "d" / "labels" / "a.png", LabelMap.void(4, 4, DESK), DESK)
    idx = DatasetIndex((DatasetEntry("images/a.png", "labels/a.png", "val", "day"),), 5, str(tmp_path / "d"))
    save_manifest(tmp_path / "out" / "m.json", idx)
    back = load_manifest(tmp_path / "out" / "m.json")
    assert back.seed == 5
    assert back.image_path(0).resolve() == (tmp_path / "d" / "images" / "a.png").resolve()
    assert manifest_digest(back) == manifest_digest(idx)
    with pytest.raises(ValidationError):
        DatasetIndex((DatasetEntry("a"), DatasetEntry("a")))
    with pytest.raises(ValidationError):
        DatasetIndex((DatasetEntry("a", split="dev"),))
    with pytest.raises(FormatError):
        load_manifest(tmp_path / "missing.json")
