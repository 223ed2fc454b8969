import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from locgen.geometry import BBox
from locgen.scene_synth import (DEFAULT_CLASSES, NEG, POS, AnnotationConfig, Annotation, AnnotationSet, ClassId,
                                DatasetConfig, Scene, SceneConfig, SceneError, anchor_count, build_dataset,
                                build_preference_dataset, check_scene, class_ids, dataset_stats, generate_scene,
                                plausibility, read_dataset, rle_decode, rle_encode, sample_annotations,
                                write_dataset)

CFG = SceneConfig()


def rule_check(scene, cid, b):
    """Independent evaluation of the four rules, pixel by pixel."""
    spec = DEFAULT_CLASSES[cid]
    S = scene.image_size
    x1, y1, x2, y2 = (int(v) for v in b.as_list())
    if x2 <= x1 or y2 <= y1 or y2 >= S:
        return False
    supported = all(scene.grid[len(DEFAULT_CLASSES), y2, x] for x in range(x1, x2))
    clear = not scene.grid[: len(DEFAULT_CLASSES), y1:y2, x1:x2].any()
    w, h = x2 - x1, y2 - y1
    area = w * h / S ** 2
    return (supported and clear and spec.area_frac[0] <= area <= spec.area_frac[1]
            and spec.aspect[0] <= w / h <= spec.aspect[1])


def test_scene_is_deterministic():
    a, b = generate_scene(CFG, 11), generate_scene(CFG, 11)
    assert np.array_equal(a.grid, b.grid)
    assert not np.array_equal(a.grid, generate_scene(CFG, 12).grid)


def test_invariants_hold_over_many_scenes():
    for seed in range(1000):
        check_scene(generate_scene(CFG, seed))


def test_empty_scene_free_is_support_complement():
    s = generate_scene(SceneConfig(n_objects=(0, 0)), 3)
    assert not s.grid[:4].any()
    assert np.array_equal(s.free, 1 - s.support)


def test_check_scene_catches_violations():
    s = generate_scene(CFG, 0)
    g = s.grid.copy()
    g[CFG.free_channel] ^= 1
    with pytest.raises(SceneError):
        check_scene(Scene(g, 64, "x", 0))
    g = s.grid.copy()
    g[0, :, :] = g[CFG.support_channel]  # object on top of a shelf row
    g[CFG.free_channel] = ~(g[:4].any(0) | g[CFG.support_channel].astype(bool))
    with pytest.raises(SceneError):
        check_scene(Scene(g, 64, "x", 0))


def _flat_scene():
    """Floor at row 60 and one 3x6 object of class 0 at x 10..13."""
    g = np.zeros((6, 64, 64), np.uint8)
    g[4, 60, :] = 1
    g[0, 54:60, 10:13] = 1
    g[5] = ~(g[:4].any(0) | g[4].astype(bool))
    return Scene(g, 64, "flat", 0)


def test_plausibility_rules():
    s = _flat_scene()
    box = ClassId(1, "box")  # area 1.5%-6%, aspect 0.75-1.33
    good = BBox(20, 50, 30, 60, 64)  # 10x10 = 2.4%, on the floor
    assert plausibility(s, box, good) and rule_check(s, 1, good)
    assert not plausibility(s, box, BBox(20, 45, 30, 55, 64))  # R1: floating
    assert not plausibility(s, box, BBox(5, 50, 15, 60, 64))  # R2: overlaps the object
    assert not plausibility(s, box, BBox(20, 58, 30, 60, 64))  # R4: aspect 5
    assert not plausibility(s, box, BBox(20, 30, 50, 60, 64))  # R3: too big
    assert not plausibility(s, box, BBox(20, 54, 30, 64, 64))  # bottom at the image edge


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 50), st.integers(0, 3), st.integers(0, 63), st.integers(0, 63),
       st.integers(1, 30), st.integers(1, 30))
def test_plausibility_matches_rule_oracle(seed, cid, x, y, w, h):
    s = generate_scene(CFG, seed)
    b = BBox(x, y, min(x + w, 64), min(y + h, 64), 64)
    assert plausibility(s, cid, b) == rule_check(s, cid, b)


def test_annotations_are_labelled_by_the_oracle():
    for seed in range(40):
        s = generate_scene(CFG, seed, f"s{seed}")
        for c in class_ids(CFG):
            a = sample_annotations(s, c, AnnotationConfig(), 0)
            assert len(a.positives) <= 20 and len(a.negatives) <= 40
            for ann in a.annotations:
                assert plausibility(s, c, ann.bbox) == (ann.label == POS)
                assert rule_check(s, c.id, ann.bbox) == (ann.label == POS)
            assert len(a.annotations) / anchor_count(64) < 0.01
            assert a.flagged == (not a.positives)


def test_annotations_deterministic():
    s = generate_scene(CFG, 5, "s")
    a = sample_annotations(s, 2, AnnotationConfig(), 9)
    assert a == sample_annotations(s, 2, AnnotationConfig(), 9)
    assert a != sample_annotations(s, 2, AnnotationConfig(), 10)


def test_anchor_count():
    assert anchor_count(64) == 9 ** 4


@pytest.fixture(scope="module")
def small():
    return build_dataset(DatasetConfig(n_train=60, n_test=15), 4)


def test_build_dataset(small):
    train, test = small
    assert len(train.scenes) == 60 and len(test.scenes) == 15
    assert not {s.scene_id for s in train.scenes} & {s.scene_id for s in test.scenes}
    assert all(a.positives for a in train.samples + test.samples)
    st_ = dataset_stats(train)
    assert 30 <= st_["mean_annotations"] <= 50
    assert st_["max_sparsity_ratio"] < 0.01
    again, _ = build_dataset(DatasetConfig(n_train=60, n_test=15), 4)
    assert [a.annotations for a in again.samples] == [a.annotations for a in train.samples]


def _set(n_pos, n_neg):
    anns = [Annotation(BBox(i, 0, i + 1, 1, 64), POS) for i in range(n_pos)]
    anns += [Annotation(BBox(i, 10, i + 1, 11, 64), NEG) for i in range(n_neg)]
    return AnnotationSet("s", ClassId(0, "bottle"), anns)


def test_preference_pairs():
    from locgen.scene_synth import Dataset

    d = Dataset([], [_set(3, 5)], "train")
    pairs = build_preference_dataset(d, 0)
    assert len(pairs) == 3
    pos, neg = set(d.samples[0].positives), set(d.samples[0].negatives)
    assert all(p.preferred in pos and p.rejected in neg for p in pairs)


def test_preference_pairing_is_uniform():
    from locgen.scene_synth import Dataset

    d = Dataset([], [_set(1, 5)], "train")
    negs = d.samples[0].negatives
    counts = np.zeros(5)
    for seed in range(10_000):
        counts[negs.index(build_preference_dataset(d, seed)[0].rejected)] += 1
    assert np.all(np.abs(counts / 10_000 - 0.2) <= 0.02)


def test_rle_round_trip():
    rs = np.random.default_rng(0)
    g = (rs.random((3, 16, 16)) < 0.3).astype(np.uint8)
    assert np.array_equal(rle_decode(rle_encode(g), 16), g)
    s = generate_scene(CFG, 1)
    assert np.array_equal(rle_decode(rle_encode(s.grid), 64), s.grid)


def test_dataset_io_round_trip(small, tmp_path):
    _, test = small
    write_dataset(test, tmp_path / "t")
    back = read_dataset(tmp_path / "t", "test")
    assert [s.scene_id for s in back.scenes] == [s.scene_id for s in test.scenes]
    for a, b in zip(back.scenes, test.scenes):
        assert np.array_equal(a.grid, b.grid)
    assert [x.annotations for x in back.samples] == [x.annotations for x in test.samples]
    first = (tmp_path / "t" / "annotations.jsonl").read_bytes()
    write_dataset(back, tmp_path / "t")
    assert (tmp_path / "t" / "annotations.jsonl").read_bytes() == first
