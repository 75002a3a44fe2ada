import numpy as np
import pytest

from geomnet import data
from geomnet.data import (DatasetSplit, ParseError, SkeletonSequence, archetype_trajectory,
                          default_class_spec, generate_synthetic, load_sbu, load_split, normalize,
                          read_sbu_file, save_split, sbu_folds, trajectory_distance)
from geomnet.topology import builtin_topology

SBU = builtin_topology("sbu")


def write_sbu(path, frames, with_index=False):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, f in enumerate(frames):
        vals = f.reshape(-1).tolist()
        if with_index:
            vals = [i + 1] + vals
        lines.append(",".join(repr(v) for v in vals))
    path.write_text("\n".join(lines) + "\n")


def test_sequence_validation():
    with pytest.raises(ValueError):
        SkeletonSequence(np.zeros((0, 30, 3)))
    with pytest.raises(ValueError):
        SkeletonSequence(np.zeros((2, 30, 2)))
    with pytest.raises(ValueError):
        SkeletonSequence(np.full((1, 2, 3), np.inf))


def test_read_sbu_frame(tmp_path, rng):
    frames = rng.normal(size=(3, 30, 3))
    write_sbu(tmp_path / "a.txt", frames)
    np.testing.assert_array_equal(read_sbu_file(tmp_path / "a.txt", SBU), frames)
    write_sbu(tmp_path / "b.txt", frames, with_index=True)
    np.testing.assert_array_equal(read_sbu_file(tmp_path / "b.txt", SBU), frames)


def test_read_sbu_malformed_line(tmp_path, rng):
    p = tmp_path / "bad.txt"
    write_sbu(p, rng.normal(size=(2, 30, 3)))
    p.write_text(p.read_text() + "1,2,3\n")
    with pytest.raises(ParseError, match=r"bad.txt:3"):
        read_sbu_file(p, SBU)
    p.write_text("1,x,3\n")
    with pytest.raises(ParseError, match=r":1"):
        read_sbu_file(p, SBU)


def test_load_sbu_layout_and_folds(tmp_path, rng):
    groups = [g for fold in data.SBU_FOLDS for g in fold]
    for i, g in enumerate(groups):
        write_sbu(tmp_path / g / f"0{1 + i % 8}" / "001" / "skeleton_pos.txt", rng.normal(size=(2, 30, 3)))
    split = load_sbu(tmp_path, SBU)
    assert len(split) == len(groups)
    assert set(split.labels) <= set(range(8))
    seen = set()
    for train, test in sbu_folds(split):
        tr, te = {s.group for s in train.sequences}, {s.group for s in test.sequences}
        assert not tr & te
        assert len(train) + len(test) == len(split)
        seen |= te
    assert seen == set(groups)


def test_load_sbu_empty_directory(tmp_path, caplog):
    with caplog.at_level("WARNING"):
        assert len(load_sbu(tmp_path)) == 0
    assert "no SBU" in caplog.text


def test_split_round_trip(tmp_path):
    split = generate_synthetic(default_class_spec(2), 6, seed=3)
    save_split(split, tmp_path / "s.jsonl")
    back = load_split(tmp_path / "s.jsonl")
    for a, b in zip(split.sequences, back.sequences):
        np.testing.assert_array_equal(a.coords, b.coords)
        assert (a.label, a.group) == (b.label, b.group)


def test_load_split_bad_record(tmp_path):
    (tmp_path / "s.jsonl").write_text('{"label": 0}\n')
    with pytest.raises(ParseError, match=":1"):
        load_split(tmp_path / "s.jsonl")


def test_check_labels():
    split = DatasetSplit([SkeletonSequence(np.zeros((1, 2, 3)), 5)])
    split.check_labels(6)
    with pytest.raises(ValueError):
        split.check_labels(5)


def test_normalize(rng):
    seq = SkeletonSequence(rng.normal(size=(4, 30, 3)), 1)
    out = normalize(seq, SBU)
    np.testing.assert_array_equal(out.coords[0, SBU.root], 0)
    np.testing.assert_array_equal(normalize(out, SBU).coords, out.coords)
    moved = SkeletonSequence(seq.coords + np.array([1.5, -2.0, 0.25]), 1)
    np.testing.assert_allclose(normalize(moved, SBU).coords, out.coords, atol=1e-12)


def test_synthetic_noiseless_and_deterministic():
    spec = default_class_spec(2)
    a = generate_synthetic(spec, 6, seed=1, sigma=0.0)
    for s in a.sequences:
        centred = normalize(s, SBU).coords
        expected = normalize(SkeletonSequence(archetype_trajectory(spec[s.label])), SBU).coords
        np.testing.assert_allclose(centred, expected, atol=1e-12)
    b = generate_synthetic(spec, 6, seed=1, sigma=0.0)
    for x, y in zip(a.sequences, b.sequences):
        np.testing.assert_array_equal(x.coords, y.coords)
    c = generate_synthetic(spec, 6, seed=1)
    d = generate_synthetic(spec, 6, seed=1)
    for x, y in zip(c.sequences, d.sequences):
        np.testing.assert_array_equal(x.coords, y.coords)


@pytest.mark.parametrize("n_classes", [2, 4, 8])
def test_archetypes_are_separated(n_classes):
    trajs = [archetype_trajectory(a) for a in default_class_spec(n_classes)]
    for i in range(n_classes):
        for j in range(i):
            # at least 10 sigma for every sigma <= 0.05
            assert trajectory_distance(trajs[i], trajs[j]) >= 0.5


def test_nearest_centroid_separates_classes():
    spec = default_class_spec(2)
    split = generate_synthetic(spec, 40, seed=5, sigma=0.01)
    seqs = [normalize(s, SBU) for s in split.sequences]
    centroids = [normalize(SkeletonSequence(archetype_trajectory(a)), SBU).coords for a in spec]
    pred = [int(np.argmin([trajectory_distance(s.coords, c) for c in centroids])) for s in seqs]
    assert np.array_equal(pred, split.labels)


def test_class_spec_limits():
    with pytest.raises(ValueError):
        default_class_spec(9)
