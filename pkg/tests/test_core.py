import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aesthgaze import dims
from aesthgaze.arrayio import read_array, write_array
from aesthgaze.config import ScreenGeometry
from aesthgaze.errors import ArrayFormatError, ValidationError
from aesthgaze.records import DatasetManifest, RecordRef, load_manifest, write_manifest
from aesthgaze.splits import split_by_participant


# ---------------------------------------------------------------------------
# dimension registry


def test_active_dimension_counts():
    assert len(dims.active_dimensions()) == 15
    assert len(dims.objective_dimensions()) == 4
    assert len(dims.subjective_dimensions()) == 11


def test_objective_selection_is_exact():
    names = {d.name for d in dims.objective_dimensions()}
    assert names == {"light", "complexity", "organization", "naturalness"}


def test_excluded_dimensions_flagged_and_rejected():
    excluded = [d for d in dims.all_dimensions() if d.excluded]
    assert {d.name for d in excluded} == {"beauty", "personality", "modernity"}
    for d in excluded:
        with pytest.raises(ValidationError):
            dims.require_active(d.id)


# ---------------------------------------------------------------------------
# array container


def test_array_roundtrip_2x3(tmp_path):
    a = np.array([[1.5, -2.0, 3.25], [0.0, 7.0, -1.0]], dtype=np.float32)
    write_array(tmp_path / "a.arr", a)
    b = read_array(tmp_path / "a.arr")
    assert b.dtype == np.float32 and b.shape == (2, 3)
    assert np.array_equal(a, b)


def test_array_roundtrip_rank5_uint8(tmp_path):
    a = np.random.default_rng(0).integers(0, 256, size=(2, 3, 4, 5, 3)).astype(np.uint8)
    write_array(tmp_path / "f.arr", a)
    assert np.array_equal(read_array(tmp_path / "f.arr"), a)


def test_truncated_file_raises(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(4, 6)
    p = tmp_path / "t.arr"
    write_array(p, a)
    raw = p.read_bytes()
    p.write_bytes(raw[:-5])
    with pytest.raises(ArrayFormatError):
        read_array(p)


def test_bad_magic_raises(tmp_path):
    p = tmp_path / "bad.arr"
    p.write_bytes(b"NOPE" + b"\x00" * 30)
    with pytest.raises(ArrayFormatError):
        read_array(p)


def test_typed_read_mismatch(tmp_path):
    p = tmp_path / "a.arr"
    write_array(p, np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(TypeError):
        read_array(p, dtype=np.uint8)
    with pytest.raises(TypeError):
        read_array(p, shape=(3, 2))


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_array_roundtrip_random(tmp_path_factory, data):
    rank = data.draw(st.integers(1, 5))
    shape = tuple(data.draw(st.integers(1, 6)) for _ in range(rank))
    use_u8 = data.draw(st.booleans())
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    if use_u8:
        a = rng.integers(0, 256, size=shape).astype(np.uint8)
    else:
        a = rng.standard_normal(shape).astype(np.float32)
    p = tmp_path_factory.mktemp("arr") / "x.arr"
    write_array(p, a)
    b = read_array(p)
    assert b.dtype == a.dtype and np.array_equal(a, b)


# ---------------------------------------------------------------------------
# manifest


def _ratings(value=4):
    return {d.id: value for d in dims.active_dimensions()}


def _write_dataset(tmp_path, n_records=4, bad_rating=None, drop_file=False):
    (tmp_path / "videos").mkdir()
    (tmp_path / "gaze").mkdir()
    refs = []
    for i in range(n_records):
        pid, vid = f"P{i}", f"V{i}"
        write_array(tmp_path / "videos" / f"{vid}.arr",
                    np.zeros((2, 4, 4, 3), dtype=np.uint8))
        (tmp_path / "gaze" / f"{pid}_{vid}.csv").write_text(
            "t,x,y,pupil_mm,valid\n0.0,10,10,4.0,1\n")
        ratings = _ratings()
        if bad_rating is not None and i == 1:
            ratings[3] = bad_rating
        refs.append(RecordRef(pid, vid, f"videos/{vid}.arr",
                              f"gaze/{pid}_{vid}.csv", ratings))
    if drop_file:
        (tmp_path / "videos" / "V1.arr").unlink()
    manifest = DatasetManifest(records=refs, geometry=ScreenGeometry())
    write_manifest(tmp_path / "manifest.txt", manifest)
    return tmp_path / "manifest.txt"


def test_manifest_roundtrip(tmp_path):
    path = _write_dataset(tmp_path)
    m = load_manifest(path)
    assert len(m.records) == 4
    assert m.geometry.width_px == 1920
    assert m.records[0].ratings[0] == 4


def test_manifest_bad_rating_names_record_and_dimension(tmp_path):
    path = _write_dataset(tmp_path, bad_rating=9)
    with pytest.raises(ValidationError) as exc:
        load_manifest(path)
    msg = str(exc.value)
    assert "P1/V1" in msg and "naturalness" in msg and "9" in msg


def test_manifest_missing_file(tmp_path):
    path = _write_dataset(tmp_path, drop_file=True)
    with pytest.raises(ValidationError) as exc:
        load_manifest(path)
    assert "V1.arr" in str(exc.value)


def test_manifest_duplicate_record(tmp_path):
    path = _write_dataset(tmp_path)
    text = path.read_text()
    block = text[text.index("[record]"):]
    block = block[:block.index("[record]", 1)]
    path.write_text(text + "\n" + block)
    with pytest.raises(ValidationError) as exc:
        load_manifest(path)
    assert "duplicate" in str(exc.value)


def test_manifest_missing(tmp_path):
    with pytest.raises(ValidationError):
        load_manifest(tmp_path / "nope.txt")


# ---------------------------------------------------------------------------
# splits


def test_split_28_participants_is_20_4_4():
    s = split_by_participant([f"P{i:02d}" for i in range(28)], seed=7)
    counts = {k: len(s.participants(k)) for k in ("train", "val", "test")}
    assert counts == {"train": 20, "val": 4, "test": 4}


def test_split_minimum_three():
    s = split_by_participant(["a", "b", "c"], seed=0)
    assert all(len(s.participants(k)) == 1 for k in ("train", "val", "test"))


def test_split_deterministic():
    a = split_by_participant([f"P{i}" for i in range(11)], seed=3)
    b = split_by_participant([f"P{i}" for i in range(11)], seed=3)
    assert a.assignment == b.assignment


def test_split_too_few():
    with pytest.raises(ValidationError):
        split_by_participant(["a", "b"], seed=0)


def test_split_bad_ratios():
    with pytest.raises(ValidationError):
        split_by_participant(list("abcd"), ratios=(0.5, 0.2, 0.2), seed=0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 60), seed=st.integers(0, 1000))
def test_split_hygiene(n, seed):
    parts = [f"P{i}" for i in range(n)]
    s = split_by_participant(parts, seed=seed)
    groups = [set(s.participants(k)) for k in ("train", "val", "test")]
    assert groups[0] | groups[1] | groups[2] == set(parts)
    assert not (groups[0] & groups[1] or groups[0] & groups[2] or groups[1] & groups[2])
    assert all(groups)
