import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rpcm.data import (
    PARTIAL_RATIO,
    OccluderSpec,
    SequenceSpec,
    default_suite,
    generate_sequence,
    load_dataset,
    load_sequence,
    read_pgm,
    read_ppm,
    save_dataset,
    save_sequence,
    write_pgm,
)
from rpcm.errors import BadSpec, FormatError

# object and background mean colours must stay at least this far apart (RGB L2)
MIN_MEAN_COLOR_GAP = 30.0


def _same(a, b):
    return (
        len(a.frames) == len(b.frames)
        and all(np.array_equal(x, y) and x.dtype == y.dtype for x, y in zip(a.frames, b.frames))
        and all(np.array_equal(x, y) and x.dtype == y.dtype for x, y in zip(a.masks, b.masks))
        and a.spec == b.spec
    )


def test_determinism_and_contract():
    spec = SequenceSpec(seed=11, num_objects=3, occluder=OccluderSpec())
    a, b = generate_sequence(spec), generate_sequence(spec)
    assert _same(a, b)
    assert len(a.frames) == len(a.masks) == 20
    assert a.frames[0].shape == (3, 64, 64) and a.frames[0].dtype == np.uint8
    assert a.masks[0].max() <= 3
    assert set(range(1, 4)) <= set(np.unique(a.masks[0]).tolist())
    assert not _same(a, generate_sequence(SequenceSpec(seed=12, num_objects=3, occluder=OccluderSpec())))


def test_zero_motion_is_static():
    spec = SequenceSpec(seed=3, num_objects=1, max_speed=0.0, max_rotation=0.0, max_scale_drift=0.0, appearance_drift=0.0)
    seq = generate_sequence(spec)
    assert all(np.array_equal(f, seq.frames[0]) for f in seq.frames)
    assert all(np.array_equal(m, seq.masks[0]) for m in seq.masks)


@pytest.mark.parametrize("seed", range(8))
def test_partial_entry_ratio(seed):
    seq = generate_sequence(SequenceSpec(seed=seed, partial_entry=True, num_objects=1 + seed % 3))
    areas = [int((m == 1).sum()) for m in seq.masks]
    assert 0 < areas[0] / max(areas) < PARTIAL_RATIO


@pytest.mark.parametrize("bad", [
    dict(frames=1), dict(height=62), dict(width=12), dict(num_objects=0), dict(num_objects=4), dict(max_speed=-1.0),
])
def test_bad_specs(bad):
    with pytest.raises(BadSpec):
        generate_sequence(SequenceSpec(**bad))


def test_default_suite_mix():
    train, ev = default_suite()
    specs = train + ev
    assert len(train) == 200 and len(ev) == 40
    assert [s.seed for s in specs] == list(range(240))
    assert sum(s.partial_entry for s in specs) == 60 and sum(s.occluder is not None for s in specs) == 60
    assert {s.num_objects for s in specs} == {1, 2, 3}


def test_object_colors_stand_out():
    for seed in range(60):
        spec = SequenceSpec(seed=seed, num_objects=1 + seed % 3, partial_entry=seed % 4 == 1,
                            occluder=OccluderSpec() if seed % 4 == 2 else None)
        seq = generate_sequence(spec)
        for frame, mask in zip(seq.frames, seq.masks):
            bg = frame[:, mask == 0].astype(float).mean(axis=1)
            for o in range(1, spec.num_objects + 1):
                if (mask == o).any():
                    gap = np.linalg.norm(frame[:, mask == o].astype(float).mean(axis=1) - bg)
                    assert gap > MIN_MEAN_COLOR_GAP


@settings(max_examples=100)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(2, 4),
    st.sampled_from([16, 32, 48]),
    st.integers(1, 3),
    st.booleans(),
    st.booleans(),
)
def test_round_trip(tmp_path_factory, seed, frames, size, n, partial, occ):
    spec = SequenceSpec(seed=seed, frames=frames, height=size, width=size + 16, num_objects=n,
                        partial_entry=partial, occluder=OccluderSpec(width=4) if occ else None)
    try:
        seq = generate_sequence(spec)
    except BadSpec:
        return
    d = tmp_path_factory.mktemp("seq")
    save_sequence(seq, d)
    assert _same(seq, load_sequence(d))


def test_dataset_round_trip_and_errors(tmp_path):
    seqs = [generate_sequence(SequenceSpec(seed=s, frames=3)) for s in range(3)]
    dirs = save_dataset(seqs, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert [d.name for d in dirs] == ["seq_0000", "seq_0001", "seq_0002"]
    assert all(_same(a, b) for a, b in zip(seqs, back))

    bad = dirs[0] / "masks" / "00001.pgm"
    m = read_pgm(bad)
    m[0, 0] = 7
    write_pgm(bad, m)
    with pytest.raises(FormatError):
        load_sequence(dirs[0])

    (dirs[1] / "meta.json").unlink()
    with pytest.raises(FormatError):
        load_sequence(dirs[1])

    frame = dirs[2] / "frames" / "00000.ppm"
    frame.write_bytes(b"P3" + frame.read_bytes()[2:])
    with pytest.raises(FormatError):
        read_ppm(frame)
    frame.write_bytes(b"P6\n64 64\n255\n" + b"\0" * 10)
    with pytest.raises(FormatError):
        load_sequence(dirs[2])

    meta = dirs[2] / "meta.json"
    doc = json.loads(meta.read_text())
    doc["spec"]["colour"] = 1
    meta.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_sequence(dirs[2])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "missing")


def test_pnm_header_comments(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P5\n# note\n3 2\n# another\n255\n" + bytes(range(6)))
    assert np.array_equal(read_pgm(p), np.arange(6, dtype=np.uint8).reshape(2, 3))
