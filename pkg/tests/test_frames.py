import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bcae.frames import (
    FULL_SHAPE,
    SECTION_SHAPE,
    FrameFormatError,
    OccupancyError,
    SyntheticConfig,
    assemble_frame,
    frame_from_bytes,
    frame_to_bytes,
    generate_synthetic_frame,
    nonzero_fraction,
    read_frame,
    section_frame,
    write_frame,
    zero_suppress,
)


@pytest.fixture(scope="module")
def random_full():
    rng = np.random.default_rng(11)
    return rng.integers(0, 1024, size=FULL_SHAPE, dtype=np.uint16)


def test_section_shapes(random_full):
    secs = section_frame(random_full)
    assert len(secs) == 24
    assert all(s.shape == SECTION_SHAPE for s in secs)


def test_section_zero_frame():
    secs = section_frame(np.zeros(FULL_SHAPE, dtype=np.uint16))
    assert all(not s.any() for s in secs)


def test_section_index_bookkeeping():
    # every voxel carries its own flat index; each section must hold exactly
    # the indices of its (azimuth block, half) tile
    idx = np.arange(np.prod(FULL_SHAPE), dtype=np.int64).reshape(FULL_SHAPE)
    secs = section_frame(idx)
    seen = np.zeros(idx.size, dtype=np.int32)
    for k, sec in enumerate(secs):
        i, j = k // 2, k % 2
        a0, h0 = 192 * i, 249 * j
        flat = sec.ravel()
        az, hz, rz = np.unravel_index(flat, FULL_SHAPE)
        assert az.min() == a0 and az.max() == a0 + 191
        assert hz.min() == h0 and hz.max() == h0 + 248
        assert rz.min() == 0 and rz.max() == 15
        seen[flat] += 1
    # disjoint and covering
    assert (seen == 1).all()


def test_assemble_inverts_section(random_full):
    assert np.array_equal(assemble_frame(section_frame(random_full)), random_full)


def test_assemble_zero():
    out = assemble_frame([np.zeros(SECTION_SHAPE, dtype=np.uint16)] * 24)
    assert out.shape == FULL_SHAPE and not out.any()


def test_assemble_order_matters(random_full):
    secs = section_frame(random_full)
    secs[0], secs[1] = secs[1], secs[0]
    assert not np.array_equal(assemble_frame(secs), random_full)


def test_section_rejects_bad_shape():
    with pytest.raises(ValueError, match="2304"):
        section_frame(np.zeros((10, 10, 10)))
    with pytest.raises(ValueError):
        assemble_frame([np.zeros(SECTION_SHAPE)] * 23)


@pytest.mark.parametrize("value, expected", [(63, 0), (64, 0), (65, 65), (1023, 1023), (0, 0)])
def test_zero_suppress_boundary(value, expected):
    frame = np.full((2, 2, 2), value, dtype=np.uint16)
    assert (zero_suppress(frame) == expected).all()


@given(arrays(np.uint16, (4, 5, 3), elements=st.integers(0, 1023)))
def test_zero_suppress_idempotent(frame):
    once = zero_suppress(frame)
    assert np.array_equal(zero_suppress(once), once)
    assert ((once == 0) | (once >= 65)).all()


@given(arrays(np.uint16, (3, 4, 5), elements=st.integers(0, 1023)))
def test_nonzero_fraction_exact(frame):
    frac = nonzero_fraction(frame)
    assert 0.0 <= frac <= 1.0
    assert frac == sum(1 for v in frame.ravel() if v > 0) / frame.size


def test_generator_deterministic():
    cfg = SyntheticConfig(seed=5, shape=(48, 64, 16), n_tracks=25)
    assert np.array_equal(generate_synthetic_frame(cfg), generate_synthetic_frame(cfg))


def test_generator_value_range():
    frame = generate_synthetic_frame(SyntheticConfig(seed=2))
    assert frame.shape == SECTION_SHAPE
    nz = frame[frame > 0]
    assert nz.min() >= 65 and nz.max() <= 1023
    assert frame.dtype == np.uint16


def test_generator_occupancy_over_100_frames():
    occ = [
        nonzero_fraction(generate_synthetic_frame(SyntheticConfig(seed=s, shape=(48, 64, 16), n_tracks=25)))
        for s in range(100)
    ]
    assert min(occ) >= 0.05 and max(occ) <= 0.15


def test_generator_full_section_occupancy():
    occ = nonzero_fraction(generate_synthetic_frame(SyntheticConfig(seed=9)))
    assert 0.05 <= occ <= 0.15


def test_generator_unreachable_occupancy():
    # one tiny track per attempt cannot fill half of the volume
    cfg = SyntheticConfig(seed=0, shape=(48, 64, 16), n_tracks=1, target_occupancy=0.5,
                          deposit_amplitude_range=(65.0, 66.0), max_attempts=2)
    with pytest.raises(OccupancyError) as info:
        generate_synthetic_frame(cfg)
    assert info.value.achieved < 0.25


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(target_occupancy=0.6)
    with pytest.raises(ValueError):
        SyntheticConfig(n_tracks=0)


@settings(max_examples=30)
@given(arrays(np.uint16, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
              elements=st.integers(0, 1023)))
def test_frame_bytes_roundtrip(frame):
    out = frame_from_bytes(frame_to_bytes(frame))
    assert out.dtype == np.uint16 and np.array_equal(out, frame)


def test_frame_file_roundtrip(tmp_path):
    frame = np.random.default_rng(0).integers(0, 1024, SECTION_SHAPE).astype(np.uint16)
    write_frame(frame, tmp_path / "f.tpcf")
    assert np.array_equal(read_frame(tmp_path / "f.tpcf"), frame)


def test_frame_header_layout():
    data = frame_to_bytes(np.zeros((2, 3, 4), dtype=np.uint16))
    assert data[:4] == b"TPCF"
    assert data[4:6] == (1).to_bytes(2, "little")
    assert data[6] == 0 and data[7] == 3
    assert [int.from_bytes(data[8 + 4 * i : 12 + 4 * i], "little") for i in range(3)] == [2, 3, 4]
    assert len(data) == 20 + 2 * 24


def test_truncated_file_is_parse_error():
    data = frame_to_bytes(np.ones((4, 4, 4), dtype=np.uint16))
    with pytest.raises(FrameFormatError) as info:
        frame_from_bytes(data[:-3])
    assert info.value.offset > 0
    with pytest.raises(FrameFormatError):
        frame_from_bytes(data[:5])


def test_bad_magic_and_zero_dims():
    data = bytearray(frame_to_bytes(np.ones((2, 2, 2), dtype=np.uint16)))
    bad = bytes(b"XXXX" + data[4:])
    with pytest.raises(FrameFormatError) as info:
        frame_from_bytes(bad)
    assert info.value.offset == 0
    zero = bytes(data[:8]) + (0).to_bytes(4, "little") * 3
    with pytest.raises(FrameFormatError, match="dims"):
        frame_from_bytes(zero)


def test_float_frame_roundtrip():
    frame = np.random.default_rng(1).normal(size=(3, 4, 5)).astype(np.float32)
    assert np.array_equal(frame_from_bytes(frame_to_bytes(frame)), frame)
