import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdelab.errors import DomainError, ShapeError, ValidationError
from sdelab.grid import (
    CMVector,
    LowerPath,
    RngStream,
    SheetBatch,
    TimeGrid,
    UpperSheet,
    cm_inner,
    dump_path,
    dump_sheet,
    dump_slices,
    embedding,
    increments_from_nodal,
    load_path,
    load_sheet,
    load_slices,
    nodal_values,
    paley_wiener,
    sample_lower_paths,
    sample_sheet,
    sample_sheets,
    shift,
)


@pytest.mark.parametrize("bad", [{"m": 0, "n": 1}, {"m": 4, "n": -1}, {"m": 4, "n": 4, "d": 0}, {"m": 2.5, "n": 1}])
def test_time_grid_rejects_bad_sizes(bad):
    with pytest.raises(ValidationError):
        TimeGrid(**bad)


def test_time_grid_meshes():
    g = TimeGrid(8, 4, 2)
    assert g.dt == 1 / 8 and g.ds == 1 / 4
    assert g.lower_times[0] == 0.0 and g.lower_times[-1] == 1.0
    assert g.left_times.shape == (8,)
    assert g.path_shape == (8, 2) and g.sheet_shape == (4, 8, 2)


def test_rng_stream_reproducible_and_independent():
    a = RngStream(3).child(1, 2).normal(5)
    b = RngStream(3).child(1, 2).normal(5)
    c = RngStream(3).child(1, 3).normal(5)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=20))
def test_nodal_roundtrip_is_bit_exact(vals):
    nodal = nodal_values(np.array(vals)[:, None])
    back = nodal_values(increments_from_nodal(nodal))
    assert np.array_equal(back, nodal)


def test_lower_path_from_nodal_requires_zero_start():
    g = TimeGrid(3, 1)
    with pytest.raises(ValidationError):
        LowerPath.from_nodal(g, np.ones((4, 1)))


def test_cameron_martin_basics():
    g = TimeGrid(16, 1)
    h = CMVector.constant(g, 2.0)
    assert np.isclose(h.norm2(), 4.0)
    assert np.isclose(embedding(h).nodal()[-1, 0], 2.0)
    k = CMVector(g, np.linspace(-1, 1, 16)[:, None])
    assert np.isclose(cm_inner(h, k), np.sum(2.0 * k.density) * g.dt)
    assert np.isclose((h + k - k).norm(), h.norm())


def test_paley_wiener_variance(rng):
    g = TimeGrid(8, 1)
    h = CMVector(g, np.arange(8.0)[:, None])
    W = sample_lower_paths(g, 1.0, 40000, rng)
    vals = np.einsum("skj,kj->s", W, h.density)
    assert np.isclose(vals.var(), h.norm2(), rtol=0.03)
    w = LowerPath(g, W[0])
    assert np.isclose(paley_wiener(h, w), vals[0])


def test_shift_adds_embedding():
    g = TimeGrid(4, 1)
    w = LowerPath.zero(g)
    h = CMVector.constant(g, 1.0)
    assert np.allclose(shift(w, h).nodal()[:, 0], g.lower_times)


def test_mixed_grids_rejected():
    h = CMVector.constant(TimeGrid(4, 1), 1.0)
    k = CMVector.constant(TimeGrid(8, 1), 1.0)
    with pytest.raises(ShapeError):
        cm_inner(h, k)


def test_negative_variance_rejected(rng):
    with pytest.raises(DomainError):
        sample_lower_paths(TimeGrid(4, 1), -1.0, 2, rng)


def test_sheet_increment_variance(rng):
    g = TimeGrid(4, 8)
    batch = sample_sheets(g, 4000, rng)
    assert np.isclose(batch.increments.var(), g.dt * g.ds, rtol=0.03)
    # terminal slice has lower increments of variance dt
    assert np.isclose(batch.terminal().var(), g.dt, rtol=0.05)


def test_sheet_slices_and_terminal(rng):
    g = TimeGrid(4, 3)
    sh = sample_sheet(g, rng)
    sl = sh.slices()
    assert sl.shape == (4, 4, 1) and np.all(sl[0] == 0)
    assert np.allclose(sl[-1], sh.terminal().increments)
    assert np.allclose(UpperSheet.from_slices(g, sl).increments, sh.increments, rtol=0, atol=1e-15)
    assert len(SheetBatch.of([sh, sh])) == 2


def test_serialization_roundtrips(rng):
    g = TimeGrid(5, 3, 2)
    sh = sample_sheet(g, rng)
    assert load_sheet(dump_sheet(sh)) == sh
    w = sh.terminal()
    assert load_path(dump_path(w), g) == w
    sl = sh.slices()[1:3]
    assert np.array_equal(load_slices(dump_slices(g, sl)), sl)


def test_serialization_layout():
    g = TimeGrid(2, 1, 1)
    data = dump_path(LowerPath(g, np.array([[1.0], [2.0]])))
    assert data[:16] == np.array([2, 0, 1, 1], dtype="<u4").tobytes()
    assert np.frombuffer(data[16:], "<f8").tolist() == [1.0, 2.0]


def test_corrupt_payload_rejected():
    with pytest.raises(ValidationError):
        load_sheet(b"\x00\x01")
    bad = np.array([2, 2, 1, 9], dtype="<u4").tobytes()
    with pytest.raises(ValidationError):
        load_sheet(bad)
