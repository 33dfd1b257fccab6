import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lossflow.triangle import (
    Triangle,
    TriangleError,
    group_by_line,
    load_triangles,
    loss_ratios,
    to_runoff,
    write_triangles,
)

from conftest import square

HEADER = "triangle_id,line,accident_year,dev_lag,cumulative_loss,earned_premium\n"


def write(tmp_path, body, name="t.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body, encoding="utf-8")
    return p


def test_single_cell_file(tmp_path):
    (t,) = load_triangles(write(tmp_path, "T1,PP,1988,1,100,200\n"))
    assert t.n_accident_years == 1 and t.n_dev_lags >= 1
    assert t.cell(1, 1) == 100.0
    assert t.premiums[0] == 200.0
    assert t.accident_years == (1988,)


def test_full_square_file_flagged(tmp_path):
    rows = [f"M1,WC,{1988 + i},{j + 1},{100 + 10 * i + j},{500 + i}\n" for i in range(10) for j in range(10)]
    (t,) = load_triangles(write(tmp_path, "".join(rows)))
    assert t.is_full_square and not t.is_runoff
    assert t.n_cells == 100


@pytest.mark.parametrize("bad", ["0", "-5", "nan", "abc"])
def test_nonpositive_loss_rejected_with_coordinates(tmp_path, bad):
    body = "T1,PP,1988,1,100,200\nT1,PP,1988,2," + bad + ",200\n"
    with pytest.raises(TriangleError, match="accident_year 1988, dev_lag 2"):
        load_triangles(write(tmp_path, body))


def test_missing_column_and_duplicates(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("triangle_id,line,accident_year,dev_lag,cumulative_loss\nT,PP,1,1,1\n", encoding="utf-8")
    with pytest.raises(TriangleError, match="earned_premium"):
        load_triangles(p)
    with pytest.raises(TriangleError, match="duplicate"):
        load_triangles(write(tmp_path, "T,PP,1,1,5,9\nT,PP,1,1,6,9\n"))
    with pytest.raises(TriangleError, match="inconsistent premium"):
        load_triangles(write(tmp_path, "T,PP,1,1,5,9\nT,PP,1,2,6,8\n"))


def test_holes_rejected():
    losses = np.array([[1.0, np.nan, 3.0], [1.0, 2.0, np.nan], [1.0, np.nan, np.nan]])
    with pytest.raises(TriangleError, match="contiguous"):
        Triangle("H", "PP", losses, np.ones(3))


def test_nonpositive_premium_rejected():
    with pytest.raises(TriangleError, match="premium"):
        Triangle("P", "PP", np.ones((2, 2)), np.array([1.0, 0.0]))


def test_runoff_ten_by_ten():
    t = to_runoff(square(10))
    assert t.is_runoff
    assert t.row_lengths.tolist() == [11 - i for i in range(1, 11)]
    assert t.n_cells == 55


def test_runoff_two_by_two():
    t = to_runoff(square(2), as_of=2)
    assert sorted(t.cells) == [(1, 1), (1, 2), (2, 1)]


def test_runoff_as_of_one_keeps_first_column():
    t = to_runoff(square(5), as_of=1)
    assert t.n_dev_lags == 1
    assert t.observed.all()
    with pytest.raises(TriangleError):
        to_runoff(square(3), as_of=0)


@given(st.integers(2, 8), st.integers(1, 8))
def test_runoff_idempotent(n, a):
    t = square(n)
    a = min(a, n)
    once = to_runoff(t, a)
    twice = to_runoff(once, a)
    np.testing.assert_array_equal(once.losses, twice.losses)
    assert once.dev_lags == twice.dev_lags


def test_loss_ratio_examples():
    t = Triangle("R", "PP", np.array([[150.0, 200.0], [100.0, np.nan]]), np.array([100.0, 100.0]))
    r = loss_ratios(t).values
    assert r[0, 0] == 1.5 and r[1, 0] == 1.0
    assert np.array_equal(np.isnan(r), np.isnan(t.losses))


@given(st.floats(0.01, 100.0))
def test_loss_ratio_premium_scaling(c):
    t = square(3)
    scaled = t.replace(premiums=t.premiums * c)
    np.testing.assert_allclose(loss_ratios(scaled).values, loss_ratios(t).values / c, rtol=1e-15)


@given(
    st.lists(
        st.floats(1e-3, 1e9, allow_nan=False, allow_infinity=False),
        min_size=6,
        max_size=6,
    )
)
def test_csv_round_trip_is_exact(tmp_path_factory, values):
    losses = np.array(values).reshape(3, 2)
    losses[2, 1] = np.nan
    t = Triangle("X", "CA", losses, np.array([1.5, 2.25, 1e7]), accident_years=(2001, 2002, 2003))
    p = tmp_path_factory.mktemp("rt") / "x.csv"
    write_triangles(p, [t])
    (back,) = load_triangles(p)
    np.testing.assert_array_equal(back.losses, t.losses)
    np.testing.assert_array_equal(back.premiums, t.premiums)
    assert back.accident_years == t.accident_years and back.line == "CA"


def test_triangles_are_immutable():
    t = square(3)
    with pytest.raises(ValueError):
        t.losses[0, 0] = 1.0


def test_group_by_line_keeps_order():
    ts = [square(3, tid="a", line="WC"), square(3, tid="b", line="PP"), square(3, tid="c", line="WC")]
    groups = group_by_line(ts)
    assert list(groups) == ["WC", "PP"]
    assert [t.id for t in groups["WC"]] == ["a", "c"]


def test_cell_indexing_is_one_based():
    t = square(3)
    assert t.cell(1, 1) == t.losses[0, 0]
    with pytest.raises(IndexError):
        t.cell(0, 1)
    np.testing.assert_array_equal(to_runoff(t).latest(), [t.losses[0, 2], t.losses[1, 1], t.losses[2, 0]])
