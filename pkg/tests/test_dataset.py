import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bartmed.dataset import (SynthParams, TimeSeriesDataset, load_dataset, load_holidays,
                             synthesize_dataset, validate, write_dataset)
from bartmed.errors import (ArgumentError, DatasetValidationError, InputIOError, ParseError,
                            SchemaError)

HEADER = "date,y,x,m,humidity\n"


def _csv(tmp_path, body, header=HEADER, name="d.csv"):
    p = tmp_path / name
    p.write_text(header + body)
    return p


def test_load_three_rows(tmp_path):
    p = _csv(tmp_path, "2005-05-01,10,25.0,0.04,9\n2005-05-02,12,26.5,0.05,9.5\n2005-05-03,11,27,0.045,8.7\n")
    ds = load_dataset(p)
    assert len(ds) == 3
    assert [r.date for r in ds.rows] == [dt.date(2005, 5, d) for d in (1, 2, 3)]
    assert ds.y.tolist() == [10, 12, 11]
    assert not ds.holiday.any()


def test_load_sorts_dates(tmp_path):
    p = _csv(tmp_path, "2005-05-03,11,27,0.045,8.7\n2005-05-01,10,25.0,0.04,9\n2005-05-02,12,26.5,0.05,9.5\n")
    ds = load_dataset(p)
    assert np.all(np.diff(ds.date.astype(int)) == 1)
    assert ds.x.tolist() == [25.0, 26.5, 27.0]


def test_parse_error_names_row_and_column(tmp_path):
    p = _csv(tmp_path, "2005-05-01,10,25.0,0.04,9\n2005-05-02,abc,26.5,0.05,9.5\n")
    with pytest.raises(ParseError) as exc:
        load_dataset(p)
    assert exc.value.details == {"row": 2, "column": "y"}
    assert "row 2" in str(exc.value)


def test_missing_column(tmp_path):
    p = _csv(tmp_path, "2005-05-01,10,25.0,9\n", header="date,y,x,humidity\n")
    with pytest.raises(SchemaError, match="'m'"):
        load_dataset(p)


def test_duplicate_date(tmp_path):
    p = _csv(tmp_path, "2005-05-01,10,25.0,0.04,9\n2005-05-01,12,26.5,0.05,9.5\n")
    with pytest.raises(DatasetValidationError) as exc:
        load_dataset(p)
    assert exc.value.kind == "data.duplicate_date"


def test_missing_file(tmp_path):
    with pytest.raises(InputIOError) as exc:
        load_dataset(tmp_path / "nope.csv")
    assert exc.value.kind == "io.not_found"


def test_schema_map_and_holidays(tmp_path):
    p = _csv(tmp_path, "2005-07-03,10,25.0,0.04,9\n2005-07-04,12,26.5,0.05,9.5\n",
             header="day,count,tmax,o3,q\n")
    hol = tmp_path / "hol.txt"
    hol.write_text("# federal\n2005-07-04\n")
    ds = load_dataset(p, schema={"date": "day", "y": "count", "x": "tmax", "m": "o3", "humidity": "q"},
                      holidays=hol)
    assert ds.holiday.tolist() == [False, True]
    assert load_holidays(hol) == {np.datetime64("2005-07-04")}


def test_validate_clean(synth_ds):
    rep = validate(synth_ds)
    assert rep.ok and rep.errors == [] and rep.warnings == []


def test_validate_negative_count(synth_ds):
    y = synth_ds.y.copy()
    y[17] = -1
    rep = validate(synth_ds.replace(y=y))
    assert len(rep.errors) == 1 and rep.errors[0][:2] == (17, "y")
    with pytest.raises(DatasetValidationError):
        rep.raise_if_invalid()


def test_validate_small_sample_warning():
    ds = synthesize_dataset(50, 0)
    rep = validate(ds)
    assert rep.errors == [] and len(rep.warnings) == 1


def test_validate_missing_day(synth_ds):
    ds = synth_ds.take(np.r_[0:10, 11:30])
    rep = validate(ds)
    assert any("missing" in e[2] for e in rep.errors)


def test_synth_moments_and_determinism():
    a = synthesize_dataset(2208, 1)
    b = synthesize_dataset(2208, 1)
    assert 27.6 <= a.x.mean() <= 30.5
    assert abs(a.x.std(ddof=0) / 4.12 - 1) < 0.05
    assert abs(a.humidity.mean() / 9.33 - 1) < 0.05
    assert abs(a.m.mean() / 0.048 - 1) < 0.05
    assert a.fingerprint() == b.fingerprint()
    assert np.array_equal(a.y, b.y)
    assert len(np.unique(a.year)) == 12
    assert a.doy.min() >= 121 and a.doy.max() <= 305


def test_synth_rejects_nonpositive_T():
    with pytest.raises(ArgumentError):
        synthesize_dataset(0, 1)


def test_synth_params_used():
    ds = synthesize_dataset(400, 2, SynthParams(temp_mean=20.0))
    assert abs(ds.x.mean() - 20.0) < 1e-9


def test_round_trip(tmp_path, synth_ds):
    p = tmp_path / "rt.csv"
    write_dataset(synth_ds, p)
    back = load_dataset(p)
    assert back.fingerprint() == synth_ds.fingerprint()
    for f in ("y", "x", "m", "humidity", "holiday"):
        assert np.array_equal(getattr(back, f), getattr(synth_ds, f))


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=50))
def test_synth_always_valid(T):
    assert validate(synthesize_dataset(T * 37, T)).ok


def test_calendar_fields_match_datetime(rng):
    days = rng.integers(0, 60 * 365, size=1000)
    dates = np.sort(np.unique(np.datetime64("1970-01-01") + days))
    n = dates.size
    ds = TimeSeriesDataset(date=dates, y=np.zeros(n), x=np.zeros(n), m=np.zeros(n), humidity=np.zeros(n))
    for i in range(n):
        d = dates[i].astype(dt.date)
        assert ds.weekday[i] == d.weekday()
        assert ds.doy[i] == d.timetuple().tm_yday
        assert ds.year[i] == d.year
    assert ds.row(0).weekday == ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")[dates[0].astype(dt.date).weekday()]


def test_dataset_is_read_only(synth_ds):
    with pytest.raises(ValueError):
        synth_ds.y[0] = 3
