import pytest

from tcs_fedsim.exceptions import DatasetFormatError
from tcs_fedsim.metrics import METRICS_COLUMNS, MetricsLog, MetricsRecord

pytestmark = pytest.mark.unit


def record(round_: int, **overrides) -> MetricsRecord:
    fields = dict(
        round=round_,
        epoch=(round_ + 1) / 3,
        lr=0.1,
        train_loss=1.0 / (round_ + 3),
        test_accuracy=0.5,
        uplink_bits_total=1234,
        uplink_bits_per_param_per_iter=0.36397,
        downlink_support_size=8,
    )
    return MetricsRecord(**{**fields, **overrides})


def test_csv_row_uses_round_trip_floats():
    row = record(0).csv_row()
    assert len(row) == len(METRICS_COLUMNS)
    assert row[0] == "0"
    assert row[1] == repr(1 / 3)
    assert row[-1] == "0.0"


def test_record_validation():
    with pytest.raises(ValueError):
        record(0, test_accuracy=1.5)
    with pytest.raises(ValueError):
        record(-1)


def test_log_requires_consecutive_rounds():
    log = MetricsLog()
    log.append(record(0))
    log.append(record(1))
    with pytest.raises(ValueError):
        log.append(record(3))
    assert log.column("round") == [0, 1]
    assert log.last.round == 1


def test_csv_round_trip_is_exact(tmp_path):
    log = MetricsLog([record(i) for i in range(5)])
    path = tmp_path / "metrics.csv"
    log.write_csv(path)
    assert path.read_text().count("\n") == 6
    loaded = MetricsLog.read_csv(path)
    assert loaded.records == log.records


@pytest.mark.parametrize(
    "text",
    [
        "round,epoch\n0,1\n",
        ",".join(METRICS_COLUMNS) + "\n0,1\n",
        ",".join(METRICS_COLUMNS) + "\nx,1,0.1,1,0.5,1,0.1,1,0\n",
        ",".join(METRICS_COLUMNS) + "\n1,1,0.1,1,0.5,1,0.1,1,0\n0,1,0.1,1,0.5,1,0.1,1,0\n",
    ],
)
def test_malformed_metrics_csv(tmp_path, text):
    path = tmp_path / "metrics.csv"
    path.write_text(text)
    with pytest.raises(DatasetFormatError):
        MetricsLog.read_csv(path)
