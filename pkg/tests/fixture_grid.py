"""A fixed four-row metric grid used to check delta arithmetic and table rendering."""

from noctis.harness import Cell, ExperimentResult
from noctis.metrics import MetricReport

COLUMNS = MetricReport.COLUMNS

ROWS = {
    ("baseline", "original"): (53.78, 78.91, 66.62, 41.55, 76.65, 53.94, 62.68, 80.55, 75.85,
                               73.24, 91.36, 81.67, 95.31, 20.13, 39.1),
    ("retrained", "original"): (53.15, 78.59, 66.05, 41.29, 76.49, 53.74, 61.78, 80.12, 75.0,
                                72.11, 91.21, 80.94, 95.22, 21.89, 41.29),
    ("baseline", "converted"): (34.65, 73.81, 44.74, 26.22, 72.8, 35.47, 40.78, 74.54, 51.47,
                                49.18, 78.8, 59.46, 87.4, 9.96, 21.71),
    ("retrained", "converted"): (45.28, 76.73, 57.01, 35.25, 75.7, 46.23, 52.59, 77.48, 64.87,
                                 63.61, 86.77, 73.74, 92.59, 16.06, 31.78),
}

# Stated differences on the converted set, retrained minus baseline.
EXPECTED_DELTAS = {"pq_all": 10.63, "rq_all": 12.24, "sq_all": 2.92, "miou": 14.43}


def fixture_result() -> ExperimentResult:
    cells = [Cell("approach1", m, d, 0, MetricReport.from_columns(dict(zip(COLUMNS, row))))
             for (m, d), row in ROWS.items()]
    result = ExperimentResult(cells)
    for name in ("original", "converted"):
        result.add_delta(f"retrained-vs-baseline/{name}", ("baseline", name), ("retrained", name))
    return result
