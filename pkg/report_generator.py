import json
from pathlib import Path
from typing import Dict, Sequence

from werkzeug.utils import secure_filename

from soh_errors import IoFailure

MAX_NAME_LENGTH = 50


class ReportGenerator:
    def __init__(self, reports_dir="reports"):
        self.reports_dir = reports_dir

    def generate_accuracy_table(self, results, title="SOH estimation error (%)"):
        """Aligned text table: one row per metric, one column per method"""
        methods = list(results)
        rows = [
            ("MAE", [results[m].mae for m in methods]),
            ("MAX", [results[m].max_err for m in methods]),
            ("RMSE", [results[m].rmse for m in methods]),
        ]
        return self._format_table(title, ["Method", *methods],
                                  [(label, [f"{v:.4f}" for v in values]) for label, values in rows])

    def generate_timing_table(self, reports, title="Computation time by model"):
        """Train time, per-sample test time and kept terms, one column per method"""
        names = [r.method_name for r in reports]
        rows = [
            ("Train Time (s)", [f"{r.train_time_s:.4f}" for r in reports]),
            ("Test Time (ms/sample)", [f"{r.test_time_per_sample_ms:.4f}" for r in reports]),
            ("Terms kept", [f"{r.nnz}/{r.library_size}" for r in reports]),
        ]
        return self._format_table(title, ["Model", *names], rows)

    def _format_table(self, title, header: Sequence[str], rows):
        widths = [max(len(header[0]), *(len(label) for label, _ in rows))]
        for column in range(1, len(header)):
            cells = [values[column - 1] for _, values in rows]
            widths.append(max(len(header[column]), *(len(c) for c in cells)))

        def line(cells):
            first = cells[0].ljust(widths[0])
            rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
            return "  ".join([first, *rest])

        rule = "=" * len(line(list(header)))
        text = [title, rule, line(list(header)), "-" * len(rule)]
        text.extend(line([label, *values]) for label, values in rows)
        text.append(rule)
        return "\n".join(text)

    def report_path(self, name) -> Path:
        """Reports-dir path for a report name that may carry cell ids or other file data"""
        stem = secure_filename(str(name or ""))[:MAX_NAME_LENGTH] or "report"
        base = Path(self.reports_dir).resolve()
        path = (base / f"{stem}.json").resolve()
        if path.parent != base:
            raise IoFailure(f"refusing to write outside {self.reports_dir}: {path}")
        return path

    def save_json_report(self, payload: Dict, name="report") -> str:
        """Save a JSON report under the reports directory"""
        path = self.report_path(name)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        except OSError as e:
            raise IoFailure(f"cannot write report {path}: {e}")
        return str(path)
