from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field


@dataclass
class EvalReport:
    """Scores per named slice. ``slices`` maps name -> {"score", "count", ...}."""

    metric: str
    total: int
    slices: dict[str, dict] = field(default_factory=dict)
    series: dict[str, list[dict]] = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def add(self, name: str, score: float, count: int, **extra) -> None:
        self.slices[name] = {"score": float(score), "count": int(count), **extra}

    def score(self, name: str) -> float:
        return self.slices[name]["score"]

    def to_dict(self) -> dict:
        return {"metric": self.metric, "total": self.total, "slices": self.slices,
                "series": self.series, "notes": self.notes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["series", "x", "score", "count"])
        for name in sorted(self.slices):
            s = self.slices[name]
            w.writerow(["slice", name, f"{s['score']:.6f}", s["count"]])
        for name in sorted(self.series):
            for pt in self.series[name]:
                w.writerow([name, pt["x"], f"{pt['score']:.6f}", pt["count"]])
        return buf.getvalue()
