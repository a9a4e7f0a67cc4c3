"""Line-delimited metrics logs: writing, validated reading, best/final extraction."""

from __future__ import annotations

import json
from pathlib import Path

METRICS_SCHEMA = "ccsrl.metrics/1"


class CorruptLog(ValueError):
    pass


class MetricsLog:
    """metrics.jsonl holds only seed-determined values; wall time goes to timing.jsonl.

    The first line is a header record carrying the schema, seed and config
    hash. Records are flushed as they are written.
    """

    def __init__(self, run_dir: Path | None, header: dict | None = None):
        self.run_dir = Path(run_dir) if run_dir else None
        self._last_epoch = -1
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            head = {"header": True, "schema": METRICS_SCHEMA, **(header or {})}
            (self.run_dir / "metrics.jsonl").write_text(json.dumps(head, sort_keys=True) + "\n")
            (self.run_dir / "timing.jsonl").write_text("")

    def write(self, record: dict, seconds: float | None = None):
        ep = record.get("epoch")
        if ep is not None:
            if ep <= self._last_epoch:
                raise ValueError(f"epoch index must increase, got {ep} after {self._last_epoch}")
            self._last_epoch = ep
        if not self.run_dir:
            return
        with (self.run_dir / "metrics.jsonl").open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        if seconds is not None:
            with (self.run_dir / "timing.jsonl").open("a") as fh:
                fh.write(json.dumps({"epoch": ep, "seconds": round(seconds, 3)}) + "\n")


def read_metrics(path: Path) -> tuple[dict, list[dict]]:
    """(header, epoch records); any malformed line fails with its line number."""
    path = Path(path)
    header, records, last = {}, [], -1
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptLog(f"{path}:{n}: not valid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise CorruptLog(f"{path}:{n}: expected a JSON object")
        if rec.get("header"):
            if n != 1:
                raise CorruptLog(f"{path}:{n}: header record after line 1")
            header = rec
            continue
        if "epoch" not in rec or "eval_return" not in rec:
            raise CorruptLog(f"{path}:{n}: record lacks epoch or eval_return")
        if rec["epoch"] <= last:
            raise CorruptLog(f"{path}:{n}: epoch index does not increase")
        last = rec["epoch"]
        records.append(rec)
    return header, records


def best_final(records: list[dict]) -> tuple[float, float]:
    """Best = max over training epochs (epoch >= 1), final = last training epoch."""
    vals = [r["eval_return"] for r in records if r["epoch"] >= 1]
    if not vals:
        raise ValueError("no training-epoch evaluations in the log")
    return max(vals), vals[-1]
