"""Metrics files and the method x domain comparison table."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

METRICS_FILE = "metrics.json"
BASELINE = "source_only"


class ReportError(ValueError):
    pass


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    return json.loads(resources.files("zodi").joinpath("schemas", f"{name}.schema.json").read_text())


def validate_metrics(doc: dict) -> None:
    jsonschema.validate(doc, load_schema("metrics"))


def validate_manifest(doc: dict) -> None:
    jsonschema.validate(doc, load_schema("manifest"))


def write_json(path, doc: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def method_name(doc: dict) -> str:
    """Column label: the mode, suffixed by the transfer variant when it is an ablation."""
    if doc["mode"] == BASELINE or doc.get("variant") in (None, "zodi"):
        return doc["mode"]
    return f"{doc['mode']}[{doc['variant']}]"


def load_run(run_dir) -> dict:
    path = Path(run_dir)
    if path.is_dir():
        path = path / METRICS_FILE
    if not path.is_file():
        raise ReportError(f"no completed run at {run_dir} ({METRICS_FILE} missing)")
    doc = json.loads(path.read_text())
    try:
        validate_metrics(doc)
    except jsonschema.ValidationError as exc:
        raise ReportError(f"{path}: metrics do not match schema: {exc.message}") from exc
    return doc


@dataclass
class Report:
    domains: list[str]
    methods: list[str]
    mean: dict[str, dict[str, float]]
    std: dict[str, dict[str, float]]

    def delta(self, method: str, domain: str) -> float | None:
        if BASELINE not in self.mean or method == BASELINE:
            return None
        return self.mean[method][domain] - self.mean[BASELINE][domain]

    def average(self, method: str) -> float:
        return sum(self.mean[method][d] for d in self.domains) / len(self.domains)

    def to_tsv(self) -> str:
        header = ["domain"]
        for m in self.methods:
            header += [f"{m}_mean", f"{m}_std"]
            if self.delta(m, self.domains[0]) is not None:
                header.append(f"{m}_delta")
        lines = ["\t".join(header)]
        for d in self.domains:
            row = [d]
            for m in self.methods:
                row += [f"{self.mean[m][d]:.4f}", f"{self.std[m][d]:.4f}"]
                dl = self.delta(m, d)
                if dl is not None:
                    row.append(f"{dl:+.4f}")
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        """Aligned table, one column per method; deltas against the baseline in brackets."""
        cells = [["domain"] + self.methods]
        for d in self.domains + ["mean"]:
            row = [d]
            for m in self.methods:
                if d == "mean":
                    v = self.average(m)
                    dl = None if self.delta(m, self.domains[0]) is None else v - self.average(BASELINE)
                    s = f"{v:.3f}"
                else:
                    dl = self.delta(m, d)
                    s = f"{self.mean[m][d]:.3f}±{self.std[m][d]:.3f}"
                if dl is not None:
                    s += f" ({dl:+.3f})"
                row.append(s)
            cells.append(row)
        widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def build_report(docs: list[dict]) -> Report:
    if not docs:
        raise ReportError("report needs at least one completed run")
    domains = list(docs[0]["domains"])
    mean, std, methods = {}, {}, []
    for doc in docs:
        name = method_name(doc)
        if sorted(doc["domains"]) != sorted(domains):
            raise ReportError(f"run {name!r} covers domains {doc['domains']}, expected {domains}")
        if name in mean:
            raise ReportError(f"method {name!r} appears in more than one run")
        methods.append(name)
        mean[name] = {d: float(doc["mean"][d]) for d in domains}
        std[name] = {d: float(doc["std"][d]) for d in domains}
    # baseline first so deltas read left to right
    methods.sort(key=lambda m: m != BASELINE)
    return Report(domains, methods, mean, std)
