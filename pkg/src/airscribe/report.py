"""Accuracy aggregation across subjects, folds, and configurations.

A report is a grid of cells keyed by (feature kind, architecture, loss
mode). Each cell holds per-subject fold accuracies. Text rendering mirrors
the standard layout: one block per feature kind, loss-mode column groups,
one row per subject plus an Average row, percentages with two decimals.
Cells with missing folds are marked incomplete and excluded from averages.
"""

from __future__ import annotations

import json
from pathlib import Path

ARCH_ORDER = ("eegnet", "deepconvnet")
LOSS_ORDER = ("ce", "scl")
FEATURE_ORDER = ("preprocessed_eeg", "ica_components")
LOSS_TITLES = {"ce": "Cross-Entropy Loss", "scl": "Supervised Contrastive Loss"}
FEATURE_TITLES = {
    "preprocessed_eeg": "Pre-processed EEG",
    "ica_components": "ICA Components",
}

INCOMPLETE = "incomplete"


class ReportConflictError(ValueError):
    """Two sources provided the same report cell."""


class RunReport:
    """Fold accuracies per (feature, arch, loss, subject)."""

    def __init__(self, n_folds: int = 5):
        if n_folds < 1:
            raise ValueError("n_folds must be >= 1")
        self.n_folds = n_folds
        # cells[(feature, arch, loss)][subject] -> list of fold accs (None = missing)
        self.cells: dict[tuple[str, str, str], dict[str, list[float | None]]] = {}

    def add_result(
        self, feature: str, arch: str, loss: str, subject: str, fold: int, accuracy: float
    ) -> None:
        if not (0 <= fold < self.n_folds):
            raise ValueError(f"fold {fold} outside [0, {self.n_folds})")
        if not (0.0 <= accuracy <= 1.0):
            raise ValueError(f"accuracy {accuracy} outside [0, 1]")
        cell = self.cells.setdefault((feature, arch, loss), {})
        folds = cell.setdefault(subject, [None] * self.n_folds)
        folds[fold] = float(accuracy)

    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for cell in self.cells.values():
            for subject in cell:
                seen.setdefault(subject)
        return sorted(seen)

    def fold_values(self, feature, arch, loss, subject):
        return self.cells.get((feature, arch, loss), {}).get(subject)

    def subject_mean(self, feature, arch, loss, subject) -> float | None:
        folds = self.fold_values(feature, arch, loss, subject)
        if folds is None or any(v is None for v in folds):
            return None
        return sum(folds) / len(folds)

    def subject_std(self, feature, arch, loss, subject) -> float | None:
        folds = self.fold_values(feature, arch, loss, subject)
        if folds is None or any(v is None for v in folds):
            return None
        mean = sum(folds) / len(folds)
        return (sum((v - mean) ** 2 for v in folds) / len(folds)) ** 0.5

    def grand_mean(self, feature, arch, loss) -> float | None:
        """Mean of complete per-subject means; None unless every subject in
        the cell is complete."""
        cell = self.cells.get((feature, arch, loss))
        if not cell:
            return None
        means = [self.subject_mean(feature, arch, loss, s) for s in sorted(cell)]
        if any(m is None for m in means):
            return None
        return sum(means) / len(means)

    def features_present(self) -> list[str]:
        present = {key[0] for key in self.cells}
        ordered = [f for f in FEATURE_ORDER if f in present]
        return ordered + sorted(present - set(FEATURE_ORDER))

    def to_dict(self) -> dict:
        payload = {"n_folds": self.n_folds, "cells": []}
        for (feature, arch, loss) in sorted(self.cells):
            for subject in sorted(self.cells[(feature, arch, loss)]):
                payload["cells"].append(
                    {
                        "feature": feature,
                        "arch": arch,
                        "loss": loss,
                        "subject": subject,
                        "folds": self.cells[(feature, arch, loss)][subject],
                    }
                )
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "RunReport":
        report = cls(n_folds=int(payload["n_folds"]))
        for entry in payload["cells"]:
            folds = entry["folds"]
            cell = report.cells.setdefault(
                (entry["feature"], entry["arch"], entry["loss"]), {}
            )
            cell[entry["subject"]] = [
                None if v is None else float(v) for v in folds
            ]
        return report

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        )

    @classmethod
    def load_json(cls, path: str | Path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @staticmethod
    def merge(reports: list[tuple["RunReport", str]]) -> "RunReport":
        """Combine reports from several runs; duplicate cells abort."""
        if not reports:
            raise ValueError("nothing to merge")
        folds = {r.n_folds for r, _ in reports}
        if len(folds) != 1:
            raise ReportConflictError(f"reports disagree on fold count: {sorted(folds)}")
        merged = RunReport(n_folds=folds.pop())
        owners: dict[tuple[str, str, str], str] = {}
        for report, source in reports:
            for key, cell in report.cells.items():
                if key in owners:
                    raise ReportConflictError(
                        f"cell {key} provided by both {owners[key]} and {source}"
                    )
                owners[key] = source
                merged.cells[key] = {
                    subject: list(values) for subject, values in cell.items()
                }
        return merged

    def _format_cell(self, feature, arch, loss, subject) -> str:
        mean = self.subject_mean(feature, arch, loss, subject)
        if mean is None:
            if self.fold_values(feature, arch, loss, subject) is None:
                return "--"
            return INCOMPLETE
        return f"{100.0 * mean:.2f}"

    def average_cell(self, feature, arch, loss) -> str:
        mean = self.grand_mean(feature, arch, loss)
        if mean is None:
            if (feature, arch, loss) not in self.cells:
                return "--"
            return INCOMPLETE
        return f"{100.0 * mean:.2f}"

    def render_text(self) -> str:
        columns = [(loss, arch) for loss in LOSS_ORDER for arch in ARCH_ORDER]
        width = 13
        lines = []
        for feature in self.features_present():
            lines.append(FEATURE_TITLES.get(feature, feature))
            lines.append("=" * (14 + width * len(columns)))
            group = "".join(
                f"{LOSS_TITLES[loss]:^{width * 2}}" for loss in LOSS_ORDER
            )
            lines.append(" " * 14 + group)
            header = "".join(f"{arch:>{width}}" for _, arch in columns)
            lines.append(f"{'subject':<14}" + header)
            lines.append("-" * (14 + width * len(columns)))
            for subject in self.subjects():
                row = "".join(
                    f"{self._format_cell(feature, arch, loss, subject):>{width}}"
                    for loss, arch in columns
                )
                lines.append(f"{subject:<14}" + row)
            lines.append("-" * (14 + width * len(columns)))
            avg = "".join(
                f"{self.average_cell(feature, arch, loss):>{width}}"
                for loss, arch in columns
            )
            lines.append(f"{'Average':<14}" + avg)
            lines.append("")
        return "\n".join(lines)
