"""Plain-text and JSON rendering of panoptic reports."""

from pathlib import Path
from typing import Union
import json

from labelforge.evaluation.panoptic import PQReport

SUMMARY_COLUMNS = (
    ("PQ", "pq"),
    ("PQ†", "pq_dagger"),
    ("RQ", "rq"),
    ("SQ", "sq"),
    ("PQTh", "pq_things"),
    ("RQTh", "rq_things"),
    ("SQTh", "sq_things"),
    ("PQSt", "pq_stuff"),
    ("RQSt", "rq_stuff"),
    ("SQSt", "sq_stuff"),
    ("mIoU", "miou"),
)


def _row(cells, widths) -> str:
    return "  ".join(str(cell).rjust(width) for cell, width in zip(cells, widths)).rstrip()


def format_report(report: PQReport, per_class: bool = True) -> str:
    """Aligned table with every metric scaled to percent."""
    header = [name for name, _ in SUMMARY_COLUMNS]
    values = [f"{100 * getattr(report, field):.1f}" for _, field in SUMMARY_COLUMNS]
    widths = [max(len(h), len(v)) for h, v in zip(header, values)]
    lines = [_row(header, widths), _row(values, widths)]

    if per_class and report.per_class:
        lines.append("")
        class_header = ["class", "kind", "PQ", "SQ", "RQ", "IoU", "TP", "FP", "FN"]
        rows = [
            [
                m.name,
                "thing" if m.is_thing else "stuff",
                f"{100 * m.pq:.1f}",
                f"{100 * m.sq:.1f}",
                f"{100 * m.rq:.1f}",
                f"{100 * m.iou:.1f}",
                m.tp,
                m.fp,
                m.fn,
            ]
            for m in report.per_class.values()
        ]
        widths = [max(len(str(c)) for c in column) for column in zip(class_header, *rows)]
        lines.append(_row(class_header, widths))
        lines.extend(_row(row, widths) for row in rows)

    lines.append("")
    lines.extend(f"{key}: {value}" for key, value in sorted(report.metadata.items()))
    return "\n".join(lines) + "\n"


def write_report(report: PQReport, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
