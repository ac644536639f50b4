"""Result tables as line-delimited JSON plus an aligned text rendering."""
from __future__ import annotations

import json
from pathlib import Path

RETRIEVAL_ROWS = ("zero-shot", "w/o adapter", "fused")
COMMENT_ROWS = ("no-retrieval", "rag", "unicorn", "oracle")
ORACLE_TOLERANCE = 0.01
METRIC_NOTE = "token_f1 and exact_match stand in for METEOR/BEM; bleu uses 1e-9 smoothing"


def ordering_flags(retrieval: dict, commenting: dict) -> dict:
    """Pairwise orderings of the headline metrics; a flag is omitted when a row is missing."""
    flags = {}

    def gt(name, table, a, b, metric, slack=0.0):
        if a in table and b in table:
            flags[name] = bool(table[a][metric] > table[b][metric] - slack)

    gt("w/o adapter > zero-shot (recall@1)", retrieval, "w/o adapter", "zero-shot", "recall@1")
    gt("fused > w/o adapter (recall@1)", retrieval, "fused", "w/o adapter", "recall@1")
    for metric in ("token_f1", "bleu"):
        gt(f"rag > no-retrieval ({metric})", commenting, "rag", "no-retrieval", metric)
        gt(f"unicorn > rag ({metric})", commenting, "unicorn", "rag", metric)
    if "oracle" in commenting and "unicorn" in commenting:
        flags["oracle >= unicorn - 0.01 (token_f1)"] = bool(
            commenting["oracle"]["token_f1"] >= commenting["unicorn"]["token_f1"] - ORACLE_TOLERANCE
        )
    return flags


COMMENT_COLUMNS = ("token_f1", "bleu", "rouge1", "rouge2", "exact_match")


def _column_key(name: str):
    if name.startswith("recall@"):
        return (0, int(name.split("@")[1]), name)
    if name in COMMENT_COLUMNS:
        return (1, COMMENT_COLUMNS.index(name), name)
    return (2, 0, name)


def _ordered(table: dict, rows: tuple) -> list:
    known = [r for r in rows if r in table]
    return known + sorted(r for r in table if r not in rows)


def report_records(retrieval: dict | None, commenting: dict | None) -> list[dict]:
    retrieval, commenting = retrieval or {}, commenting or {}
    if not retrieval and not commenting:
        raise ValueError("a report needs at least one metric block")
    records = []
    for row in _ordered(retrieval, RETRIEVAL_ROWS):
        records.append({"table": "retrieval", "row": row, **{k: retrieval[row][k] for k in sorted(retrieval[row], key=_column_key)}})
    for row in _ordered(commenting, COMMENT_ROWS):
        records.append({"table": "commenting", "row": row, **{k: commenting[row][k] for k in sorted(commenting[row], key=_column_key)}})
    for name, value in ordering_flags(retrieval, commenting).items():
        records.append({"table": "flags", "row": name, "value": value})
    return records


def render_text(records: list[dict]) -> str:
    lines = []
    for table in ("retrieval", "commenting"):
        rows = [r for r in records if r["table"] == table]
        if not rows:
            continue
        cols = [k for k in rows[0] if k not in ("table", "row")]
        width = max(len(r["row"]) for r in rows) + 2
        lines.append(f"[{table}]")
        if table == "commenting":
            lines.append(f"# {METRIC_NOTE}")
        lines.append("".join([" " * width] + [f"{c:>13}" for c in cols]))
        for r in rows:
            lines.append("".join([f"{r['row']:<{width}}"] + [f"{r[c]:>13.4f}" for c in cols]))
        lines.append("")
    flags = [r for r in records if r["table"] == "flags"]
    if flags:
        lines.append("[flags]")
        lines.extend(f"{r['row']}: {str(r['value']).lower()}" for r in flags)
        lines.append("")
    return "\n".join(lines)


def emit_report(out_dir, retrieval: dict | None = None, commenting: dict | None = None) -> list[dict]:
    """Write ``report.jsonl`` and ``report.txt``; returns the records written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = report_records(retrieval, commenting)
    with open(out / "report.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=False) + "\n")
    (out / "report.txt").write_text(render_text(records), encoding="utf-8")
    return records


def read_report(path) -> tuple[dict, dict, dict]:
    """Inverse of :func:`emit_report` for the ``.jsonl`` file."""
    retrieval, commenting, flags = {}, {}, {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        r = json.loads(line)
        body = {k: v for k, v in r.items() if k not in ("table", "row")}
        if r["table"] == "retrieval":
            retrieval[r["row"]] = body
        elif r["table"] == "commenting":
            commenting[r["row"]] = body
        else:
            flags[r["row"]] = body["value"]
    return retrieval, commenting, flags
