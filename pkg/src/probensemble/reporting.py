"""Run artifacts: fixed-layout CSV files, a config echo, an aligned text
table for paradigm comparisons, and rendered figures.

CSV files are the canonical, replay-checked record of a run. Float cells use
repr-faithful 17-significant-digit formatting so identical runs produce
byte-identical files; figures are a human convenience rendered next to the
CSVs and excluded from replay comparison.
"""

from __future__ import annotations

import dataclasses
import io
import pathlib

FLOAT_FMT = ".17g"


def fmt_float(x: float | None) -> str:
    """Fixed float rendering for reproducible CSV cells; None becomes empty."""
    if x is None:
        return ""
    return format(float(x), FLOAT_FMT)


@dataclasses.dataclass(frozen=True)
class RoundRecord:
    """One communication round as reported: test-set quality, distillation
    progress, and the cumulative byte ledger at round end."""

    round: int
    strategy: str
    ensemble_accuracy: float
    ensemble_macro_f1: float
    client_accuracy: dict[int, float]
    mean_kd: float | None
    contributors: int
    stale: int
    # cumulative bytes keyed by (kind name, direction) at end of round
    bytes_by_kind: dict[tuple[str, str], int]

    def bytes_total(self) -> int:
        return sum(self.bytes_by_kind.values())


@dataclasses.dataclass
class RunReport:
    scenario: str
    seed: int
    strategy: str
    client_ids: tuple[int, ...]
    rounds: list[RoundRecord]
    # long-format trace rows: (kind, round, step, value)
    traces: list[tuple[str, int, int, float]]
    # ledger rows: (client_id, direction, kind name, messages, bytes)
    byte_rows: list[tuple[int, str, str, int, int]]
    config_echo: str

    def final_round(self) -> RoundRecord:
        if not self.rounds:
            raise ValueError("report has no rounds")
        return self.rounds[-1]

    def total_bytes(self) -> int:
        return sum(row[4] for row in self.byte_rows)


BYTE_COLUMNS = [
    ("contribution", "up"),
    ("contribution", "down"),
    ("broadcast", "up"),
    ("broadcast", "down"),
    ("parameters", "up"),
    ("parameters", "down"),
]


def report_csv_text(report: RunReport) -> str:
    out = io.StringIO()
    cols = ["round", "strategy", "ensemble_accuracy", "ensemble_macro_f1", "mean_kd",
            "contributors", "stale"]
    cols += [f"client_{cid}_accuracy" for cid in report.client_ids]
    cols += [f"bytes_{kind}_{direction}" for kind, direction in BYTE_COLUMNS]
    out.write(",".join(cols) + "\n")
    for rec in report.rounds:
        cells = [str(rec.round), rec.strategy,
                 fmt_float(rec.ensemble_accuracy), fmt_float(rec.ensemble_macro_f1),
                 fmt_float(rec.mean_kd), str(rec.contributors), str(rec.stale)]
        for cid in report.client_ids:
            cells.append(fmt_float(rec.client_accuracy.get(cid)))
        for key in BYTE_COLUMNS:
            cells.append(str(rec.bytes_by_kind.get(key, 0)))
        out.write(",".join(cells) + "\n")
    return out.getvalue()


def trace_csv_text(report: RunReport) -> str:
    out = io.StringIO()
    out.write("kind,round,step,value\n")
    for kind, round_, step, value in report.traces:
        out.write(f"{kind},{round_},{step},{fmt_float(value)}\n")
    return out.getvalue()


def bytes_csv_text(report: RunReport) -> str:
    out = io.StringIO()
    out.write("client_id,direction,kind,messages,bytes\n")
    for client_id, direction, kind, messages, nbytes in report.byte_rows:
        out.write(f"{client_id},{direction},{kind},{messages},{nbytes}\n")
    return out.getvalue()


def write_artifacts(report: RunReport, out_dir: pathlib.Path) -> dict[str, pathlib.Path]:
    """Write the four replay-checked artifacts; returns name -> path."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, text in [("report.csv", report_csv_text(report)),
                       ("trace.csv", trace_csv_text(report)),
                       ("bytes.csv", bytes_csv_text(report)),
                       ("config.echo", report.config_echo)]:
        path = out_dir / name
        path.write_text(text)
        paths[name] = path
    return paths


@dataclasses.dataclass(frozen=True)
class ComparisonRow:
    label: str
    accuracy: float
    macro_f1: float
    total_bytes: int
    byte_ratio: float


def comparison_csv_text(rows: list[ComparisonRow]) -> str:
    out = io.StringIO()
    out.write("label,accuracy,macro_f1,total_bytes,byte_ratio\n")
    for r in rows:
        out.write(f"{r.label},{fmt_float(r.accuracy)},{fmt_float(r.macro_f1)},"
                  f"{r.total_bytes},{fmt_float(r.byte_ratio)}\n")
    return out.getvalue()


def comparison_table_text(rows: list[ComparisonRow]) -> str:
    """Aligned plain-text rendering of a paradigm comparison."""
    headers = ["label", "accuracy", "macro_f1", "total_bytes", "byte_ratio"]
    body = [[r.label, f"{r.accuracy:.4f}", f"{r.macro_f1:.4f}",
             str(r.total_bytes), f"{r.byte_ratio:.6f}"] for r in rows]
    widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h)
              for i, h in enumerate(headers)]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(headers), rule] + [line(row) for row in body]) + "\n"


def render_figures(report: RunReport, out_dir: pathlib.Path) -> list[pathlib.Path]:
    """Render overview figures under out_dir/figures.

    Figures are derived views of the CSV content and never participate in
    replay comparison.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig_dir = out_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []
    rounds = [rec.round for rec in report.rounds]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rounds, [rec.ensemble_accuracy for rec in report.rounds],
            marker="o", label="ensemble")
    for cid in report.client_ids:
        series = [rec.client_accuracy.get(cid) for rec in report.rounds]
        if any(v is not None for v in series):
            ax.plot(rounds, series, marker=".", linestyle="--", label=f"client {cid}")
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.set_title(f"{report.scenario}: accuracy by round ({report.strategy})")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    path = fig_dir / "accuracy.png"
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    kd_points = [(rec.round, rec.mean_kd) for rec in report.rounds if rec.mean_kd is not None]
    if kd_points:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([p[0] for p in kd_points], [p[1] for p in kd_points], marker="o")
        ax.set_xlabel("round")
        ax.set_ylabel("mean KL(ensemble || client)")
        ax.set_title(f"{report.scenario}: distillation gap by round")
        ax.grid(True, alpha=0.3)
        path = fig_dir / "kd.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    best = [(s, v) for k, _r, s, v in report.traces if k == "optimizer_best"]
    mean = [(s, v) for k, _r, s, v in report.traces if k == "optimizer_mean"]
    if best:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([s for s, _ in best], [v for _, v in best], label="best so far")
        if mean:
            ax.plot([s for s, _ in mean], [v for _, v in mean],
                    label="population mean", alpha=0.7)
        ax.set_xlabel("generation / iteration")
        ax.set_ylabel("validation accuracy")
        ax.set_title(f"{report.scenario}: weight search ({report.strategy})")
        ax.legend(fontsize=8)
        ax.grid(True, alpha=0.3)
        path = fig_dir / "optimizer.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    if report.byte_rows:
        labels = [f"{kind}/{direction}" for kind, direction in BYTE_COLUMNS]
        totals = []
        for kind, direction in BYTE_COLUMNS:
            totals.append(sum(row[4] for row in report.byte_rows
                              if row[2] == kind and row[1] == direction))
        keep = [(l, t) for l, t in zip(labels, totals) if t > 0]
        if keep:
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.bar([l for l, _ in keep], [t for _, t in keep], color="#4878a8")
            ax.set_ylabel("bytes")
            ax.set_title(f"{report.scenario}: traffic by kind and direction")
            ax.tick_params(axis="x", rotation=20)
            path = fig_dir / "bytes.png"
            fig.savefig(path, dpi=100, bbox_inches="tight")
            plt.close(fig)
            written.append(path)
    return written
