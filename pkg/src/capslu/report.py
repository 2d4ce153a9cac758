"""Report emission: CSV tables and self-contained SVG charts.

CSV files follow RFC 4180 (CRLF, minimal quoting, header row) and print
floats with 17 significant digits so parsing them back reproduces the
in-memory doubles exactly.  SVG output is generated directly (no
external assets, no plotting library) so files are byte-deterministic.
"""

import csv
import os

from .harness import ExperimentReport

CURVE_COLUMNS = ["variant", "n_train", "mean_f1", "std_f1", "mean_exact"]
SPEAKER_COLUMNS = ["speaker", "is", "variant", "f1", "fer", "rel_improvement"]

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def write_curves_csv(curves: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(CURVE_COLUMNS)
        for variant in sorted(curves):
            for pt in curves[variant]:
                w.writerow([variant, pt.n_train, _fmt(pt.mean_f1),
                            _fmt(pt.std_f1), _fmt(pt.mean_exact)])


def write_speakers_csv(speakers, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(SPEAKER_COLUMNS)
        for r in speakers:
            w.writerow([r.speaker_id, _fmt(r.is_score), r.variant,
                        _fmt(r.f1), _fmt(r.fer), _fmt(r.rel_improvement)])


def read_csv_rows(path):
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def moving_average(values, window: int = 3):
    """Centered moving average with shrinking edges (overlay only; raw
    points are always stored)."""
    out = []
    half = window // 2
    for i in range(len(values)):
        lo = max(0, i - half)
        hi = min(len(values), i + half + 1)
        out.append(sum(values[lo:hi]) / (hi - lo))
    return out


class _Svg:
    W, H = 760, 460
    ML, MR, MT, MB = 64, 24, 36, 52

    def __init__(self, title, xlabel, ylabel, xlim, ylim):
        self.parts = []
        self.xlim = xlim
        self.ylim = ylim
        self.parts.append(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.W}" '
            f'height="{self.H}" viewBox="0 0 {self.W} {self.H}">')
        self.parts.append(
            f'<rect width="{self.W}" height="{self.H}" fill="white"/>')
        self.parts.append(
            f'<text x="{self.W / 2:.1f}" y="22" text-anchor="middle" '
            f'font-family="sans-serif" font-size="15">{title}</text>')
        self.parts.append(
            f'<text x="{self.W / 2:.1f}" y="{self.H - 12}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{xlabel}</text>')
        self.parts.append(
            f'<text x="16" y="{self.H / 2:.1f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12" '
            f'transform="rotate(-90 16 {self.H / 2:.1f})">{ylabel}</text>')
        self._axes()

    def x(self, v) -> float:
        lo, hi = self.xlim
        span = (hi - lo) or 1.0
        return self.ML + (v - lo) / span * (self.W - self.ML - self.MR)

    def y(self, v) -> float:
        lo, hi = self.ylim
        span = (hi - lo) or 1.0
        return self.H - self.MB - (v - lo) / span * (self.H - self.MT - self.MB)

    def _axes(self):
        x0, x1 = self.ML, self.W - self.MR
        y0, y1 = self.H - self.MB, self.MT
        self.parts.append(
            f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
        self.parts.append(
            f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
        for i in range(5):
            fx = self.xlim[0] + (self.xlim[1] - self.xlim[0]) * i / 4
            fy = self.ylim[0] + (self.ylim[1] - self.ylim[0]) * i / 4
            px, py = self.x(fx), self.y(fy)
            self.parts.append(
                f'<line x1="{px:.1f}" y1="{y0}" x2="{px:.1f}" y2="{y0 + 4}" '
                f'stroke="black"/>')
            self.parts.append(
                f'<text x="{px:.1f}" y="{y0 + 18}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="10">{fx:.3g}</text>')
            self.parts.append(
                f'<line x1="{x0 - 4}" y1="{py:.1f}" x2="{x0}" y2="{py:.1f}" '
                f'stroke="black"/>')
            self.parts.append(
                f'<text x="{x0 - 8}" y="{py + 3:.1f}" text-anchor="end" '
                f'font-family="sans-serif" font-size="10">{fy:.3g}</text>')

    def polyline(self, xs, ys, color, dashed=False, width=1.6):
        pts = " ".join(f"{self.x(a):.2f},{self.y(b):.2f}" for a, b in zip(xs, ys))
        dash = ' stroke-dasharray="6 4"' if dashed else ""
        self.parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"{dash}/>')

    def scatter(self, xs, ys, color, r=4.0):
        for a, b in zip(xs, ys):
            self.parts.append(
                f'<circle cx="{self.x(a):.2f}" cy="{self.y(b):.2f}" r="{r}" '
                f'fill="{color}" fill-opacity="0.8"/>')

    def hline(self, yv, color="#888888"):
        self.parts.append(
            f'<line x1="{self.ML}" y1="{self.y(yv):.1f}" '
            f'x2="{self.W - self.MR}" y2="{self.y(yv):.1f}" stroke="{color}" '
            f'stroke-dasharray="2 3"/>')

    def legend(self, entries):
        for i, (label, color) in enumerate(entries):
            ly = self.MT + 14 + i * 16
            lx = self.ML + 12
            self.parts.append(
                f'<rect x="{lx}" y="{ly - 9}" width="14" height="4" '
                f'fill="{color}"/>')
            self.parts.append(
                f'<text x="{lx + 20}" y="{ly - 2}" font-family="sans-serif" '
                f'font-size="11">{label}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def curves_svg(curves: dict) -> str:
    xmax = max(pt.n_train for c in curves.values() for pt in c)
    chart = _Svg("Learning curves (micro F1, 3-pt avg overlay dashed)",
                 "training utterances", "micro F1", (0, xmax), (0.0, 1.0))
    legend = []
    for i, variant in enumerate(sorted(curves)):
        pts = curves[variant]
        color = _PALETTE[i % len(_PALETTE)]
        xs = [p.n_train for p in pts]
        ys = [p.mean_f1 for p in pts]
        chart.polyline(xs, ys, color)
        chart.polyline(xs, moving_average(ys), color, dashed=True, width=1.0)
        legend.append((variant, color))
    chart.legend(legend)
    return chart.render()


def transfer_svg(speakers) -> str:
    xs_all = [r.is_score for r in speakers]
    ys_all = [r.rel_improvement for r in speakers]
    pad = 0.02 + max(abs(v) for v in ys_all)
    chart = _Svg("Relative F1 improvement vs baseline, by intelligibility",
                 "intelligibility score", "relative F1 improvement",
                 (min(xs_all) - 2, max(xs_all) + 2), (-pad, pad))
    chart.hline(0.0)
    variants = sorted({r.variant for r in speakers})
    legend = []
    for i, v in enumerate(variants):
        color = _PALETTE[i % len(_PALETTE)]
        rows = [r for r in speakers if r.variant == v]
        chart.scatter([r.is_score for r in rows],
                      [r.rel_improvement for r in rows], color)
        legend.append((v, color))
    chart.legend(legend)
    return chart.render()


def emit_report(report: ExperimentReport, output_dir) -> list:
    """Write curves.csv / speakers.csv plus SVG charts; returns the paths.

    Empty report sections produce headers-only CSVs and no SVG."""
    os.makedirs(output_dir, exist_ok=True)
    written = []

    def _put(name, text=None):
        path = os.path.join(output_dir, name)
        written.append(path)
        return path

    write_curves_csv(report.curves, _put("curves.csv"))
    write_speakers_csv(report.speakers, _put("speakers.csv"))
    if report.curves and all(report.curves.values()):
        with open(_put("curves.svg"), "w", encoding="utf-8") as fh:
            fh.write(curves_svg(report.curves))
        for variant, pts in sorted(report.curves.items()):
            with open(_put(f"{variant}_curve.svg"), "w", encoding="utf-8") as fh:
                fh.write(curves_svg({variant: pts}))
    if report.speakers:
        with open(_put("transfer_improvement.svg"), "w", encoding="utf-8") as fh:
            fh.write(transfer_svg(report.speakers))
    return written
