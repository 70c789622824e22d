"""Log-log SVG charts and a text verdict for a sweep's scaling report."""

import json
import math
import os
from fractions import Fraction

from .errors import MissingReportError
from .functionals import mu_star

WIDTH, HEIGHT = 420, 320
MARGIN = dict(left=70, right=20, top=36, bottom=50)
COLOURS = {"data": "#1f5fa8", "fit": "#1f5fa8", "reference": "#c0392b"}


class LogAxes:
    """Maps ``(eps, value)`` to panel pixels on log scales."""

    def __init__(self, xs, ys, x0=0.0):
        lx = [math.log10(x) for x in xs]
        ly = [math.log10(y) for y in ys if y > 0]
        self.xmin, self.xmax = min(lx) - 0.1, max(lx) + 0.1
        self.ymin, self.ymax = math.floor(min(ly) * 2) / 2, math.ceil(max(ly) * 2) / 2
        if self.ymax - self.ymin < 1:
            self.ymax = self.ymin + 1
        self.x0 = x0
        self.w = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(self, x):
        return self.x0 + MARGIN["left"] + (math.log10(x) - self.xmin) / (self.xmax - self.xmin) * self.w

    def py(self, y):
        return MARGIN["top"] + (self.ymax - math.log10(y)) / (self.ymax - self.ymin) * self.h

    def frame(self, title, xs, ylabel):
        left, top = self.x0 + MARGIN["left"], MARGIN["top"]
        parts = [
            f'<rect x="{left}" y="{top}" width="{self.w}" height="{self.h}" fill="none" stroke="#333"/>',
            f'<text x="{left + self.w / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
            f'<text x="{left + self.w / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">eps</text>',
            f'<text x="{self.x0 + 14}" y="{top + self.h / 2}" font-size="12" text-anchor="middle" '
            f'transform="rotate(-90 {self.x0 + 14} {top + self.h / 2})">{ylabel}</text>',
        ]
        for x in xs:
            X = self.px(x)
            parts.append(f'<line x1="{X:.2f}" y1="{top + self.h}" x2="{X:.2f}" y2="{top + self.h + 5}" stroke="#333"/>')
            parts.append(f'<text x="{X:.2f}" y="{top + self.h + 18}" text-anchor="middle" font-size="11">'
                         f'{Fraction(x).limit_denominator(1 << 20)}</text>')
        for k in range(int(math.ceil(self.ymin)), int(math.floor(self.ymax)) + 1):
            Y = self.py(10.0**k)
            parts.append(f'<line x1="{left - 5}" y1="{Y:.2f}" x2="{left}" y2="{Y:.2f}" stroke="#333"/>')
            parts.append(f'<line x1="{left}" y1="{Y:.2f}" x2="{left + self.w}" y2="{Y:.2f}" stroke="#ddd"/>')
            parts.append(f'<text x="{left - 8}" y="{Y + 4:.2f}" text-anchor="end" font-size="11">1e{k}</text>')
        return parts

    def polyline(self, xs, ys, colour, dash=None):
        pts = " ".join(f"{self.px(x):.2f},{self.py(y):.2f}" for x, y in zip(xs, ys) if y > 0)
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="1.5"{extra}/>'

    def markers(self, xs, ys, lows, highs, colour):
        out = []
        for x, y, lo, hi in zip(xs, ys, lows, highs):
            X = self.px(x)
            if lo > 0 and hi > 0:
                out.append(f'<line x1="{X:.2f}" y1="{self.py(lo):.2f}" x2="{X:.2f}" y2="{self.py(hi):.2f}" '
                           f'stroke="{colour}"/>')
            out.append(f'<circle cx="{X:.2f}" cy="{self.py(y):.2f}" r="3.5" fill="{colour}"/>')
        return out


def _panel(x0, title, ylabel, eps, values, cis, fit, reference):
    """``reference`` is a list of values at ``eps`` (dashed red line)."""
    fitted = [math.exp(fit["intercept"]) * e ** fit["slope"] for e in eps]
    axes = LogAxes(eps, values + fitted + reference + [c for c in sum(map(list, cis), []) if c > 0], x0)
    parts = axes.frame(title, eps, ylabel)
    parts.append(axes.polyline(eps, fitted, COLOURS["fit"]))
    parts.append(axes.polyline(eps, reference, COLOURS["reference"], dash="6,4"))
    parts.extend(axes.markers(eps, values, [c[0] for c in cis], [c[1] for c in cis], COLOURS["data"]))
    return parts


def render_svg(report):
    eps = report["eps"]
    beta, d = report["beta"], report["dim"]
    fits = report["fits"]
    stats = report["statistics"]
    predicted = min(beta, d)
    var = [m["variance"] for m in stats["j0"]["q2"]]
    var_ci = [m["variance_ci"] for m in stats["j0"]["q2"]]
    anchor = math.exp(fits["var_j0"]["intercept"]) * eps[0] ** fits["var_j0"]["slope"]
    ref = [anchor * (e / eps[0]) ** predicted for e in eps]
    parts = _panel(0, f"Var J0 (slope {fits['var_j0']['slope']:.2f}, predicted {predicted:g})", "variance",
                   eps, var, var_ci, fits["var_j0"], ref)
    panels = 1
    if "rms_e_hat" in fits:
        rms = [m["moment"] for m in stats["e_hat"]["q2"]]
        rms_ci = [m["moment_ci"] for m in stats["e_hat"]["q2"]]
        anchor = math.exp(fits["rms_e_hat"]["intercept"]) * eps[0] ** fits["rms_e_hat"]["slope"]
        shape = [e * mu_star(1.0 / e, beta, d) for e in eps]
        ref = [anchor * s / shape[0] for s in shape]
        parts += _panel(WIDTH, f"rms E-hat (slope {fits['rms_e_hat']['slope']:.2f})", "rms", eps, rms,
                        rms_ci, fits["rms_e_hat"], ref)
        panels = 2
    legend_y = HEIGHT - 26
    parts.append(f'<text x="{MARGIN["left"]}" y="{legend_y + 20}" font-size="10" fill="#555">solid: '
                 f'least-squares fit; dashed: predicted scaling; bars: 95% jackknife intervals</text>')
    body = "\n".join(parts)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH * panels}" height="{HEIGHT + 14}" '
            f'font-family="sans-serif">\n<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n')


def verdict_lines(report):
    lines = []
    for name, fit in report["fits"].items():
        if "pass" not in fit and "holds" not in fit:
            continue
        ok = fit.get("pass", fit.get("holds"))
        detail = ", ".join(
            f"{k} {fit[k]:.4g}" for k in ("slope", "predicted", "band", "threshold", "mismatch",
                                           "e_hat_ci_upper", "j0_hat_ci_lower") if k in fit
        )
        lines.append(f"{name:12s} {'PASS' if ok else 'FAIL'}  {detail}")
    if report.get("heavy_tail_warnings"):
        lines.append("heavy-tail warning: " + ", ".join(report["heavy_tail_warnings"]))
    return lines


def render_report(run_dir):
    """Write ``report.svg`` from ``scaling.json`` and return the text verdict."""
    path = os.path.join(run_dir, "scaling.json")
    if not os.path.isfile(path):
        raise MissingReportError(f"no scaling report at {path}; run a sweep first")
    with open(path) as fh:
        report = json.load(fh)
    with open(os.path.join(run_dir, "report.svg"), "w") as fh:
        fh.write(render_svg(report))
    return "\n".join(verdict_lines(report)) + "\n"
