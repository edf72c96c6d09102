"""Minimal vector-graphics Kaplan-Meier report (no plotting dependency).

The SVG is a direct view of `kaplan_meier` output: step polylines for
the high-risk (red) and low-risk (green) groups after a median split of
the risk scores, annotated with the log-rank statistic.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .survival import kaplan_meier, log_rank_test

WIDTH, HEIGHT = 640, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 40, 50


def median_split(risks, labels):
    """Split subjects at the median risk; ties go to the low-risk group."""
    risks = np.asarray(risks, dtype=float)
    med = float(np.median(risks))
    high = risks > med
    if high.sum() < 2 or (~high).sum() < 2:
        raise ValueError(
            "degenerate split: need at least two subjects per risk group "
            f"(median {med}, high {int(high.sum())}, low {int((~high).sum())})"
        )
    labels = list(labels)
    high_labels = [lab for lab, h in zip(labels, high) if h]
    low_labels = [lab for lab, h in zip(labels, high) if not h]
    return high_labels, low_labels


def step_points(times, surv, t_max):
    """Data-space vertices of a right-continuous step curve from (0, 1)."""
    pts = [(0.0, 1.0)]
    s_prev = 1.0
    for t, s in zip(times, surv):
        pts.append((float(t), s_prev))
        pts.append((float(t), float(s)))
        s_prev = float(s)
    pts.append((float(t_max), s_prev))
    return pts


def data_to_pixel(t, s, t_max):
    x = MARGIN_L + (t / t_max) * (WIDTH - MARGIN_L - MARGIN_R)
    y = MARGIN_T + (1.0 - s) * (HEIGHT - MARGIN_T - MARGIN_B)
    return x, y


def _polyline(pts, t_max, color):
    pix = " ".join(
        f"{x:.2f},{y:.2f}" for x, y in (data_to_pixel(t, s, t_max) for t, s in pts)
    )
    return (f'<polyline fill="none" stroke="{color}" stroke-width="2" '
            f'points="{pix}"/>')


def km_plot_svg(high_labels, low_labels, chi2, p) -> str:
    t_max = max(lab.raw_time for lab in list(high_labels) + list(low_labels))
    t_max = t_max if t_max > 0 else 1.0
    ht, hs = kaplan_meier(high_labels)
    lt, ls = kaplan_meier(low_labels)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    x0, y1 = data_to_pixel(0, 1, t_max)
    x1, y0 = data_to_pixel(t_max, 0, t_max)
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        _, y = data_to_pixel(0, frac, t_max)
        parts.append(f'<text x="{x0 - 8}" y="{y + 4}" font-size="11" '
                     f'text-anchor="end">{frac:.2f}</text>')
        x, _ = data_to_pixel(frac * t_max, 0, t_max)
        parts.append(f'<text x="{x}" y="{y0 + 16}" font-size="11" '
                     f'text-anchor="middle">{frac * t_max:.2g}</text>')
    parts.append(_polyline(step_points(ht, hs, t_max), t_max, "#cc2222"))
    parts.append(_polyline(step_points(lt, ls, t_max), t_max, "#22aa44"))
    sig = "significant (p < 0.05)" if p < 0.05 else "not significant"
    parts.append(f'<text x="{MARGIN_L}" y="22" font-size="13">'
                 f"log-rank chi2 = {chi2:.3f}, p = {p:.3g}, {sig}</text>")
    parts.append(f'<text x="{WIDTH - 180}" y="{MARGIN_T + 16}" font-size="12" '
                 f'fill="#cc2222">high risk (n={len(list(high_labels))})</text>')
    parts.append(f'<text x="{WIDTH - 180}" y="{MARGIN_T + 32}" font-size="12" '
                 f'fill="#22aa44">low risk (n={len(list(low_labels))})</text>')
    parts.append("<text x=\"20\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 20 {})\""
                 ">survival probability</text>".format((HEIGHT) // 2, (HEIGHT) // 2))
    parts.append(f'<text x="{(WIDTH + MARGIN_L) // 2}" y="{HEIGHT - 12}" '
                 f'font-size="12" text-anchor="middle">time</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def km_report(risks, labels, out_path):
    """Median-split KM curves + log-rank, written as an SVG file.

    Returns (chi_square, p_value).
    """
    high_labels, low_labels = median_split(risks, labels)
    chi2, p = log_rank_test(high_labels, low_labels)
    svg = km_plot_svg(high_labels, low_labels, chi2, p)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(svg, encoding="utf-8")
    return chi2, p
