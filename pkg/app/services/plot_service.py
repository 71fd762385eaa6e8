import logging
import math
from typing import List, Optional, Sequence, Tuple

from reportlab.graphics import renderSVG
from reportlab.graphics.shapes import Circle, Drawing, Group, Line, PolyLine, Rect, String
from reportlab.lib import colors

from app.models import SweepResult

logger = logging.getLogger(__name__)

WIDTH, HEIGHT = 1200, 500
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_BOTTOM, MARGIN_TOP = 70, 20, 55, 40
PALETTE = [colors.HexColor("#1f77b4"), colors.HexColor("#d62728"), colors.HexColor("#2ca02c"),
           colors.HexColor("#9467bd"), colors.HexColor("#ff7f0e")]
METRIC_TITLES = {"F": "Forgetting", "G": "Generalization error"}


def nice_ticks(lo: float, hi: float, count: int = 5) -> List[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    step = 10 ** math.floor(math.log10(raw))
    for mult in (1, 2, 5, 10):
        if raw <= mult * step:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    ticks = []
    value = start
    while value <= hi + 1e-12 * abs(step):
        ticks.append(round(value, 12))
        value += step
    return ticks


class Panel:
    """Linear data-to-canvas mapping for one plot panel."""

    def __init__(self, x0: float, y0: float, width: float, height: float,
                 xlim: Tuple[float, float], ylim: Tuple[float, float]):
        self.x0, self.y0, self.width, self.height = x0, y0, width, height
        self.xlim, self.ylim = xlim, ylim

    def sx(self, x: float) -> float:
        lo, hi = self.xlim
        return self.x0 + (x - lo) / (hi - lo) * self.width

    def sy(self, y: float) -> float:
        lo, hi = self.ylim
        return self.y0 + (y - lo) / (hi - lo) * self.height


def _limits(values: Sequence[float]) -> Tuple[float, float]:
    finite = [v for v in values if v is not None and math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    pad = 0.05 * (hi - lo) if hi > lo else max(abs(hi), 1.0) * 0.05
    return lo - pad, hi + pad


def _panel_values(result: SweepResult, metric: str) -> List[float]:
    values: List[float] = []
    for label in result.strategies:
        for est in result.empirical[(label, metric)]:
            if est is not None:
                values += [est.mean - est.std_error, est.mean + est.std_error]
        values += [v for v in result.theory[(label, metric)] if v is not None]
    return values


def _draw_axes(group: Group, panel: Panel, title: str, axis_label: str) -> None:
    group.add(Rect(panel.x0, panel.y0, panel.width, panel.height,
                   strokeColor=colors.black, fillColor=None, strokeWidth=1))
    for x in nice_ticks(*panel.xlim):
        if panel.xlim[0] <= x <= panel.xlim[1]:
            px = panel.sx(x)
            group.add(Line(px, panel.y0, px, panel.y0 - 5, strokeColor=colors.black))
            group.add(String(px, panel.y0 - 18, f"{x:g}", fontSize=10, textAnchor="middle"))
    for y in nice_ticks(*panel.ylim):
        if panel.ylim[0] <= y <= panel.ylim[1]:
            py = panel.sy(y)
            group.add(Line(panel.x0 - 5, py, panel.x0, py, strokeColor=colors.black))
            group.add(String(panel.x0 - 8, py - 3, f"{y:.3g}", fontSize=10, textAnchor="end"))
    group.add(String(panel.x0 + panel.width / 2, panel.y0 + panel.height + 12, title,
                     fontSize=13, textAnchor="middle"))
    group.add(String(panel.x0 + panel.width / 2, panel.y0 - 40, axis_label, fontSize=11, textAnchor="middle"))


def _draw_series(group: Group, panel: Panel, result: SweepResult, metric: str) -> None:
    for k, label in enumerate(result.strategies):
        color = PALETTE[k % len(PALETTE)]
        theory = [(panel.sx(x), panel.sy(v)) for x, v in zip(result.grid, result.theory[(label, metric)])
                  if v is not None and math.isfinite(v)]
        if len(theory) >= 2:
            group.add(PolyLine([c for pt in theory for c in pt], strokeColor=color, strokeWidth=1.5))
        for x, est in zip(result.grid, result.empirical[(label, metric)]):
            if est is None or not math.isfinite(est.mean):
                continue
            px, py = panel.sx(x), panel.sy(est.mean)
            if math.isfinite(est.std_error) and est.std_error > 0:
                lo, hi = panel.sy(est.mean - est.std_error), panel.sy(est.mean + est.std_error)
                group.add(Line(px, lo, px, hi, strokeColor=color))
                group.add(Line(px - 3, lo, px + 3, lo, strokeColor=color))
                group.add(Line(px - 3, hi, px + 3, hi, strokeColor=color))
            group.add(Circle(px, py, 3, fillColor=color, strokeColor=color))
        # legend
        lx, ly = panel.x0 + 10, panel.y0 + panel.height - 16 - 16 * k
        group.add(Line(lx, ly + 4, lx + 20, ly + 4, strokeColor=color, strokeWidth=1.5))
        group.add(String(lx + 26, ly, label, fontSize=10))


def _draw_crossover(group: Group, panel: Panel, crossover: Optional[float]) -> None:
    if crossover is None or not panel.xlim[0] <= crossover <= panel.xlim[1]:
        return
    px = panel.sx(crossover)
    group.add(Line(px, panel.y0, px, panel.y0 + panel.height, strokeColor=colors.grey,
                   strokeDashArray=[4, 3]))
    group.add(String(px + 4, panel.y0 + 8, f"crossover ~ {crossover:.3g}", fontSize=10, fillColor=colors.grey))


def sweep_drawing(result: SweepResult, width: int = WIDTH, height: int = HEIGHT) -> Drawing:
    drawing = Drawing(width, height)
    drawing.add(Rect(0, 0, width, height, fillColor=colors.white, strokeColor=None))
    xlim = _limits(result.grid)
    panel_width = (width - 2 * (MARGIN_LEFT + MARGIN_RIGHT)) / 2
    for k, metric in enumerate(("F", "G")):
        x0 = MARGIN_LEFT + k * (panel_width + MARGIN_LEFT + MARGIN_RIGHT)
        panel = Panel(x0, MARGIN_BOTTOM, panel_width, height - MARGIN_BOTTOM - MARGIN_TOP,
                      xlim, _limits(_panel_values(result, metric)))
        group = Group()
        _draw_axes(group, panel, METRIC_TITLES[metric], result.axis)
        _draw_series(group, panel, result, metric)
        _draw_crossover(group, panel, result.crossovers.get(metric))
        drawing.add(group)
    return drawing


def render_sweep_svg(result: SweepResult, path: str, width: int = WIDTH, height: int = HEIGHT) -> str:
    renderSVG.drawToFile(sweep_drawing(result, width, height), path)
    logger.info(f"Wrote {path}")
    return path


def write_gnuplot_data(result: SweepResult, path: str) -> str:
    """One gnuplot ``index`` block per (metric, strategy): axis, mean, SE, theory."""
    blocks = []
    for metric in ("F", "G"):
        for label in result.strategies:
            lines = [f"# metric={metric} strategy={label}", f"# {result.axis} empirical_mean std_error theory_value"]
            for x, est, th in zip(result.grid, result.empirical[(label, metric)], result.theory[(label, metric)]):
                if est is None:
                    continue
                theory = "NaN" if th is None else f"{th:.17g}"
                lines.append(f"{x:.17g} {est.mean:.17g} {est.std_error:.17g} {theory}")
            blocks.append("\n".join(lines))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n\n\n".join(blocks) + "\n")
    logger.info(f"Wrote {path}")
    return path
