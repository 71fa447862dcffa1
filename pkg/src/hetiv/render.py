"""Publication-style table rendering.

Human output mirrors journal typography: three fixed decimals rounded half
away from zero, a true minus sign, thousands separators on observation
counts and F statistics, standard errors in parentheses directly beneath
their coefficients, and the significance legend
*** p<=0.01, ** p<=0.05, * p<=0.10 (boundaries closed: p = 0.05 earns **).
Machine output is plain ASCII CSV with no separators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from scipy import stats

MINUS = "−"
LEGEND = "*** significant at 1% level; ** significant at 5% level; * significant at 10% level"


def stars_for(p: float | None) -> str:
    """Significance stars; thresholds are closed lower bounds."""
    if p is None or math.isnan(p):
        return ""
    if p <= 0.01:
        return "***"
    if p <= 0.05:
        return "**"
    if p <= 0.10:
        return "*"
    return ""


def round_half_away(x: float, decimals: int = 3) -> float:
    """Round ties away from zero (0.0005 -> 0.001, -0.0005 -> -0.001)."""
    quant = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(x)).quantize(quant, rounding=ROUND_HALF_UP))


def fmt_number(
    x: float | None,
    decimals: int = 3,
    human: bool = True,
    thousands: bool = False,
) -> str:
    """Fixed-decimal formatting; human mode uses a true minus sign and may
    insert thousands separators."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    value = round_half_away(float(x), decimals)
    if decimals == 0:
        body = f"{abs(value):,.0f}" if thousands else f"{abs(value):.0f}"
    else:
        body = f"{abs(value):,.{decimals}f}" if thousands else f"{abs(value):.{decimals}f}"
    sign = ""
    if value < 0:
        sign = MINUS if human else "-"
    return sign + body


@dataclass(frozen=True)
class Cell:
    """One coefficient cell: value, its SE, and the p-value driving stars.

    When ``pvalue`` is omitted it is derived from value/se with a two-sided
    normal reference. ``note`` marks estimation failures rendered as
    annotated blanks.
    """

    value: float | None = None
    se: float | None = None
    pvalue: float | None = None
    note: str = ""

    def p(self) -> float | None:
        if self.pvalue is not None:
            return self.pvalue
        if self.value is None or self.se is None or self.se == 0:
            return None
        return 2.0 * float(stats.norm.sf(abs(self.value) / self.se))


@dataclass
class RenderedTable:
    """Layout-ready table: coefficient rows carry Cell pairs, footer rows
    carry preformatted strings, check rows carry booleans."""

    title: str
    headers: list
    coef_rows: list = field(default_factory=list)  # (label, [Cell, ...])
    footer_rows: list = field(default_factory=list)  # (label, [str, ...])
    check_rows: list = field(default_factory=list)  # (label, [bool, ...])
    notes: list = field(default_factory=list)
    legend: str = LEGEND

    @property
    def ncols(self) -> int:
        return len(self.headers)


def _coef_strings(cell: Cell, human: bool) -> tuple:
    if cell.value is None:
        marker = cell.note or ""
        return (marker, "")
    top = fmt_number(cell.value, 3, human) + stars_for(cell.p())
    bottom = f"({fmt_number(cell.se, 3, human)})" if cell.se is not None else ""
    return (top, bottom)


def render_human(table: RenderedTable) -> str:
    """Aligned plain-text rendering."""
    rows = []  # list of list-of-str
    rows.append([""] + list(table.headers))
    for label, cells in table.coef_rows:
        tops, bottoms = zip(*[_coef_strings(c, human=True) for c in cells])
        rows.append([label] + list(tops))
        if any(bottoms):
            rows.append([""] + list(bottoms))
    for label, values in table.footer_rows:
        rows.append([label] + list(values))
    for label, marks in table.check_rows:
        rows.append([label] + ["✓" if m else "" for m in marks])

    ncols = max(len(r) for r in rows)
    widths = [0] * ncols
    for r in rows:
        for j, cell in enumerate(r):
            widths[j] = max(widths[j], len(cell))
    lines = [table.title]
    for r in rows:
        padded = [r[0].ljust(widths[0])] + [
            r[j].rjust(widths[j]) if j < len(r) else "".rjust(widths[j])
            for j in range(1, ncols)
        ]
        lines.append("  ".join(padded).rstrip())
    lines.append("")
    lines.append(f"Notes: {table.legend}.")
    for note in table.notes:
        lines.append(f"  {note}")
    return "\n".join(lines) + "\n"


def _csv_quote(text: str) -> str:
    if any(ch in text for ch in ",\"\n"):
        return '"' + text.replace('"', '""') + '"'
    return text


def render_csv(table: RenderedTable) -> str:
    """Machine-readable rendering: one row per table row, ASCII numbers."""
    lines = [",".join([_csv_quote(table.title)] + [_csv_quote(h) for h in table.headers])]
    for label, cells in table.coef_rows:
        tops = []
        ses = []
        for c in cells:
            if c.value is None:
                tops.append(c.note or "")
                ses.append("")
            else:
                tops.append(fmt_number(c.value, 3, human=False) + stars_for(c.p()))
                ses.append(fmt_number(c.se, 3, human=False) if c.se is not None else "")
        lines.append(",".join([_csv_quote(label)] + [_csv_quote(t) for t in tops]))
        if any(ses):
            lines.append(",".join([_csv_quote(f"{label} (se)")] + ses))
    for label, values in table.footer_rows:
        ascii_vals = [v.replace(MINUS, "-").replace(",", "") for v in values]
        lines.append(",".join([_csv_quote(label)] + [_csv_quote(v) for v in ascii_vals]))
    for label, marks in table.check_rows:
        lines.append(",".join([_csv_quote(label)] + ["yes" if m else "" for m in marks]))
    return "\n".join(lines) + "\n"
