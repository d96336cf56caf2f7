from typing import Dict, Optional, Sequence, Tuple

from openpyxl import Workbook
from openpyxl.formatting.rule import FormulaRule
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter

from lib.errors import OutputIoError

SHEETNAME_MAXLEN = 31
SUMMARY_SHEETNAME = "Summary"
FLAG_FILL = "F8CBAD"  # light red


def sanitize_sheet_name(name: str) -> str:
    # Excel sheet name restrictions
    invalid = set('[]:*?/\\')
    cleaned = ''.join(c if c not in invalid else '_' for c in name)
    return cleaned[:SHEETNAME_MAXLEN] or "Sheet"


def apply_header_and_column_widths(ws, headers, column_widths=None, freeze_panes_cell: Optional[str] = "A2"):
    """Bold gray header row, frozen panes and per-column widths (list matching headers)."""
    fill = PatternFill("solid", fgColor="DDDDDD")
    for col_idx, _ in enumerate(headers, start=1):
        cell = ws.cell(row=1, column=col_idx)
        cell.font = Font(bold=True)
        cell.fill = fill
        cell.alignment = Alignment(vertical="top", wrap_text=True)
    if freeze_panes_cell:
        ws.freeze_panes = freeze_panes_cell
    for idx, width in enumerate(column_widths or (), start=1):
        if width is not None:
            ws.column_dimensions[get_column_letter(idx)].width = width


def apply_flag_highlighting(ws, first_col: int, last_col: int) -> None:
    """Highlight flagged (1) cells of the given column span."""
    max_row = ws.max_row or 1
    if max_row < 2 or last_col < first_col:
        return
    start = f"{get_column_letter(first_col)}2"
    cell_range = f"{start}:{get_column_letter(last_col)}{max_row}"
    fill = PatternFill(fill_type="solid", start_color=FLAG_FILL, end_color=FLAG_FILL)
    # relative formula anchored on the top-left cell of the range
    ws.conditional_formatting.add(cell_range, FormulaRule(formula=[f"{start}=1"], fill=fill, stopIfTrue=False))


def _unique_sheet_name(wb, base: str) -> str:
    name = sanitize_sheet_name(base)
    existing = set(wb.sheetnames)
    suffix = 1
    while name in existing:
        name = sanitize_sheet_name(f"{base}_{suffix}")
        suffix += 1
    return name


def add_table_sheet(wb, title: str, header: Sequence[str], rows, column_widths=None):
    ws = wb.create_sheet(title=_unique_sheet_name(wb, title))
    ws.append(list(header))
    apply_header_and_column_widths(ws, header, column_widths)
    for row in rows:
        ws.append(list(row))
    return ws


def write_comparison_workbook(path: str, summary: Tuple[Sequence[str], list],
                              timelines: Dict[str, Tuple[Sequence[str], list]], flag_columns: int = 6) -> None:
    """Summary sheet plus one flag-timeline sheet per method.

    Timeline rows end with `flag_columns` 0/1 cells, which get highlighted.
    """
    wb = Workbook()
    wb.remove(wb.active)
    header, rows = summary
    add_table_sheet(wb, SUMMARY_SHEETNAME, header, rows, [20] + [14] * (len(header) - 1))
    for method, (header, rows) in timelines.items():
        ws = add_table_sheet(wb, method, header, rows, [10] * len(header))
        apply_flag_highlighting(ws, len(header) - flag_columns + 1, len(header))
    try:
        wb.save(path)
    except OSError as e:
        raise OutputIoError(f"Cannot write {path}: {e}") from e
