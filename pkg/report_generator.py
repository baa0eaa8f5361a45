#!/usr/bin/env python3
"""
Report Generator

Renders markdown reports for sampling runs, sweeps and cost benchmarks from
the Jinja2 templates in templates/documents/.
"""

import os
from datetime import datetime
from typing import Any, Dict, List, Optional

from jinja2 import Environment, FileSystemLoader, select_autoescape


def _fmt(value: Any, digits: int = 4) -> str:
    if value is None:
        return '-'
    if isinstance(value, float):
        return f"{value:.{digits}g}"
    return str(value)


class ReportGenerator:
    def __init__(self, template_dir: Optional[str] = None, verbose: bool = False):
        """
        Args:
            template_dir: Directory holding the report templates (defaults to templates/documents)
            verbose: Print a status line per rendered report
        """
        self.verbose = verbose
        template_dir = template_dir or os.path.join(os.path.dirname(os.path.abspath(__file__)), 'templates', 'documents')
        self.jinja_env = Environment(
            loader=FileSystemLoader(template_dir),
            autoescape=select_autoescape(['html', 'xml']),
            trim_blocks=True,
            lstrip_blocks=True
        )
        self.jinja_env.filters['fmt'] = _fmt

    def _render(self, template_name: str, context: Dict[str, Any]) -> str:
        context = dict(context)
        context.setdefault('generation_timestamp', datetime.now().strftime('%Y-%m-%d %H:%M:%S'))
        text = self.jinja_env.get_template(template_name).render(context)
        if self.verbose:
            print(f"✓ Rendered {template_name}")
        return text

    def generate_run_report(self, title: str, method: str, chains: List[Dict[str, Any]],
                            oracle: Optional[Dict[str, Any]] = None,
                            histogram_rows: Optional[List] = None,
                            mode_occupancy: Optional[List[float]] = None,
                            work_stats: Optional[Dict[str, Any]] = None,
                            training: Optional[Dict[str, Any]] = None) -> str:
        """
        Args:
            chains: One summary dict per chain (ChainTrace.summary() plus 'ess')
            oracle: {'mean_energy', 'se', 'n'} from exact target samples
            histogram_rows: (bin_lo, bin_hi, count) rows of the pooled energy histogram
        """
        return self._render('run_report.md', {
            'title': title,
            'method': method,
            'chains': chains,
            'oracle': oracle,
            'histogram_rows': histogram_rows or [],
            'mode_occupancy': list(enumerate(mode_occupancy)) if mode_occupancy is not None else [],
            'work_stats': work_stats,
            'training': training,
        })

    def generate_sweep_report(self, title: str, axis: str, cells: List[Dict[str, Any]],
                              oracle: Optional[Dict[str, Any]] = None) -> str:
        return self._render('sweep_report.md', {
            'title': title,
            'axis': axis,
            'cells': cells,
            'oracle': oracle,
            'failed': [cell for cell in cells if cell.get('status') == 'failed'],
        })

    def generate_bench_report(self, title: str, rows: List[Dict[str, Any]], cost_model: str) -> str:
        return self._render('bench_report.md', {
            'title': title,
            'rows': [dict(row, training_time_s=row.get('training_time_s')) for row in rows],
            'cost_model': cost_model,
            'show_training': any('training_time_s' in row for row in rows),
        })
