#!/usr/bin/env python3
"""
Run Directory Writer

All files of a run directory go through one RunWriter, which serializes
writes with a lock so concurrent chains can share it. Floats are written
with repr() so re-running a manifest reproduces trace files byte for byte.
"""

import csv
import json
import os
import platform
import threading
from datetime import datetime
from importlib.metadata import version
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import scipy

TRACE_COLUMNS = ['step', 'W', 'energy', 'accepted']
DIRECT_TRACE_COLUMNS = ['step', 'energy']


def _cell(value: Any) -> Any:
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    if value is None:
        return ''
    return value


class ChainOutput:
    """Trace sink for one chain: trace.csv plus thinned samples.jsonl."""

    def __init__(self, writer: 'RunWriter', subdir: str, direct: bool = False):
        self.writer = writer
        self.direct = direct
        self.subdir = subdir
        os.makedirs(writer.path(subdir), exist_ok=True)
        self._trace = open(writer.path(subdir, 'trace.csv'), 'w', newline='', encoding='utf-8')
        self._samples = open(writer.path(subdir, 'samples.jsonl'), 'w', encoding='utf-8')
        self._csv = csv.writer(self._trace)
        self._csv.writerow(DIRECT_TRACE_COLUMNS if direct else TRACE_COLUMNS)
        self.closed = False

    def write_step(self, step: int, work: float, energy: float, accepted: bool) -> None:
        row = [step, energy] if self.direct else [step, work, energy, accepted]
        with self.writer.lock:
            self._csv.writerow([_cell(v) for v in row])

    def write_sample(self, step: int, x: np.ndarray) -> None:
        line = json.dumps({'step': int(step), 'x': [float(v) for v in x]})
        with self.writer.lock:
            self._samples.write(line + '\n')

    def close(self) -> None:
        if self.closed:
            return
        with self.writer.lock:
            self._trace.close()
            self._samples.close()
        self.closed = True


class RunWriter:
    """Single writer for one run directory."""

    def __init__(self, out_dir: str, verbose: bool = False):
        self.out_dir = out_dir
        self.verbose = verbose
        self.lock = threading.Lock()
        self.written: List[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, *parts: str) -> str:
        return os.path.join(self.out_dir, *parts)

    def _track(self, path: str) -> None:
        self.written.append(os.path.relpath(path, self.out_dir))
        if self.verbose:
            print(f"✓ Wrote {path}")

    def register(self, *names: str) -> None:
        """Record files written through other means (e.g. chain sinks) for the manifest."""
        self.written.extend(names)

    def _ensure_parent(self, path: str) -> None:
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)

    def write_json(self, name: str, data: Any, indent: Optional[int] = 2) -> str:
        path = self.path(name)
        with self.lock:
            self._ensure_parent(path)
            with open(path, 'w', encoding='utf-8') as handle:
                json.dump(data, handle, indent=indent, sort_keys=True)
                handle.write('\n')
        self._track(path)
        return path

    def write_text(self, name: str, text: str) -> str:
        path = self.path(name)
        with self.lock:
            self._ensure_parent(path)
            with open(path, 'w', encoding='utf-8') as handle:
                handle.write(text)
        self._track(path)
        return path

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
        path = self.path(name)
        with self.lock:
            self._ensure_parent(path)
            with open(path, 'w', newline='', encoding='utf-8') as handle:
                writer = csv.writer(handle)
                writer.writerow(header)
                for row in rows:
                    writer.writerow([_cell(v) for v in row])
        self._track(path)
        return path

    def append_jsonl(self, name: str, record: Dict[str, Any]) -> str:
        path = self.path(name)
        with self.lock:
            self._ensure_parent(path)
            with open(path, 'a', encoding='utf-8') as handle:
                handle.write(json.dumps(record) + '\n')
        return path

    def chain_output(self, chain_index: int, direct: bool = False) -> ChainOutput:
        return ChainOutput(self, f"chain_{chain_index}", direct=direct)

    def write_resolved_config(self, config_dict: Dict[str, Any]) -> str:
        return self.write_json('resolved_config.json', config_dict)

    def write_histogram(self, name: str, histogram) -> str:
        return self.write_csv(name, ['bin_lo', 'bin_hi', 'count'], histogram.to_rows())

    def write_running_mean(self, name: str, series: Sequence[float]) -> str:
        return self.write_csv(name, ['step', 'mean_energy'], enumerate(series))

    def write_cost_table(self, name: str, rows: List[Dict[str, Any]]) -> str:
        header = ['method', 'dim', 'median_s', 'ratio_vs_fp']
        if any('training_time_s' in row for row in rows):
            header.append('training_time_s')
        return self.write_csv(name, header, ([row.get(key) for key in header] for row in rows))

    def write_manifest(self, command: str, seed: int, config_dict: Optional[Dict[str, Any]] = None,
                       extra: Optional[Dict[str, Any]] = None) -> str:
        manifest = {
            'command': command,
            'seed': seed,
            'created': datetime.now().strftime('%Y-%m-%d %H:%M:%S'),
            'versions': package_versions(),
            'files': sorted(set(self.written)),
        }
        if config_dict is not None:
            manifest['config'] = config_dict
        if extra:
            manifest.update(extra)
        return self.write_json('manifest.json', manifest)


def package_versions() -> Dict[str, str]:
    return {
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'jinja2': version('Jinja2'),
    }
