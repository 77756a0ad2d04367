"""
Run Artifact Persistence
Reads and writes checkpoints, metrics logs, sample dumps, datasets and reports.
"""

import csv
import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
from loguru import logger

from src.core.tensor import DTYPE
from src.errors import ConfigurationError, ShapeError
from src.evaluation.metrics import HistDensity
from src.training.checkpoint import Checkpoint

METRICS_COLUMNS = ["step", "total", "cmfm", "nll", "guidance_reg", "rl", "lr", "grad_norm"]


def _ensure_parent(path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


class CheckpointStore:
    """Checkpoint JSON documents"""

    @staticmethod
    def save(path: Path, checkpoint: Checkpoint) -> Path:
        """
        Write a checkpoint as a single JSON document

        Args:
            path: Destination file
            checkpoint: State to persist

        Returns:
            The written path
        """
        path = _ensure_parent(path)
        path.write_text(json.dumps(checkpoint.to_dict()))
        logger.info(f"💾 Checkpoint (step {checkpoint.step}) written to {path}")
        return path

    @staticmethod
    def load(path: Path) -> Checkpoint:
        """
        Read a checkpoint

        Raises:
            ConfigurationError: missing or unreadable file
        """
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"checkpoint not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"checkpoint {path} is not valid JSON: {e}") from e
        return Checkpoint.from_dict(data)


class MetricsLog:
    """Append-only CSV of per-step loss components"""

    def __init__(self, path: Path, append: bool = False):
        self.path = _ensure_parent(path)
        fresh = not (append and self.path.exists())
        self._file = open(self.path, "w" if fresh else "a", newline="")
        self._writer = csv.DictWriter(self._file, fieldnames=METRICS_COLUMNS)
        if fresh:
            self._writer.writeheader()

    def append(self, row: Dict[str, float]):
        self._writer.writerow({k: row[k] for k in METRICS_COLUMNS})
        self._file.flush()

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc):
        self.close()

    @staticmethod
    def read(path: Path) -> List[Dict[str, float]]:
        with open(path, newline="") as f:
            return [
                {k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)
            ]


class SampleStore:
    """Sample dumps: '#'-prefixed provenance lines, then x_1..x_d (and c_1..c_k) columns"""

    @staticmethod
    def save(
        path: Path,
        samples: torch.Tensor,
        provenance: Dict[str, object],
        contexts: Optional[torch.Tensor] = None,
    ) -> Path:
        path = _ensure_parent(path)
        columns = [f"x_{i + 1}" for i in range(samples.shape[1])]
        rows = samples.detach().numpy()
        if contexts is not None:
            if contexts.shape[0] != samples.shape[0]:
                raise ShapeError(f"{contexts.shape[0]} contexts for {samples.shape[0]} samples")
            columns += [f"c_{i + 1}" for i in range(contexts.shape[1])]
            rows = np.concatenate([rows, contexts.detach().numpy()], axis=1)

        with open(path, "w", newline="") as f:
            for key, value in provenance.items():
                f.write(f"# {key}: {json.dumps(value)}\n")
            writer = csv.writer(f)
            writer.writerow(columns)
            writer.writerows(rows.tolist())
        logger.info(f"🧾 {samples.shape[0]} samples written to {path}")
        return path

    @staticmethod
    def load(path: Path) -> Tuple[torch.Tensor, Optional[torch.Tensor], Dict[str, object]]:
        """
        Returns:
            (samples [n, d], contexts [n, k] or None, provenance)
        """
        provenance = {}
        with open(path, newline="") as f:
            lines = f.read().splitlines()
        body = []
        for line in lines:
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                provenance[key] = json.loads(value)
            else:
                body.append(line)
        reader = csv.reader(body)
        header = next(reader)
        values = np.array([[float(v) for v in row] for row in reader], dtype=np.float64)
        values = values.reshape(-1, len(header))
        n_x = sum(1 for h in header if h.startswith("x_"))
        samples = torch.as_tensor(values[:, :n_x], dtype=DTYPE)
        contexts = torch.as_tensor(values[:, n_x:], dtype=DTYPE) if n_x < len(header) else None
        return samples, contexts, provenance


class DatasetStore:
    """Dataset CSV plus a JSON sidecar (spec, normalization statistics)"""

    @staticmethod
    def save(path: Path, data: torch.Tensor, sidecar: dict) -> Path:
        path = _ensure_parent(path)
        np.savetxt(path, data.detach().numpy(), delimiter=",", fmt="%.17g")
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
        logger.info(f"📦 Dataset ({data.shape[0]} rows) written to {path}")
        return path

    @staticmethod
    def load(path: Path) -> Tuple[torch.Tensor, dict]:
        path = Path(path)
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        sidecar = json.loads(path.with_suffix(".json").read_text())
        return torch.as_tensor(data, dtype=DTYPE), sidecar


class ReportStore:
    """Evaluation reports and histogram dumps"""

    @staticmethod
    def save_report(path: Path, report: dict) -> Path:
        path = _ensure_parent(path)
        path.write_text(json.dumps(report, indent=2))
        logger.info(f"📊 Report written to {path}")
        return path

    @staticmethod
    def load_report(path: Path) -> dict:
        return json.loads(Path(path).read_text())

    @staticmethod
    def save_histogram(path: Path, p: HistDensity, q: HistDensity) -> Path:
        """
        One row per bin: bin centers, generated mass p, reference mass q

        Raises:
            ShapeError: p and q live on different grids
        """
        if not p.same_grid(q):
            raise ShapeError(f"histogram grids differ: {p.bounds}/{p.bins} vs {q.bounds}/{q.bins}")
        path = _ensure_parent(path)
        centers = np.meshgrid(*p.centers(), indexing="ij")
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([f"center_{i + 1}" for i in range(len(centers))] + ["p", "q"])
            for idx in np.ndindex(p.masses.shape):
                writer.writerow([float(c[idx]) for c in centers] + [float(p.masses[idx]), float(q.masses[idx])])
        return path

    @staticmethod
    def save_table(path: Path, columns: List[str], rows: Iterable[Dict[str, object]]) -> Path:
        path = _ensure_parent(path)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=columns)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row[k] for k in columns})
        return path
