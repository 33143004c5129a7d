from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InsufficientDraws
from .config import ChainConfig
from .diagnostics import MIN_KEEP, ess, split_rhat

RHAT_LIMIT = 1.05


@dataclass
class PosteriorDraws:
    """Kept draws, one array per named block.

    ``samples[name]`` has shape ``(keep, chains)`` for scalars and
    ``(keep, chains, m)`` for vector blocks, whose components are named by
    ``labels[name]``. Diagnostics are filled in on construction when there are
    at least two chains and ``MIN_KEEP`` draws.
    """

    samples: dict[str, np.ndarray]
    labels: dict[str, tuple[str, ...]]
    acceptance: dict[str, np.ndarray]
    config: ChainConfig
    metadata: dict = field(default_factory=dict)
    diagnostics: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        for arr in self.samples.values():
            arr.setflags(write=False)
        if not self.diagnostics and self.config.chains >= 2 and self.config.keep >= MIN_KEEP:
            self.diagnostics = {
                name: (split_rhat(m), ess(m)) for name, m in self.matrices().items()
            }
        if self.diagnostics:
            worst = max(self.diagnostics.items(), key=lambda kv: kv[1][0])
            self.metadata["max_rhat"] = worst[1][0]
            self.metadata["max_rhat_parameter"] = worst[0]
            self.metadata["converged"] = bool(worst[1][0] <= RHAT_LIMIT)
        else:
            self.metadata.setdefault("converged", None)

    @property
    def converged(self) -> bool | None:
        return self.metadata.get("converged")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.samples[name]

    def pooled(self, name: str) -> np.ndarray:
        """Draws with chains concatenated: ``(keep * chains,)`` or ``(keep * chains, m)``."""
        arr = self.samples[name]
        # chain-major order so chain 0's draws come first
        arr = np.swapaxes(arr, 0, 1)
        return arr.reshape((-1,) + arr.shape[2:])

    def matrices(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.samples.items():
            if arr.ndim == 2:
                out[name] = arr
            else:
                for j, label in enumerate(self.labels[name]):
                    out[f"{name}[{label}]"] = arr[:, :, j]
        return out

    def require_diagnostics(self):
        if not self.diagnostics:
            raise InsufficientDraws(
                f"diagnostics need >= 2 chains and >= {MIN_KEEP} kept draws "
                f"(have {self.config.chains} x {self.config.keep})"
            )
        return self.diagnostics

    def summary(self) -> dict:
        """Per-scalar mean, median, 2.5/97.5 percentiles, R-hat and ESS."""
        out = {}
        for name, mat in self.matrices().items():
            flat = mat.ravel()
            q = np.percentile(flat, [2.5, 50, 97.5])
            entry = {
                "mean": float(flat.mean()),
                "median": float(q[1]),
                "p2.5": float(q[0]),
                "p97.5": float(q[2]),
            }
            if name in self.diagnostics:
                entry["rhat"], entry["ess"] = map(float, self.diagnostics[name])
            out[name] = entry
        return out

    def write_csv(self, path) -> None:
        """Flat long format: chain, iteration, parameter, value."""
        mats = self.matrices()
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain", "iteration", "parameter", "value"])
            for c in range(self.config.chains):
                for it in range(self.config.keep):
                    for name, mat in mats.items():
                        w.writerow([c, it, name, repr(float(mat[it, c]))])

    def write_summary_json(self, path) -> None:
        payload = {
            "config": self.config.to_json(),
            "metadata": self.metadata,
            "acceptance": {k: np.asarray(v).tolist() for k, v in self.acceptance.items()},
            "parameters": self.summary(),
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")
