"""Resolution / window / pruning-ratio sweeps emitting one CSV row per point."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Optional, Sequence

import numpy as np

from .cost import predict
from .vit import Mode, Model

MODES = ("vanilla", "sparse", "sparse-prune")


@dataclass
class BenchRecord:
    resolution: int
    mode: str
    window: Optional[int]
    prune_ratio: Optional[float]
    prune_layer: Optional[int]
    token_count: int
    wall_time_seconds: Optional[float]
    accounted_peak_bytes: Optional[int]
    attention_peak_bytes: Optional[int]
    predicted_peak_bytes: int
    predicted_cells: int
    run_seed: int
    status: str = "ok"


FIELDS = tuple(f.name for f in fields(BenchRecord))


@dataclass
class SweepSpec:
    resolutions: Sequence[int] = (224, 448, 896)
    modes: Sequence[str] = MODES
    windows: Sequence[int] = (2, 8, 16, 64)
    ratios: Sequence[float] = (0.4, 0.5, 0.6, 0.7, 0.8)
    prune_layer: int = 4
    repetitions: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("resolutions", "modes", "windows", "ratios"):
            if not len(getattr(self, name)):
                raise ValueError(f"sweep needs at least one entry in {name}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        unknown = set(self.modes) - set(MODES)
        if unknown:
            raise ValueError(f"unknown modes {sorted(unknown)}")

    def points(self) -> Iterator[tuple[int, Mode]]:
        for res in self.resolutions:
            for name in self.modes:
                if name == "vanilla":
                    yield res, Mode.vanilla()
                elif name == "sparse":
                    for w in self.windows:
                        yield res, Mode.sparse(w)
                else:
                    for w in self.windows:
                        for p in self.ratios:
                            yield res, Mode.sparse_prune(w, p, self.prune_layer)


def sweep_image(resolution: int, seed: int) -> np.ndarray:
    """Deterministic synthetic input for one sweep resolution."""
    rng = np.random.default_rng([seed, resolution])
    return rng.standard_normal((resolution, resolution, 3)).astype(np.float32)


def run_point(
    model: Model, resolution: int, mode: Mode, repetitions: int = 1, seed: int = 0,
    budget_bytes: Optional[int] = None,
) -> BenchRecord:
    cfg = model.cfg
    estimate = predict(cfg, resolution, mode)
    record = BenchRecord(
        resolution=resolution,
        mode=mode.name,
        window=mode.window,
        prune_ratio=None if mode.prune is None else mode.prune.ratio,
        prune_layer=None if mode.prune is None else mode.prune.layer,
        token_count=estimate.tokens_before,
        wall_time_seconds=None,
        accounted_peak_bytes=None,
        attention_peak_bytes=None,
        predicted_peak_bytes=estimate.predicted_peak_bytes,
        predicted_cells=estimate.total_cells,
        run_seed=seed,
    )
    if budget_bytes is not None and estimate.total_bytes > budget_bytes:
        record.status = "oom"
        return record

    image = sweep_image(resolution, seed)
    times, out = [], None
    try:
        for _ in range(repetitions):
            run = model.forward(image, mode)
            if out is not None and run.peak_bytes != out.peak_bytes:
                raise RuntimeError("allocation accounting is not deterministic")
            out = run
            times.append(run.wall_time)
    except MemoryError:
        record.status = "oom"
        return record

    exact = predict(cfg, resolution, mode, kept=out.surviving_token_indices if mode.prune else None)
    record.wall_time_seconds = statistics.median(times)
    record.accounted_peak_bytes = out.peak_bytes
    record.attention_peak_bytes = out.attention_peak_bytes
    record.predicted_cells = exact.total_cells
    return record


def run_sweep(model: Model, spec: SweepSpec, budget_bytes: Optional[int] = None) -> list[BenchRecord]:
    # points run sequentially so timings do not interfere
    return [
        run_point(model, res, mode, spec.repetitions, spec.seed, budget_bytes)
        for res, mode in spec.points()
    ]


def records_to_csv(records: Sequence[BenchRecord]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=FIELDS, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow({k: ("" if v is None else v) for k, v in asdict(rec).items()})
    return buf.getvalue()


def records_from_csv(text: str) -> list[BenchRecord]:
    ints = {"resolution", "window", "prune_layer", "token_count", "accounted_peak_bytes",
            "attention_peak_bytes", "predicted_peak_bytes", "predicted_cells", "run_seed"}
    floats = {"prune_ratio", "wall_time_seconds"}
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        kwargs = {}
        for key, value in row.items():
            if value == "":
                kwargs[key] = None
            elif key in ints:
                kwargs[key] = int(value)
            elif key in floats:
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        out.append(BenchRecord(**kwargs))
    return out
