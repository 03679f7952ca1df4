"""Experiment assembly and result files.

CSV headers (column order is stable):

* ``rounds.csv``: ``round,client_id,task,metric,value``
* ``summary.csv``: ``task,metric,mean,std`` over the final round's participants
* ``sweep.csv``: ``axis_value,task,metric,final_value``
* ``ablation.csv``: ``variant,task,metric,final_value``
* ``spectrum.csv``: ``pair_id,modality_a,modality_b,same_modality,full_distance,lowpass_distance,ratio``
"""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .exceptions import ConfigError
from .federation import ClientData, Federation, RoundReport
from .models import layer_rng
from .spectral import attach_cell_codes, freqmix_batch, magnitude_spectrum, spectrum_distances
from .synthdata import Dataset, cross_modality_pairs, dirichlet_partition, make_dataset, modality_partition

log = logging.getLogger(__name__)

ROUNDS_HEADER = ("round", "client_id", "task", "metric", "value")
SUMMARY_HEADER = ("task", "metric", "mean", "std")
SWEEP_HEADER = ("axis_value", "task", "metric", "final_value")
ABLATION_HEADER = ("variant", "task", "metric", "final_value")
SPECTRUM_HEADER = ("pair_id", "modality_a", "modality_b", "same_modality", "full_distance",
                   "lowpass_distance", "ratio")

ABLATIONS = {
    "full": {},
    "wo_gskr": {"model": {"retrieval": "mean"}},
    "wo_eca": {"model": {"fusion": "film"}},
    "wo_psp": {"model": {"prompting": "projection"}},
    "wo_spalign": {"federation": {"lambda": 0.0}},
}
SWEEP_AXES = ("lambda", "top_k")
FEDAVG_DEGENERATE = {"model": {"fusion": "film", "prompting": "projection", "identity_standins": True},
                     "federation": {"lambda": 0.0}}


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    for section, values in overrides.items():
        cfg = cfg.updated(section, **values)
    return cfg


def partition(cfg: ExperimentConfig, dataset: Dataset) -> list[np.ndarray]:
    part = cfg.data.partition
    k = cfg.federation.num_clients
    if part["mode"] == "dirichlet":
        return dirichlet_partition(dataset.labels, k, part["gamma"], layer_rng(cfg.seed, "partition"))
    return modality_partition(dataset.modalities, k, part["mode"], part.get("overlap", 0.5))


def build_federation(cfg: ExperimentConfig, dataset: Dataset | None = None) -> Federation:
    d = cfg.data
    if dataset is None:
        dataset = make_dataset(d.num_samples, d.image_size, d.num_classes, d.num_modalities, cfg.seed)
    x, y = dataset.inputs_targets(d.task, d.sr_scale)
    m = cfg.model
    desc = attach_cell_codes(freqmix_batch(x, m.cutoff, m.bands, m.sectors), m.bands, m.sectors)
    shards = partition(cfg, dataset)
    client_data, mixes = [], []
    for cid, shard in enumerate(shards):
        order = shard[layer_rng(cfg.seed, "split", cid).permutation(len(shard))]
        n_test = int(round(d.test_fraction * len(order)))
        n_test = min(max(n_test, 1 if len(order) > 1 else 0), len(order) - 1)
        test, train = order[:n_test], order[n_test:]
        if n_test == 0:
            test = train
        client_data.append(ClientData(x[train], y[train], desc[train], x[test], y[test], desc[test]))
        mods, counts = np.unique(dataset.modalities[shard], return_counts=True)
        mixes.append({int(a): int(b) for a, b in zip(mods, counts)})
    return Federation.from_client_data(m, cfg.federation, client_data, shards, mixes)


@dataclass
class RunResult:
    reports: list[RoundReport]
    federation: Federation
    task: str

    def final_values(self) -> dict[str, float]:
        """Per-metric mean over the last round's participants."""
        return final_values(self.reports)


def final_values(reports: Sequence[RoundReport]) -> dict[str, float]:
    if not reports:
        return {}
    by_metric: dict[str, list[float]] = defaultdict(list)
    for _, name, value in reports[-1].records:
        by_metric[name].append(value)
    return {name: float(np.mean(vals)) for name, vals in by_metric.items()}


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int = 1, resume=None) -> RunResult:
    fed = build_federation(cfg)
    if resume is not None:
        fed.restore(resume)
    reports = fed.run(workers=workers)
    for rep in reports:
        log.info("round %d: bank=%d participants=%s", rep.round, rep.bank_size, rep.participants)
    result = RunResult(reports, fed, cfg.data.task)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rounds_csv(reports, cfg.data.task, out / "rounds.csv")
        write_summary_csv(reports, cfg.data.task, out / "summary.csv")
        if cfg.output.curves:
            write_curves_svg(reports, cfg.data.task, out / "curves.svg")
        if cfg.output.checkpoint:
            fed.save(out / "checkpoint.bin")
    return result


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_rounds_csv(reports, task: str, path) -> None:
    rows = [(rep.round, cid, task, name, repr(float(value)))
            for rep in reports for cid, name, value in rep.records]
    _write_csv(path, ROUNDS_HEADER, rows)


def write_summary_csv(reports, task: str, path) -> None:
    rows = []
    if reports:
        by_metric: dict[str, list[float]] = defaultdict(list)
        for _, name, value in reports[-1].records:
            by_metric[name].append(value)
        for name, vals in by_metric.items():
            rows.append((task, name, repr(float(np.mean(vals))), repr(float(np.std(vals)))))
    _write_csv(path, SUMMARY_HEADER, rows)


def metric_curves(reports) -> dict[str, list[tuple[int, float]]]:
    curves: dict[str, list[tuple[int, float]]] = defaultdict(list)
    for rep in reports:
        by_metric: dict[str, list[float]] = defaultdict(list)
        for _, name, value in rep.records:
            by_metric[name].append(value)
        for name, vals in by_metric.items():
            curves[name].append((rep.round, float(np.mean(vals))))
    return dict(curves)


def write_curves_svg(reports, task: str, path, width: int = 640, height: int = 360) -> None:
    """One polyline per (task, metric), each scaled to its own range."""
    curves = metric_curves(reports)
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    pad = 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for i, (name, pts) in enumerate(sorted(curves.items())):
        xs = np.array([p[0] for p in pts], dtype=float)
        ys = np.array([p[1] for p in pts], dtype=float)
        xspan = max(xs.max() - xs.min(), 1.0)
        yspan = ys.max() - ys.min() or 1.0
        px = pad + (xs - xs.min()) / xspan * (width - 2 * pad)
        py = height - pad - (ys - ys.min()) / yspan * (height - 2 * pad)
        coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        color = palette[i % len(palette)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}">'
                     f'<title>{task}/{name}</title></polyline>')
        parts.append(f'<text x="{width - pad - 150}" y="{pad + 14 * i}" font-size="11" fill="{color}">'
                     f'{task}/{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def run_sweep(cfg: ExperimentConfig, axis: str, values: Sequence[float], out_dir=None, workers: int = 1):
    """One run per axis value on the shared seed; returns sweep rows."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}", "axis")
    rows = []
    for v in values:
        v = int(v) if axis == "top_k" else float(v)
        result = run_experiment(cfg.updated("federation", **{axis: v}), None, workers)
        for metric, value in result.final_values().items():
            rows.append((v, cfg.data.task, metric, value))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_csv(Path(out_dir) / "sweep.csv", SWEEP_HEADER,
                   [(v, t, m, repr(float(x))) for v, t, m, x in rows])
    return rows


def run_ablation(cfg: ExperimentConfig, out_dir=None, workers: int = 1):
    rows = []
    for variant, overrides in ABLATIONS.items():
        result = run_experiment(apply_overrides(cfg, overrides), None, workers)
        for metric, value in result.final_values().items():
            rows.append((variant, cfg.data.task, metric, value))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_csv(Path(out_dir) / "ablation.csv", ABLATION_HEADER,
                   [(v, t, m, repr(float(x))) for v, t, m, x in rows])
    return rows


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) 8-bit graymap, min-max scaled."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def run_spectrum_probe(cfg: ExperimentConfig, out_dir=None, pairs: int | None = None,
                       include_same: bool = False) -> tuple[list[tuple], float]:
    """Cross-modality (and optionally same-modality) spectral distance ratios."""
    d = cfg.data
    n = d.probe_pairs if pairs is None else pairs
    cutoff = cfg.model.cutoff
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    groups = [(False, cross_modality_pairs(n, d.image_size, d.num_classes, d.num_modalities, cfg.seed))]
    if include_same:
        groups.append((True, cross_modality_pairs(n, d.image_size, d.num_classes, d.num_modalities,
                                                  cfg.seed + 1, same_modality=True)))
    for same, gen in groups:
        for a, b, ma, mb in gen:
            pid = len(rows)
            full, low = spectrum_distances(a, b, cutoff)
            rows.append((pid, ma, mb, int(same), full, low, 0.0 if full == 0 else low / full))
            if out is not None:
                for tag, img in (("a", a), ("b", b)):
                    write_pgm(out / f"pair{pid:04d}_{tag}.pgm", np.log1p(magnitude_spectrum(img).magnitudes[0]))
    if out is not None:
        _write_csv(out / "spectrum.csv", SPECTRUM_HEADER,
                   [(p, a, b, s, repr(f), repr(lo), repr(r)) for p, a, b, s, f, lo, r in rows])
    cross = [r[-1] for r in rows if not r[3]]
    return rows, float(np.mean(cross)) if cross else float("nan")
