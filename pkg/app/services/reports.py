"""
Drop-rate sweeps over the validation streams.

Every (policy, rate) cell sees the same per-stream schedules, so differences
between policies are paired. Streams run in a thread pool; results are folded
in stream-id order so reports are byte-stable.
"""

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from app.config import RunConfig, resolve_threads
from app.errors import MissingArtifactError
from app.pipeline import EvalOptions, InferenceResult, Policy, load_policy_params, parse_policy, run_inference
from app.services.detector import F1Counts, f1_counts
from app.services.pgm import write_pgm
from app.services.streams import MODALITIES, DropSchedule, Modality, Stream, gen_drop_schedule, schedule_seed
from app.services.ucf import export_uncertainty_pgm

logger = logging.getLogger(__name__)

StatusFn = Callable[[str], None]

CSV_COLUMNS = ["policy", "drop_rate", "mse_img", "mse_pts", "f1", "f1_bothdrop", "seconds"]
SINGLE_CSV_COLUMNS = ["absent", "policy", "drop_rate", "mse_img", "mse_pts", "f1", "seconds"]
SINGLE_MODALITY_POLICIES = (Policy.ZERO_FILL, Policy.HFP)


@dataclass
class SweepRow:
    policy: str
    drop_rate: float
    mse_img: float
    mse_pts: float
    f1: float
    f1_bothdrop: Optional[float]
    seconds: Optional[float]
    absent: Optional[str] = None


@dataclass
class SweepReport:
    rows: List[SweepRow]
    config: Dict[str, object]

    def frame(self, columns: Sequence[str] = CSV_COLUMNS) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=list(columns))

    def row(self, policy: str, rate: float) -> SweepRow:
        for r in self.rows:
            if r.policy == policy and abs(r.drop_rate - rate) < 1e-12:
                return r
        raise KeyError(f"no row for ({policy}, {rate})")


def eval_options(cfg: RunConfig) -> EvalOptions:
    return EvalOptions(
        tau=cfg.membank.tau,
        use_uncertainty=cfg.ucf.use_uncertainty,
        fuse_when=cfg.ucf.fuse_when,
        fuse_live=cfg.ucf.fuse_live,
        kalman_q=cfg.eval.kalman_q,
        kalman_r=cfg.eval.kalman_r,
    )


def paired_schedule(cfg: RunConfig, stream: Stream, rate_img: float, rate_pts: float) -> DropSchedule:
    return gen_drop_schedule(
        schedule_seed(cfg.eval.schedule_seed, stream.stream_id), stream.horizon, rate_img, rate_pts,
        cfg.eval.drop_mode, cfg.eval.burst_stay,
    )


def without(schedule: DropSchedule, modality: Modality) -> DropSchedule:
    """Same schedule with ``modality`` absent on every frame."""
    available = schedule.available.copy()
    available[:, modality.index] = False
    rates = {Modality.IMG: schedule.rate_img, Modality.PTS: schedule.rate_pts}
    rates[modality] = 1.0
    return DropSchedule(schedule.T, rates[Modality.IMG], rates[Modality.PTS], schedule.seed, available, schedule.mode)


def _run_all(
    streams: Sequence[Stream],
    schedules: Sequence[DropSchedule],
    policy: Policy,
    params: Mapping[str, np.ndarray],
    options: EvalOptions,
) -> List[InferenceResult]:
    def one(i: int) -> InferenceResult:
        return run_inference(streams[i], schedules[i], policy, params, options)

    with ThreadPoolExecutor(max_workers=min(resolve_threads(), max(1, len(streams)))) as pool:
        return list(pool.map(one, range(len(streams))))


def aggregate(
    results: Sequence[InferenceResult],
    streams: Sequence[Stream],
    policy: Policy,
    rate: float,
    threshold: float,
    seconds: Optional[float] = None,
) -> SweepRow:
    """Pooled F1 over all frames, pooled F1 over both-drop frames, MSE averaged over missing frames."""
    counts, both = F1Counts(), F1Counts()
    any_both = False
    mse_sum = {m: 0.0 for m in MODALITIES}
    mse_n = {m: 0 for m in MODALITIES}
    by_id = {s.stream_id: s for s in streams}
    for result in results:
        stream = by_id[result.stream_id]
        for frame in result.frames:
            c = f1_counts(frame.detection, stream.target(frame.t), threshold)
            counts = counts + c
            if frame.both_dropped:
                both = both + c
                any_both = True
            for m, value in frame.mse.items():
                mse_sum[m] += value
                mse_n[m] += 1
    mse = {m: mse_sum[m] / mse_n[m] if mse_n[m] else 0.0 for m in MODALITIES}
    return SweepRow(policy.value, float(rate), mse[Modality.IMG], mse[Modality.PTS], counts.f1,
                    both.f1 if any_both else None, seconds)


def write_heatmaps(
    results: Sequence[InferenceResult],
    heatmap_dir: str,
    n_streams: int,
    n_frames: int,
) -> List[str]:
    """Per-cell MSE maps for the first ``n_frames`` missing frames of the first ``n_streams`` streams."""
    written: List[str] = []
    for result in results[:n_streams]:
        for m in MODALITIES:
            frames = [f for f in result.frames if m in f.cell_mse][:n_frames]
            for frame in frames:
                name = f"{result.stream_id}_{frame.t}_{m.value}_{result.policy.slug}.pgm"
                path = os.path.join(heatmap_dir, name)
                write_pgm(path, frame.cell_mse[m][0], meta={"policy": result.policy.value, "mse": frame.mse[m]})
                written.append(path)
                if m in frame.uncertainty:
                    u_path = os.path.join(heatmap_dir, "uncertainty", name)
                    export_uncertainty_pgm(frame.uncertainty[m], u_path)
                    written.append(u_path)
    return written


def evaluate(
    cfg: RunConfig,
    streams: Sequence[Stream],
    policy: Policy,
    rate: float,
    checkpoint_dir: str,
    heatmap_dir: Optional[str] = None,
    params: Optional[Mapping[str, np.ndarray]] = None,
) -> SweepRow:
    """One (policy, rate) cell over ``streams``."""
    policy = parse_policy(policy) if isinstance(policy, str) else policy
    if params is None:
        params = load_policy_params(checkpoint_dir, policy)
    schedules = [paired_schedule(cfg, s, rate, rate) for s in streams]
    start = time.perf_counter()
    results = _run_all(streams, schedules, policy, params, eval_options(cfg))
    elapsed = time.perf_counter() - start
    row = aggregate(results, streams, policy, rate, cfg.eval.threshold, elapsed if cfg.eval.timing else None)
    if heatmap_dir is not None:
        write_heatmaps(results, heatmap_dir, cfg.eval.heatmap_streams, cfg.eval.heatmap_frames)
    logger.info("%s @ %.2f: f1=%.4f mse_img=%.5f mse_pts=%.5f", policy.value, rate, row.f1, row.mse_img, row.mse_pts)
    return row


def _load_all(checkpoint_dir: str, policies: Sequence[Policy]) -> Dict[Policy, Dict[str, np.ndarray]]:
    """Load every needed checkpoint up front so a missing one fails before any work."""
    loaded: Dict[str, Dict[str, np.ndarray]] = {}
    out: Dict[Policy, Dict[str, np.ndarray]] = {}
    for policy in policies:
        if policy.checkpoint not in loaded:
            loaded[policy.checkpoint] = load_policy_params(checkpoint_dir, policy)
        out[policy] = loaded[policy.checkpoint]
    return out


def sweep(
    cfg: RunConfig,
    streams: Sequence[Stream],
    checkpoint_dir: str,
    heatmap_dir: Optional[str] = None,
    progress: bool = True,
    status_cb: Optional[StatusFn] = None,
) -> SweepReport:
    policies = [parse_policy(p) for p in cfg.eval.policy_list]
    params = _load_all(checkpoint_dir, policies)
    rows: List[SweepRow] = []
    cells = [(p, r) for p in policies for r in cfg.eval.rate_list]
    for policy, rate in tqdm(cells, desc="sweep", disable=not progress):
        heatmaps = heatmap_dir if heatmap_dir and abs(rate - cfg.eval.heatmap_rate) < 1e-12 else None
        rows.append(evaluate(cfg, streams, policy, rate, checkpoint_dir, heatmaps, params[policy]))
        if status_cb:
            status_cb(f"sweep: {policy.value} @ {rate:g} done")
    return SweepReport(rows, cfg.to_flat())


def sweep_single_modality(
    cfg: RunConfig,
    streams: Sequence[Stream],
    checkpoint_dir: str,
    progress: bool = True,
) -> SweepReport:
    """One modality absent throughout, the other dropped at each rate; ZeroFill against HFP."""
    params = _load_all(checkpoint_dir, SINGLE_MODALITY_POLICIES)
    options = eval_options(cfg)
    rows: List[SweepRow] = []
    cells = [(a, p, r) for a in MODALITIES for p in SINGLE_MODALITY_POLICIES for r in cfg.eval.rate_list]
    for absent, policy, rate in tqdm(cells, desc="single-modality sweep", disable=not progress):
        rates = {absent: 0.0, absent.other: rate}
        schedules = [without(paired_schedule(cfg, s, rates[Modality.IMG], rates[Modality.PTS]), absent)
                     for s in streams]
        start = time.perf_counter()
        results = _run_all(streams, schedules, policy, params[policy], options)
        elapsed = time.perf_counter() - start
        row = aggregate(results, streams, policy, rate, cfg.eval.threshold, elapsed if cfg.eval.timing else None)
        row.absent = absent.value
        rows.append(row)
    return SweepReport(rows, cfg.to_flat())


def write_report(report: SweepReport, out_dir: str, stem: str = "report", columns: Sequence[str] = CSV_COLUMNS) -> Dict[str, str]:
    """``<stem>.csv`` plus ``<stem>.json`` (rows and config echo); returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    report.frame(columns).to_csv(csv_path, index=False, float_format="%.8g", lineterminator="\n")
    payload = {"rows": [{k: getattr(r, k) for k in columns} for r in report.rows], "config": report.config}
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    logger.info("Wrote %s and %s", csv_path, json_path)
    return {"csv": csv_path, "json": json_path}


def load_report(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise MissingArtifactError(f"report not found: {path}")
    return pd.read_csv(path)
