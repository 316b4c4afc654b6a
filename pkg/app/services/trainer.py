"""
Stage 0 detector pretraining and the two ModalPatch training stages.

- Stage 0 fits the detector on ground-truth features, then it stays frozen.
- Stage 1 trains ``hfp.*`` with L_TemPred + L_det; the detector sees the
  prediction for one randomly chosen modality and ground truth for the other.
- Stage 2 freezes ``hfp.*`` and trains ``ucf.*`` with L_Uncert + L_Fuse + L_det
  on the fused features of both modalities.

Banks are always filled from ground-truth features during training.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from app.config import RunConfig
from app.errors import TrainingError
from app.memory_bank import history_bank
from app.services import autodiff as ad
from app.services import hfp, ucf
from app.services.autodiff import Tensor
from app.services.detector import Detection, F1Counts, det_loss_tensor, detect_tensor, f1_counts, init_detector_params
from app.services.layers import to_tensors
from app.services.metrics import feature_mse, rank_correlation, squared_residual
from app.services.optim import AdamW, clip_by_global_norm
from app.services.streams import MODALITIES, Modality, Stream

logger = logging.getLogger(__name__)

StatusFn = Callable[[str], None]
LossFn = Callable[[Dict[str, Tensor], Stream, int, np.random.Generator], Tensor]

STAGE_SEEDS = {"det": 0, "hfp": 1, "ucf": 2}


@dataclass
class StageResult:
    """Cumulative parameters after a stage plus what the run manifest records."""

    stage: str
    params: Dict[str, np.ndarray]
    epoch_losses: List[float] = field(default_factory=list)
    metrics: Dict[str, float] = field(default_factory=dict)


def _rng(cfg: RunConfig, stage: str) -> np.random.Generator:
    return np.random.default_rng([cfg.train.seed, STAGE_SEEDS[stage]])


def _samples(streams: Sequence[Stream], first_frame: int) -> List[Tuple[int, int]]:
    return [(i, t) for i, s in enumerate(streams) for t in range(first_frame, s.horizon)]


def _batches(samples: List[Tuple[int, int]], batch_size: int, rng: np.random.Generator) -> Iterator[List[Tuple[int, int]]]:
    order = rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield [samples[k] for k in order[start:start + batch_size]]


def _run_epoch(
    stage: str,
    epoch: int,
    params: Dict[str, np.ndarray],
    trainable: str,
    optimizer: AdamW,
    streams: Sequence[Stream],
    samples: List[Tuple[int, int]],
    loss_fn: LossFn,
    cfg: RunConfig,
    rng: np.random.Generator,
    progress: bool,
) -> float:
    """One pass over ``samples``; returns the mean per-sample loss."""
    total = 0.0
    n_batches = (len(samples) + cfg.train.batch_size - 1) // cfg.train.batch_size
    bar = tqdm(_batches(samples, cfg.train.batch_size, rng), total=n_batches,
               desc=f"{stage} epoch {epoch + 1}", disable=not progress, leave=False)
    for batch_id, batch in enumerate(bar):
        grads: Dict[str, np.ndarray] = {}
        batch_loss = 0.0
        for stream_index, t in batch:
            tensors = to_tensors(params, trainable=(trainable,))
            loss = loss_fn(tensors, streams[stream_index], t, rng)
            value = float(loss.data.reshape(()))
            if not np.isfinite(value):
                raise TrainingError(
                    f"{stage}: non-finite loss in epoch {epoch + 1} batch {batch_id} "
                    f"(stream {streams[stream_index].stream_id}, frame {t})"
                )
            ad.backward(loss)
            for name, tensor in tensors.items():
                if tensor.grad is not None:
                    grads[name] = grads.get(name, 0.0) + tensor.grad
            batch_loss += value
        scale = 1.0 / len(batch)
        grads = clip_by_global_norm({k: g * scale for k, g in grads.items()}, cfg.train.clip_norm)
        optimizer.step(params, grads)
        total += batch_loss
        bar.set_postfix(loss=f"{batch_loss * scale:.4f}")
    return total / max(1, len(samples))


def _train(
    stage: str,
    params: Dict[str, np.ndarray],
    trainable: str,
    lr: float,
    epochs: int,
    streams: Sequence[Stream],
    first_frame: int,
    loss_fn: LossFn,
    cfg: RunConfig,
    rng: np.random.Generator,
    progress: bool,
    status_cb: Optional[StatusFn],
    after_epoch: Optional[Callable[[int], bool]] = None,
) -> List[float]:
    names = [n for n in params if n.startswith(trainable)]
    optimizer = AdamW(names, lr=lr, weight_decay=cfg.train.weight_decay)
    samples = _samples(streams, first_frame)
    if not samples:
        raise TrainingError(f"{stage}: no training samples (streams too short or empty corpus)")
    losses: List[float] = []
    for epoch in tqdm(range(epochs), desc=stage, disable=not progress):
        loss = _run_epoch(stage, epoch, params, trainable, optimizer, streams, samples, loss_fn, cfg, rng, progress)
        losses.append(loss)
        message = f"{stage}: epoch {epoch + 1}/{epochs} loss {loss:.6f}"
        logger.info(message)
        if status_cb:
            status_cb(message)
        if after_epoch is not None and after_epoch(epoch):
            break
    return losses


# ---------------------------------------------------------------------------
# Stage 0: detector
# ---------------------------------------------------------------------------

def detector_f1(params: Mapping[str, np.ndarray], streams: Sequence[Stream], threshold: float) -> float:
    """Pooled cell-level F1 of the detector on ground-truth features of every frame."""
    tensors = to_tensors(params)
    counts = F1Counts()
    for stream in streams:
        for t in range(stream.horizon):
            logits, offsets = detect_tensor(Tensor(stream.img[t]), Tensor(stream.pts[t]), tensors)
            counts = counts + f1_counts(Detection(logits.data, offsets.data), stream.target(t), threshold)
    return counts.f1


def pretrain_detector(
    cfg: RunConfig,
    train_streams: Sequence[Stream],
    val_streams: Sequence[Stream],
    progress: bool = True,
    status_cb: Optional[StatusFn] = None,
) -> StageResult:
    if not any(stream.target(t).occupancy.any() for stream in train_streams for t in range(stream.horizon)):
        raise TrainingError("pretrain: training corpus has no occupied cells (degenerate scenes)")
    rng = _rng(cfg, "det")
    s = cfg.streams
    params = init_detector_params(rng, s.d_img, s.d_pts, cfg.detector.hidden)

    def loss_fn(tensors, stream, t, _rng):
        return det_loss_tensor(*detect_tensor(Tensor(stream.img[t]), Tensor(stream.pts[t]), tensors), stream.target(t))

    history: List[float] = []

    def after_epoch(epoch: int) -> bool:
        f1 = detector_f1(params, val_streams, cfg.eval.threshold)
        history.append(f1)
        logger.info("pretrain: epoch %d validation F1 %.4f", epoch + 1, f1)
        return f1 >= cfg.train.det_target_f1

    losses = _train("pretrain", params, "det.", cfg.train.det_lr, cfg.train.det_epochs, train_streams, 0,
                    loss_fn, cfg, rng, progress, status_cb, after_epoch)
    f1 = history[-1]
    if f1 < cfg.train.det_min_f1:
        raise TrainingError(
            f"pretrain: validation F1 {f1:.3f} below floor {cfg.train.det_min_f1:.3f}; "
            "check the scene generator and detector settings"
        )
    return StageResult("det", params, losses, {"val_f1": f1, "epochs_run": float(len(losses))})


# ---------------------------------------------------------------------------
# Stage 1: history-based feature prediction
# ---------------------------------------------------------------------------

def _window(stream: Stream, modality: Modality, t: int, tau: int) -> List[np.ndarray]:
    return [f.data for f in history_bank(modality, stream.frames(modality), t, tau).window()]


def _predict_all(params: Mapping[str, np.ndarray], stream: Stream, t: int, tau: int) -> Dict[Modality, np.ndarray]:
    tensors = to_tensors(params)
    return {
        m: hfp.predict_tensor([Tensor(x) for x in _window(stream, m, t, tau)], tensors, m).data for m in MODALITIES
    }


def hfp_validation(params: Mapping[str, np.ndarray], streams: Sequence[Stream], tau: int) -> Dict[str, float]:
    """Mean feature MSE of HFP, copy-last and zero-fill per modality over frames t >= 1."""
    sums: Dict[str, float] = {}
    n = 0
    for stream in streams:
        for t in range(1, stream.horizon):
            predicted = _predict_all(params, stream, t, tau)
            n += 1
            for m in MODALITIES:
                truth = stream.frames(m)[t]
                for key, guess in (("hfp", predicted[m]), ("copy_last", stream.frames(m)[t - 1]),
                                   ("zero_fill", np.zeros_like(truth))):
                    name = f"mse_{key}_{m.value}"
                    sums[name] = sums.get(name, 0.0) + feature_mse(guess, truth).value
    return {k: v / max(1, n) for k, v in sums.items()}


def train_stage1(
    cfg: RunConfig,
    train_streams: Sequence[Stream],
    val_streams: Sequence[Stream],
    detector_params: Mapping[str, np.ndarray],
    progress: bool = True,
    status_cb: Optional[StatusFn] = None,
) -> StageResult:
    rng = _rng(cfg, "hfp")
    s, tau = cfg.streams, cfg.membank.tau
    params = {k: np.array(v) for k, v in detector_params.items() if k.startswith("det.")}
    params.update(hfp.init_all(rng, s.d_img, s.d_pts, s.height, s.width, tau, cfg.hfp.K))

    def loss_fn(tensors, stream, t, sample_rng):
        predicted = {m: hfp.predict_tensor([Tensor(x) for x in _window(stream, m, t, tau)], tensors, m)
                     for m in MODALITIES}
        tempred = ad.add(*(hfp.tempred_loss(predicted[m], stream.frames(m)[t]) for m in MODALITIES))
        compensated = MODALITIES[int(sample_rng.integers(2))]
        inputs = {m: predicted[m] if m is compensated else Tensor(stream.frames(m)[t]) for m in MODALITIES}
        det = det_loss_tensor(*detect_tensor(inputs[Modality.IMG], inputs[Modality.PTS], tensors), stream.target(t))
        return ad.add(tempred, det)

    losses = _train("train1", params, "hfp.", cfg.train.lr, cfg.train.epochs, train_streams, 1,
                    loss_fn, cfg, rng, progress, status_cb)
    metrics = hfp_validation(params, val_streams, tau)
    logger.info("train1: validation %s", ", ".join(f"{k}={v:.5f}" for k, v in sorted(metrics.items())))
    return StageResult("hfp", params, losses, metrics)


# ---------------------------------------------------------------------------
# Stage 2: uncertainty estimation and fusion
# ---------------------------------------------------------------------------

def _fused_forward(tensors: Mapping[str, Tensor], predicted: Mapping[Modality, Tensor], use_uncertainty: bool):
    variance = {m: ucf.estimate_variance_tensor(predicted[m], tensors, m) for m in MODALITIES}
    u = {m: ucf.uncertainty_map_tensor(variance[m]) for m in MODALITIES}
    enhanced = {
        m: ucf.fuse_tensor(predicted[m], predicted[m.other], u[m.other], tensors, m, use_uncertainty)
        for m in MODALITIES
    }
    return variance, enhanced


def ucf_validation(params: Mapping[str, np.ndarray], streams: Sequence[Stream], tau: int) -> Dict[str, float]:
    """MSE of HFP alone, fused with and without uncertainty scaling, and sigma^2 calibration."""
    tensors = to_tensors(params)
    sums: Dict[str, float] = {}
    variances: List[np.ndarray] = []
    residuals: List[np.ndarray] = []
    n = 0
    for stream in streams:
        for t in range(1, stream.horizon):
            predicted = {m: Tensor(x) for m, x in _predict_all(params, stream, t, tau).items()}
            variance, enhanced = _fused_forward(tensors, predicted, True)
            _, plain = _fused_forward(tensors, predicted, False)
            n += 1
            for m in MODALITIES:
                truth = stream.frames(m)[t]
                for key, guess in (("hfp", predicted[m].data), ("fused", enhanced[m].data),
                                   ("fused_nou", plain[m].data)):
                    name = f"mse_{key}_{m.value}"
                    sums[name] = sums.get(name, 0.0) + feature_mse(guess, truth).value
                variances.append(variance[m].data.ravel())
                residuals.append(squared_residual(predicted[m].data, truth).ravel())
    metrics = {k: v / max(1, n) for k, v in sums.items()}
    if variances:
        metrics["spearman_variance"] = rank_correlation(np.concatenate(variances), np.concatenate(residuals))
    return metrics


def train_stage2(
    cfg: RunConfig,
    train_streams: Sequence[Stream],
    val_streams: Sequence[Stream],
    stage1_params: Mapping[str, np.ndarray],
    progress: bool = True,
    status_cb: Optional[StatusFn] = None,
) -> StageResult:
    rng = _rng(cfg, "ucf")
    s, tau = cfg.streams, cfg.membank.tau
    params = {k: np.array(v) for k, v in stage1_params.items() if k.startswith(("det.", "hfp."))}
    params.update(ucf.init_ucf_params(rng, s.d_img, s.d_pts, cfg.ucf.K))
    use_u = cfg.ucf.use_uncertainty

    def loss_fn(tensors, stream, t, _rng):
        # hfp.* leaves do not require grad here, so the predictions are constants
        predicted = {m: hfp.predict_tensor([Tensor(x) for x in _window(stream, m, t, tau)], tensors, m)
                     for m in MODALITIES}
        variance, enhanced = _fused_forward(tensors, predicted, use_u)
        truth = {m: stream.frames(m)[t] for m in MODALITIES}
        uncert = ad.add(*(ucf.uncert_loss(predicted[m], truth[m], variance[m]) for m in MODALITIES))
        fuse = ucf.fuse_loss(enhanced[Modality.IMG], enhanced[Modality.PTS], truth[Modality.IMG], truth[Modality.PTS])
        det = det_loss_tensor(*detect_tensor(enhanced[Modality.IMG], enhanced[Modality.PTS], tensors),
                              stream.target(t))
        return ad.add(ad.add(uncert, fuse), det)

    losses = _train("train2", params, "ucf.", cfg.train.lr, cfg.train.epochs, train_streams, 1,
                    loss_fn, cfg, rng, progress, status_cb)
    metrics = ucf_validation(params, val_streams, tau)
    logger.info("train2: validation %s", ", ".join(f"{k}={v:.5f}" for k, v in sorted(metrics.items())))
    return StageResult("ucf", params, losses, metrics)
