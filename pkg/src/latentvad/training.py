"""Joint reconstruction + latent prediction objective and the two-phase training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .data.frames import SequenceSample, Video, make_samples, stack_samples
from .model import AnomalyNet, ModelConfig, save_checkpoint

log = logging.getLogger(__name__)

LOSS_CSV_FIELDS = ["epoch", "step", "recon", "pred", "reg", "total", "lr", "lambda_r", "lambda_p"]


class LossNotFinite(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite {term} term: {value}")
        self.term = term


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Optional[Path]):
        super().__init__(f"{message}; last good checkpoint: {last_good}")
        self.last_good = last_good


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_p: float = 0.001
    gamma: float = 0.001

    def __post_init__(self):
        if min(self.lambda_r, self.lambda_p, self.gamma) < 0:
            raise ValueError(f"loss weights must be >= 0: {self}")


PHASE1 = LossWeights(lambda_r=1.0, lambda_p=0.001)
PHASE2 = LossWeights(lambda_r=0.001, lambda_p=1.0)


@dataclass
class TrainSchedule:
    total_epochs: int = 50
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 20
    phase_switch_epoch: int = 25
    phase1_weights: LossWeights = PHASE1
    phase2_weights: LossWeights = PHASE2
    plateau_switch: bool = False
    plateau_tol: float = 0.01
    plateau_patience: int = 3
    # Hold the encoder fixed once phase 2 starts. Without this the latent
    # prediction term is minimised by shrinking every code towards a constant.
    freeze_encoder_phase2: bool = True

    def __post_init__(self):
        if isinstance(self.phase1_weights, dict):
            self.phase1_weights = LossWeights(**self.phase1_weights)
        if isinstance(self.phase2_weights, dict):
            self.phase2_weights = LossWeights(**self.phase2_weights)
        if not 0 < self.phase_switch_epoch < self.total_epochs:
            raise ValueError(f"phase_switch_epoch must lie in (0, {self.total_epochs}), "
                             f"got {self.phase_switch_epoch}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    def weights_at(self, epoch: int) -> LossWeights:
        return self.phase1_weights if epoch < self.phase_switch_epoch else self.phase2_weights

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class LossReport:
    recon_term: float
    prediction_term: float
    reg_term: float
    total: float
    epoch: int = 0
    step: int = 0
    weights: Optional[LossWeights] = None
    loss: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)


def l2_penalty(model: torch.nn.Module) -> torch.Tensor:
    """Sum of squared values of every learnable parameter."""
    return sum((p ** 2).sum() for p in model.parameters())


def compute_loss(model: AnomalyNet, clips, weights: LossWeights, check_finite: bool = True) -> LossReport:
    """Weighted sum of reconstruction MSE, latent prediction MSE and the L2 penalty.

    ``clips`` is a (N, k + 1, 3, H, W) tensor, a SequenceSample, or a list of
    samples.  Both error terms are means over elements so the weights do not
    depend on resolution.  ``report.loss`` keeps the differentiable total.
    """
    if isinstance(clips, SequenceSample):
        clips = [clips]
    if not torch.is_tensor(clips):
        clips = stack_samples(clips)
    dtype = next(model.parameters()).dtype
    recon, targets, z_hat, z_t = model(clips.to(dtype))
    recon_term = ((recon - targets) ** 2).mean()
    pred_term = ((z_hat - z_t) ** 2).mean()
    reg_term = l2_penalty(model)
    total = weights.lambda_r * recon_term + weights.lambda_p * pred_term + weights.gamma * reg_term
    if check_finite:
        for name, val in (("recon", recon_term), ("prediction", pred_term), ("reg", reg_term)):
            if not torch.isfinite(val):
                raise LossNotFinite(name, val.item())
    return LossReport(recon_term.item(), pred_term.item(), reg_term.item(), total.item(),
                      weights=weights, loss=total)


@dataclass
class TrainResult:
    model: AnomalyNet
    reports: List[LossReport]
    checkpoints: Dict[str, Path] = field(default_factory=dict)
    phase_switch_epoch: Optional[int] = None


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def fit_batch(model: AnomalyNet, clips: torch.Tensor, weights: LossWeights, steps: int,
              lr: float = 1e-3) -> List[LossReport]:
    """Repeatedly optimise on one fixed batch (sanity check that the model can learn)."""
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    history = []
    for step in range(steps):
        rep = compute_loss(model, clips, weights)
        opt.zero_grad()
        rep.loss.backward()
        opt.step()
        rep.step = step
        rep.loss = None
        history.append(rep)
    return history


def train(videos: Sequence[Video], cfg: ModelConfig, schedule: TrainSchedule, *, stride: int = 1,
          batch_size: int = 8, seed: int = 0, out_dir=None, checkpoint_every: Optional[int] = None,
          background=None, max_steps_per_epoch: Optional[int] = None,
          progress: Optional[Callable[[LossReport], None]] = None) -> TrainResult:
    """Train from scratch on background-subtracted videos.

    Writes ``last.pt``, ``best.pt``, optional ``epoch_NNN.pt`` files and
    ``loss.csv`` into ``out_dir`` when given.  Returns the model with the
    final weights (in eval mode) and one averaged LossReport per epoch.
    """
    samples = [s for v in videos for s in make_samples(v, cfg.k, cfg.t_offset, stride)]
    if not samples:
        raise ValueError("no training samples: videos too short for k + t_offset")
    seed_everything(seed)
    model = AnomalyNet(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr)
    rng = np.random.default_rng(seed)

    out_dir = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "loss.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOSS_CSV_FIELDS)
        writer.writeheader()

    result = TrainResult(model, [])
    best = math.inf
    switch_epoch = schedule.phase_switch_epoch
    recon_hist: List[float] = []
    step = 0
    meta = {"seed": seed, "schedule": schedule.to_dict(), "stride": stride}
    try:
        for epoch in range(schedule.total_epochs):
            if schedule.plateau_switch and epoch < switch_epoch and _plateaued(recon_hist, schedule):
                switch_epoch = epoch
                log.info("reconstruction plateaued, switching to phase 2 at epoch %d", epoch)
            weights = schedule.phase1_weights if epoch < switch_epoch else schedule.phase2_weights
            if epoch == switch_epoch:
                best = math.inf  # loss scale changes with the weights
                if schedule.freeze_encoder_phase2:
                    model.encoder.requires_grad_(False)
            lr = schedule.lr_at(epoch)
            _set_lr(opt, lr)
            model.train()
            if schedule.freeze_encoder_phase2 and epoch >= switch_epoch:
                model.encoder.eval()  # keep its BatchNorm statistics fixed too
            order = rng.permutation(len(samples))
            batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
            if max_steps_per_epoch is not None:
                batches = batches[:max_steps_per_epoch]
            sums = np.zeros(4)
            for idx in batches:
                try:
                    rep = compute_loss(model, [samples[i] for i in idx], weights)
                except LossNotFinite as exc:
                    last = result.checkpoints.get("last")
                    raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}", last) from exc
                opt.zero_grad()
                rep.loss.backward()
                opt.step()
                step += 1
                sums += [rep.recon_term, rep.prediction_term, rep.reg_term, rep.total]
            sums /= max(1, len(batches))
            rep = LossReport(*map(float, sums), epoch=epoch, step=step, weights=weights)
            result.reports.append(rep)
            recon_hist.append(rep.recon_term)
            log.info("epoch %d lr %.1e recon %.5f pred %.5f total %.5f", epoch, lr,
                     rep.recon_term, rep.prediction_term, rep.total)
            if progress is not None:
                progress(rep)
            if out_dir is not None:
                writer.writerow(dict(epoch=epoch, step=step, recon=rep.recon_term, pred=rep.prediction_term,
                                     reg=rep.reg_term, total=rep.total, lr=lr,
                                     lambda_r=weights.lambda_r, lambda_p=weights.lambda_p))
                fh.flush()
                ep_meta = dict(meta, epoch=epoch, loss=rep.total, phase_switch_epoch=switch_epoch)
                model.eval()
                result.checkpoints["last"] = save_checkpoint(out_dir / "last.pt", model, background, ep_meta)
                if rep.total < best:
                    best = rep.total
                    result.checkpoints["best"] = save_checkpoint(out_dir / "best.pt", model, background, ep_meta)
                if checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                    p = save_checkpoint(out_dir / f"epoch_{epoch:03d}.pt", model, background, ep_meta)
                    result.checkpoints[f"epoch_{epoch:03d}"] = p
    finally:
        if fh is not None:
            fh.close()
    model.requires_grad_(True)
    model.eval()
    result.phase_switch_epoch = switch_epoch
    return result


def _plateaued(history: List[float], schedule: TrainSchedule) -> bool:
    n = schedule.plateau_patience
    if len(history) <= n:
        return False
    ref = history[-n - 1]
    if ref <= 0:
        return True
    return (ref - min(history[-n:])) / ref < schedule.plateau_tol
