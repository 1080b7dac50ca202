"""
Training: RMSProp updates, per-epoch decay with plateau halving, early stopping,
restarts with best-checkpoint selection, and a finite-difference gradient check.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
from torch.optim.lr_scheduler import ReduceLROnPlateau, StepLR

from .config import TrainConfig
from .data import Batch, CaptionSet, FeatureStore, make_batches
from .encoders import EncoderResources, build_encoder
from .errors import (DimensionMismatchError, DivergenceError, GradientCheckError, NumericalError,
                     SelectionTieError, UsageError)
from .loss import LOSSES, LossReport, detach_report, diversity_line
from .metrics import evaluate_rankings
from .spaces import MultiSpaceModel, rank_many

logger = logging.getLogger(__name__)

RHO = 0.99
EPS = 1e-8
TIE_TOLERANCE = 1e-4


@dataclass
class OptimizerState:
    """Squared-gradient accumulator of one parameter"""

    acc: torch.Tensor
    rho: float = RHO
    eps: float = EPS
    lr: float = 1e-4


def rmsprop_step(param: torch.Tensor, grad: torch.Tensor, state: OptimizerState):
    """acc <- rho*acc + (1-rho)*g^2 ; param <- param - lr*g/(sqrt(acc)+eps)"""
    if param.shape != grad.shape or state.acc.shape != param.shape:
        raise DimensionMismatchError(
            f"rmsprop_step shapes differ: param {tuple(param.shape)}, grad {tuple(grad.shape)}, "
            f"acc {tuple(state.acc.shape)}")
    if not torch.isfinite(grad).all():
        raise DivergenceError("Non-finite gradient; the update was not applied")
    with torch.no_grad():
        state.acc.mul_(state.rho).addcmul_(grad, grad, value=1 - state.rho)
        param.addcdiv_(grad, state.acc.sqrt().add_(state.eps), value=-state.lr)
    return param, state


class RMSprop(torch.optim.Optimizer):
    """Plain RMSProp without momentum; a non-finite gradient aborts the whole step"""

    def __init__(self, params, lr: float = 1e-4, rho: float = RHO, eps: float = EPS):
        if lr <= 0:
            raise UsageError(f"Learning rate must be positive, got {lr}")
        super().__init__(params, dict(lr=lr, rho=rho, eps=eps))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise DivergenceError("Non-finite gradient; the update was not applied")
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if "acc" not in state:
                    state["acc"] = torch.zeros_like(p)
                rmsprop_step(p, p.grad, OptimizerState(state["acc"], group["rho"], group["eps"], group["lr"]))
        return loss


def make_schedulers(optimizer: torch.optim.Optimizer, config: TrainConfig):
    """Multiplicative decay every epoch, halving after `plateau_patience` validations without a new best"""
    decay = StepLR(optimizer, step_size=1, gamma=config.lr_decay)
    plateau = ReduceLROnPlateau(optimizer, mode="max", factor=0.5, patience=config.plateau_patience - 1,
                                threshold=0.0, eps=0.0)
    return decay, plateau


@dataclass
class Split:
    captions: CaptionSet
    features: FeatureStore

    def collection(self) -> FeatureStore:
        """Videos referenced by the captions, in feature-store order"""
        wanted = set(self.captions.by_video)
        ids = [v for v in self.features.ids if v in wanted]
        return FeatureStore(ids, self.features.rows(ids))


def build_model(config: TrainConfig, resources: EncoderResources, video_dim: int,
                encoders: Optional[List[str]] = None) -> MultiSpaceModel:
    tags = encoders or config.encoders
    built = [build_encoder(t, resources, config.word_dim, config.gru_hidden) for t in tags]
    fusion = "sea" if config.fusion == "model_average" else config.fusion
    return MultiSpaceModel.build(built, video_dim, config.dc, fusion, config.transform_dim)


@torch.no_grad()
def validate(model, split: Split, metric: str = "map") -> float:
    rankings = rank_many(split.captions.sentences, split.collection(), model)
    report = evaluate_rankings(rankings, split.captions.relevant_by_query())
    if metric == "recall_sum":
        return report.recall_sum if report.mean_ap is not None else float("nan")
    return report.mean_ap if report.mean_ap is not None else float("nan")


@dataclass
class EpochRecord:
    restart: int
    epoch: int
    loss: float
    val_metric: float
    lr: float
    batch_losses: List[float] = field(default_factory=list, repr=False)
    diversity: str = ""
    encoders: str = ""

    def line(self) -> str:
        return f"{self.restart} {self.epoch} {self.loss:.6f} {self.val_metric:.6f} {self.lr:.6e}"


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def lines(self) -> List[str]:
        return [r.line() for r in self.records]

    def diversity_lines(self) -> List[str]:
        """epoch<TAB>U_single<TAB>U_multi<TAB>extra_ratio, one per epoch"""
        return [r.diversity for r in self.records if r.diversity]

    def diversity_report(self) -> List[str]:
        """diversity_lines under a `# restart r encoders=...` header per training run"""
        out, current = [], None
        for r in self.records:
            if not r.diversity:
                continue
            if (r.restart, r.encoders) != current:
                current = (r.restart, r.encoders)
                out.append(f"# restart {r.restart} encoders={r.encoders}")
            out.append(r.diversity)
        return out

    def extend(self, other: "TrainingLog") -> None:
        self.records.extend(other.records)
        self.notes.extend(other.notes)


@dataclass
class FitResult:
    model: MultiSpaceModel
    log: TrainingLog
    best_metric: float
    best_restart: int
    best_epoch: int


def _train_restart(restart: int, train: Split, val: Split, config: TrainConfig,
                   resources: EncoderResources, encoders: Optional[List[str]], log: TrainingLog):
    seed = config.seed + restart
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    model = build_model(config, resources, train.features.d_v, encoders)
    model.reset_parameters(resources.table, generator)
    loss_fn = LOSSES[config.loss]

    optimizer = RMSprop(model.parameters(), lr=config.lr0)
    decay, plateau = make_schedulers(optimizer, config)
    best_metric, best_epoch, best_state = -math.inf, 0, None

    for epoch in range(1, config.max_epochs + 1):
        lr = optimizer.param_groups[0]["lr"]
        batch_losses, reports = [], []
        for batch in make_batches(train.captions, config.batch_size, seed, epoch, train.features):
            optimizer.zero_grad()
            report: LossReport = loss_fn(batch, model, config.alpha)
            report.combined.backward()
            optimizer.step()
            batch_losses.append(report.value)
            reports.append(detach_report(report))

        metric = validate(model, val, config.val_metric)
        record = EpochRecord(restart, epoch, float(np.mean(batch_losses)), metric, lr, batch_losses,
                             diversity_line(epoch, reports), "+".join(encoders or config.encoders))
        log.records.append(record)
        logger.info(record.line())

        if not math.isfinite(metric):
            note = f"restart {restart} aborted at epoch {epoch}: validation {config.val_metric} is {metric}"
            logger.warning(note)
            log.notes.append(note)
            break
        if metric > best_metric:
            best_metric, best_epoch = metric, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= config.early_stop_patience:
            logger.info(f"restart {restart}: early stop at epoch {epoch}, best epoch {best_epoch}")
            break
        decay.step()
        plateau.step(metric)

    if best_state is None:
        return None
    model.load_state_dict(best_state)
    return model, best_metric, best_epoch


def fit(train: Split, val: Split, config: TrainConfig, resources: EncoderResources,
        encoders: Optional[List[str]] = None) -> FitResult:
    """Best model over all restarts by validation metric, plus the per-epoch log"""
    if len(train.captions) < 2 or len(val.captions) == 0:
        raise UsageError("fit needs at least 2 training pairs and 1 validation pair")
    if train.features.d_v != val.features.d_v:
        raise DimensionMismatchError(
            f"Training features have dim {train.features.d_v}, validation features {val.features.d_v}")
    torch.set_num_threads(config.threads)

    if config.fusion == "model_average" and encoders is None:
        return _fit_model_average(train, val, config, resources)

    logger.info(f"Training {'+'.join(encoders or config.encoders)} with {config.describe()}")
    log = TrainingLog()
    best: Optional[FitResult] = None
    for restart in range(config.restarts):
        try:
            outcome = _train_restart(restart, train, val, config, resources, encoders, log)
        except NumericalError as e:
            note = f"restart {restart} aborted: {e}"
            logger.warning(note)
            log.notes.append(note)
            continue
        if outcome is None:
            continue
        model, metric, epoch = outcome
        if best is None or metric > best.best_metric:
            best = FitResult(model, log, metric, restart, epoch)
    if best is None:
        raise DivergenceError("Every restart was aborted; no model to return")
    logger.info(f"Best {config.val_metric}={best.best_metric:.6f} at restart {best.best_restart} "
                f"epoch {best.best_epoch}")
    return best


def _fit_model_average(train: Split, val: Split, config: TrainConfig,
                       resources: EncoderResources) -> FitResult:
    log = TrainingLog()
    models = []
    for tag in config.encoders:
        result = fit(train, val, config, resources, encoders=[tag])
        log.extend(result.log)
        models.append(result.model)
    model = MultiSpaceModel.assemble(models)
    metric = validate(model, val, config.val_metric)
    logger.info(f"Averaged {len(models)} single-encoder models: {config.val_metric}={metric:.6f}")
    return FitResult(model, log, metric, -1, -1)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    per_tensor: Dict[str, float]
    checked: int
    max_abs_grad: float


def gradient_check(model: MultiSpaceModel, batch: Batch, tolerance: float = 1e-4, loss: str = "combined",
                   alpha: float = 0.2, samples: int = 32, h: float = 1e-5, seed: int = 0,
                   corrupt: float = 0.0) -> GradCheckReport:
    """
    Central finite differences against autograd on a 64-bit copy of the model.

    Raises SelectionTieError when a hardest-negative choice or a hinge is
    within 1e-4 of switching; the caller should draw another batch.
    `corrupt` scales the analytic gradients by (1 + corrupt) for fault injection.
    """
    loss_fn = LOSSES[loss]
    shadow = copy.deepcopy(model).double()
    batch = Batch(batch.sentences, batch.video_ids, np.asarray(batch.features, dtype=np.float64))

    report = loss_fn(batch, shadow, alpha)
    if report.selection_gap < TIE_TOLERANCE or report.hinge_gap < TIE_TOLERANCE:
        raise SelectionTieError(
            f"Batch is too close to a selection tie (gap {report.selection_gap:.2e}, "
            f"hinge {report.hinge_gap:.2e}); resample")
    shadow.zero_grad()
    report.combined.backward()

    rng = np.random.default_rng(seed)
    per_tensor: Dict[str, float] = {}
    checked, max_abs_grad = 0, 0.0
    for name, param in shadow.named_parameters():
        grad = param.grad.detach().clone() if param.grad is not None else torch.zeros_like(param)
        max_abs_grad = max(max_abs_grad, float(grad.abs().max()))
        flat, gflat = param.data.view(-1), grad.view(-1)
        worst = 0.0
        for i in rng.choice(flat.numel(), size=min(samples, flat.numel()), replace=False):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                f_plus = float(loss_fn(batch, shadow, alpha).combined)
                flat[i] = orig - h
                f_minus = float(loss_fn(batch, shadow, alpha).combined)
                flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = float(gflat[i]) * (1.0 + corrupt)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
            worst = max(worst, rel)
            checked += 1
        per_tensor[name] = worst

    max_rel = max(per_tensor.values()) if per_tensor else 0.0
    result = GradCheckReport(max_rel, max_rel < tolerance, tolerance, per_tensor, checked, max_abs_grad)
    logger.info(f"gradient check: max relative error {max_rel:.3e} over {checked} coordinates "
                f"({'pass' if result.passed else 'FAIL'})")
    return result


def require_gradients(report: GradCheckReport) -> GradCheckReport:
    if not report.passed:
        worst = max(report.per_tensor, key=report.per_tensor.get)
        raise GradientCheckError(
            f"max relative error {report.max_rel_error:.3e} >= {report.tolerance:g} (worst tensor {worst})")
    return report
