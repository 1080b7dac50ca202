"""
Improved triplet ranking loss with in-batch hardest negatives.

combined_loss mines a separate hardest negative in every common space and sums
the per-space losses; single_loss mines one negative on the averaged
similarity. Both average over the sentences of the batch.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
import torch

from .data import Batch
from .errors import BatchConstructionError, UsageError
from .spaces import MultiSpaceModel

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.2


def hardest_negative(s_index: int, sim_row, positives_mask) -> int:
    """Index of the most similar non-positive entry; the lowest index wins ties"""
    row = torch.as_tensor(sim_row)
    positives = torch.as_tensor(positives_mask, dtype=torch.bool)
    if row.shape != positives.shape:
        raise BatchConstructionError(
            f"Similarity row and positives mask differ in shape: {tuple(row.shape)} vs {tuple(positives.shape)}")
    if bool(positives.all()):
        raise BatchConstructionError(f"Sentence {s_index} has no negative in its batch")
    masked = row.masked_fill(positives, float("-inf"))
    return int(torch.argmax(masked))


def itrl(pos_sim, hardneg_sim, alpha: float = DEFAULT_ALPHA):
    """max(0, alpha + hardneg_sim - pos_sim)"""
    if alpha <= 0:
        raise UsageError(f"alpha must be positive, got {alpha}")
    if torch.is_tensor(pos_sim) or torch.is_tensor(hardneg_sim):
        return torch.clamp(alpha + hardneg_sim - pos_sim, min=0.0)
    return max(0.0, alpha + hardneg_sim - pos_sim)


@dataclass
class LossReport:
    """Per-space losses, their combination and the chosen negative ids per space and sentence"""

    per_space: List[torch.Tensor]
    combined: torch.Tensor
    negative_ids: List[List[str]]
    # smallest gap between the chosen negative and the runner-up, and smallest |hinge argument|
    selection_gap: float = float("inf")
    hinge_gap: float = float("inf")
    per_sentence: List[torch.Tensor] = field(default_factory=list, repr=False)

    @property
    def value(self) -> float:
        return float(self.combined.detach())

    def per_space_values(self) -> List[float]:
        return [float(x.detach()) for x in self.per_space]


def _itrl_terms(sims: torch.Tensor, negatives: torch.Tensor, alpha: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-sentence ITRL on a [B, B] similarity block whose diagonal holds the positives"""
    if alpha <= 0:
        raise UsageError(f"alpha must be positive, got {alpha}")
    if not bool(negatives.any(dim=1).all()):
        row = int(torch.nonzero(~negatives.any(dim=1))[0])
        raise BatchConstructionError(f"Sentence {row} has no negative in its batch")
    pos = sims.diagonal()
    idx = torch.argmax(sims.masked_fill(~negatives, float("-inf")), dim=1)
    neg = sims.gather(1, idx.unsqueeze(1)).squeeze(1)
    return torch.clamp(alpha + neg - pos, min=0.0), idx


def _gaps(sims: torch.Tensor, negatives: torch.Tensor, idx: torch.Tensor, ids: np.ndarray,
          alpha: float) -> Tuple[float, float]:
    s = sims.detach()
    chosen = s.gather(1, idx.unsqueeze(1)).squeeze(1)
    chosen_ids = ids[idx.numpy()]
    # candidates sharing the chosen video id have identical features, so they are not rivals
    rivals = negatives & torch.from_numpy(ids[None, :] != chosen_ids[:, None])
    runner_up = s.masked_fill(~rivals, float("-inf")).max(dim=1).values
    selection = float((chosen - runner_up).min())
    hinge = float((alpha + chosen - s.diagonal()).abs().min())
    return selection, hinge


def _report(space_sims: torch.Tensor, batch: Batch, alpha: float) -> LossReport:
    negatives = torch.from_numpy(batch.negatives_mask())
    ids = np.asarray(batch.video_ids)
    per_space, per_sentence, chosen = [], [], []
    selection_gap = hinge_gap = float("inf")
    for sims in space_sims:
        terms, idx = _itrl_terms(sims, negatives, alpha)
        per_sentence.append(terms)
        per_space.append(terms.mean())
        chosen.append([batch.video_ids[i] for i in idx.tolist()])
        sel, hin = _gaps(sims, negatives, idx, ids, alpha)
        selection_gap, hinge_gap = min(selection_gap, sel), min(hinge_gap, hin)
    combined = torch.stack(per_space).sum()
    return LossReport(per_space, combined, chosen, selection_gap, hinge_gap, per_sentence)


def _batch_similarities(batch: Batch, model: MultiSpaceModel) -> torch.Tensor:
    if batch.features is None:
        raise BatchConstructionError("Batch has no resolved video features")
    return model.space_similarities(batch.sentences, batch.features)


def combined_loss(batch: Batch, model: MultiSpaceModel, alpha: float = DEFAULT_ALPHA) -> LossReport:
    """Sum over spaces of each space's ITRL with its own hardest negative, mean over sentences"""
    if model.fusion == "model_average" and model.k > 1:
        raise UsageError("Averaged models are trained one space at a time; combined_loss needs a single model")
    return _report(_batch_similarities(batch, model), batch, alpha)


def single_loss(batch: Batch, model: MultiSpaceModel, alpha: float = DEFAULT_ALPHA) -> LossReport:
    """ITRL with the hardest negative picked on the combined similarity"""
    sims = _batch_similarities(batch, model).mean(dim=0)
    return _report(sims.unsqueeze(0), batch, alpha)


LOSSES = {"combined": combined_loss, "single": single_loss}


def hardneg_diversity(epoch_log: Sequence[LossReport]) -> float:
    """Extra distinct hard negatives per sentence relative to a single-space choice"""
    u_single, u_multi = diversity_counts(epoch_log)
    return u_multi / u_single - 1.0


def diversity_counts(epoch_log: Sequence[LossReport]) -> Tuple[int, int]:
    if not epoch_log:
        raise UsageError("hardneg_diversity needs at least one logged batch")
    u_single = u_multi = 0
    for report in epoch_log:
        for choices in zip(*report.negative_ids):
            u_single += 1
            u_multi += len(set(choices))
    return u_single, u_multi


def diversity_line(epoch: int, epoch_log: Sequence[LossReport]) -> str:
    u_single, u_multi = diversity_counts(epoch_log)
    return f"{epoch}\t{u_single}\t{u_multi}\t{u_multi / u_single - 1.0:.6f}"


def detach_report(report: LossReport) -> LossReport:
    """Graph-free copy kept in epoch logs"""
    return LossReport([x.detach() for x in report.per_space], report.combined.detach(), report.negative_ids,
                      report.selection_gap, report.hinge_gap)
