"""
Retrieval quality measures: R@k, Med r, AP/mAP and inferred AP over sampled
judgment pools. Every metric reads only the ordering of a RankedList.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Union

import numpy as np

from .errors import DataError, DuplicateIdError, EmptyRelevanceError, FormatError, MissingIdError

logger = logging.getLogger(__name__)

INFAP_EPSILON = 1e-5
RECALL_KS = (1, 5, 10)


@dataclass
class RankedList:
    query_id: str
    video_ids: List[str]
    scores: List[float] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.video_ids)) != len(self.video_ids):
            raise DuplicateIdError(f"Ranked list for {self.query_id!r} repeats a video id")
        if self.scores and any(b > a for a, b in zip(self.scores, self.scores[1:])):
            raise DataError(f"Ranked list for {self.query_id!r} is not sorted by descending score")

    def __len__(self) -> int:
        return len(self.video_ids)


@dataclass(frozen=True)
class Judgment:
    video_id: str
    relevance: int
    stratum: str
    sampling_rate: float


class JudgmentPool:
    """query id -> sampled judgments; a video appears at most once per query"""

    def __init__(self):
        self._records: Dict[str, Dict[str, Judgment]] = {}

    def add(self, query_id: str, judgment: Judgment) -> None:
        if not 0.0 < judgment.sampling_rate <= 1.0:
            raise DataError(
                f"Sampling rate of {query_id}/{judgment.video_id} must be in (0, 1], got {judgment.sampling_rate}")
        if judgment.relevance not in (0, 1):
            raise DataError(f"Relevance of {query_id}/{judgment.video_id} must be 0 or 1")
        records = self._records.setdefault(query_id, {})
        if judgment.video_id in records:
            raise DuplicateIdError(f"Video {judgment.video_id!r} judged twice for query {query_id!r}")
        records[judgment.video_id] = judgment

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._records

    def queries(self) -> List[str]:
        return list(self._records)

    def judgments(self, query_id: str) -> Dict[str, Judgment]:
        if query_id not in self._records:
            raise MissingIdError(f"Query {query_id!r} is not in the judgment pool")
        return self._records[query_id]

    def relevant(self, query_id: str) -> Set[str]:
        return {vid for vid, j in self.judgments(query_id).items() if j.relevance}


def _ids(ranked: Union[RankedList, Sequence[str]]) -> Sequence[str]:
    return ranked.video_ids if isinstance(ranked, RankedList) else ranked


def recall_at_k(ranked, relevant: Set[str], k: int) -> int:
    """1 iff a relevant video is in the top k"""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not relevant:
        raise EmptyRelevanceError("recall_at_k needs at least one relevant video")
    return int(any(vid in relevant for vid in _ids(ranked)[:k]))


def first_relevant_rank(ranked, relevant: Set[str]) -> int:
    """1-based rank of the first relevant video; len + 1 if none was retrieved"""
    if not relevant:
        raise EmptyRelevanceError("first_relevant_rank needs at least one relevant video")
    ids = _ids(ranked)
    for rank, vid in enumerate(ids, start=1):
        if vid in relevant:
            return rank
    return len(ids) + 1


def median_rank(first_rel_ranks: Sequence[int]) -> int:
    """Middle of the sorted ranks; the lower middle for an even count"""
    if not first_rel_ranks:
        raise ValueError("median_rank needs at least one rank")
    ranks = sorted(first_rel_ranks)
    return ranks[(len(ranks) - 1) // 2]


def average_precision(ranked, relevant: Set[str]) -> float:
    if not relevant:
        raise EmptyRelevanceError("average_precision needs at least one relevant video")
    hits, total = 0, 0.0
    for rank, vid in enumerate(_ids(ranked), start=1):
        if vid in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def mean_ap(per_query: Sequence[float]) -> float:
    if len(per_query) == 0:
        raise ValueError("mean_ap needs at least one query")
    return float(np.mean(per_query))


def inferred_ap(ranked: RankedList, pool: JudgmentPool, epsilon: float = INFAP_EPSILON) -> float:
    """
    Inferred AP from sampled judgments.

    Each sampled item counts 1/p of its record. For a sampled relevant video at
    rank k > 1 the expected precision is
        1/k + (k-1)/k * (judged_above/p)/(k-1) * (rel_above + eps)/(rel_above + nonrel_above + 2 eps)
    and infAP = sum_k (1/p) E[P@k] / R_hat with R_hat the rescaled number of
    sampled relevant videos. The result is clamped into [0, 1].
    """
    judged = pool.judgments(ranked.query_id)
    for j in judged.values():
        if j.sampling_rate <= 0:
            raise DataError(f"Sampling rate must be positive, got {j.sampling_rate}")
    r_hat = sum(1.0 / j.sampling_rate for j in judged.values() if j.relevance)
    if r_hat == 0:
        raise EmptyRelevanceError(f"Query {ranked.query_id!r} has no sampled relevant video")

    total = 0.0
    judged_above = rel_above = nonrel_above = 0
    judged_above_scaled = 0.0
    for k, vid in enumerate(ranked.video_ids, start=1):
        j = judged.get(vid)
        if j is None:
            continue
        if j.relevance:
            if k == 1:
                expected = 1.0
            else:
                precision_above = (rel_above + epsilon) / (rel_above + nonrel_above + 2 * epsilon)
                expected = 1.0 / k + ((k - 1) / k) * (judged_above_scaled / (k - 1)) * precision_above
            total += expected / j.sampling_rate
            rel_above += 1
        else:
            nonrel_above += 1
        judged_above += 1
        judged_above_scaled += 1.0 / j.sampling_rate
    return float(min(1.0, max(0.0, total / r_hat)))


@dataclass
class MetricReport:
    recall: Dict[int, float]
    median_rank: Optional[int]
    mean_ap: Optional[float]
    per_query_ap: Dict[str, float]
    per_query_first_rank: Dict[str, int]
    excluded: int = 0
    mean_infap: Optional[float] = None
    per_query_infap: Dict[str, float] = field(default_factory=dict)

    @property
    def recall_sum(self) -> float:
        return sum(self.recall.values())


def evaluate_rankings(rankings: Iterable[RankedList], relevant_by_query: Mapping[str, Set[str]],
                      ks: Sequence[int] = RECALL_KS) -> MetricReport:
    """R@k in percent, Med r and mAP; queries without relevant videos are excluded"""
    hits = {k: [] for k in ks}
    ap, first = {}, {}
    excluded = 0
    for ranked in rankings:
        relevant = relevant_by_query.get(ranked.query_id) or set()
        if not relevant:
            excluded += 1
            continue
        for k in ks:
            hits[k].append(recall_at_k(ranked, relevant, k))
        ap[ranked.query_id] = average_precision(ranked, relevant)
        first[ranked.query_id] = first_relevant_rank(ranked, relevant)
    if excluded:
        logger.warning(f"{excluded} queries have no relevant video and were excluded")
    if not ap:
        return MetricReport({k: 0.0 for k in ks}, None, None, {}, {}, excluded)
    return MetricReport(
        recall={k: 100.0 * float(np.mean(v)) for k, v in hits.items()},
        median_rank=median_rank(list(first.values())),
        mean_ap=mean_ap(list(ap.values())),
        per_query_ap=ap,
        per_query_first_rank=first,
        excluded=excluded,
    )


def evaluate_inferred(rankings: Iterable[RankedList], pool: JudgmentPool,
                      epsilon: float = INFAP_EPSILON) -> Dict[str, float]:
    """Per-query infAP; queries without sampled relevant videos are excluded with a warning"""
    scores, excluded = {}, 0
    for ranked in rankings:
        try:
            scores[ranked.query_id] = inferred_ap(ranked, pool, epsilon)
        except EmptyRelevanceError:
            excluded += 1
    if excluded:
        logger.warning(f"{excluded} queries have no sampled relevant video and were excluded from infAP")
    return scores


def encoder_win_rates(per_encoder_ap: Mapping[str, Mapping[str, float]]) -> Dict[str, float]:
    """Share of queries on which each single-encoder model has the best AP (ties: first encoder)"""
    encoders = list(per_encoder_ap)
    if not encoders:
        raise ValueError("encoder_win_rates needs at least one encoder")
    queries = set.intersection(*(set(per_encoder_ap[e]) for e in encoders))
    if not queries:
        raise EmptyRelevanceError("No query is scored by every encoder")
    wins = {e: 0 for e in encoders}
    for q in sorted(queries):
        best = max(encoders, key=lambda e: (per_encoder_ap[e][q], -encoders.index(e)))
        wins[best] += 1
    return {e: wins[e] / len(queries) for e in encoders}


def write_run(path, rankings: Iterable[RankedList]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ranked in rankings:
            for rank, (vid, score) in enumerate(zip(ranked.video_ids, ranked.scores), start=1):
                f.write(f"{ranked.query_id}\t{rank}\t{vid}\t{score:.6f}\n")


def read_run(path) -> List[RankedList]:
    rows: Dict[str, List[tuple]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected query_id<TAB>rank<TAB>video_id<TAB>score")
            try:
                rows.setdefault(parts[0], []).append((int(parts[1]), parts[2], float(parts[3])))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: rank must be an integer and score a number")
    out = []
    for qid, items in rows.items():
        items.sort(key=lambda r: r[0])
        out.append(RankedList(qid, [vid for _, vid, _ in items], [s for _, _, s in items]))
    return out


def format_report(report: MetricReport) -> str:
    lines = []
    for qid in sorted(report.per_query_ap):
        parts = [f"query={qid}", f"ap={report.per_query_ap[qid]:.4f}",
                 f"first_rank={report.per_query_first_rank[qid]}"]
        if qid in report.per_query_infap:
            parts.append(f"infap={report.per_query_infap[qid]:.4f}")
        lines.append(" ".join(parts))
    agg = [f"{'R@%d' % k}={v:.1f}" for k, v in report.recall.items()]
    agg.append(f"MedR={report.median_rank if report.median_rank is not None else 'nan'}")
    agg.append(f"mAP={report.mean_ap:.4f}" if report.mean_ap is not None else "mAP=nan")
    if report.mean_infap is not None:
        agg.append(f"infAP={report.mean_infap:.4f}")
    agg.append(f"excluded={report.excluded}")
    lines.append("all " + " ".join(agg))
    return "\n".join(lines) + "\n"
