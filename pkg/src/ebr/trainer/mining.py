"""Training-data mining: random, in-batch (online) hard, rank-window (offline)
hard negatives, and hard positives from failed search sessions."""
import json
import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgument
from .features import FeatureRecord

POSITIVE_SOURCES = ("clicks", "impressions", "clicks+hard_positives")
NEGATIVE_SOURCES = ("random", "non_click_impressions", "online_hard", "offline_hard", "mixed")
MAX_HARD_PER_POSITIVE = 2


@dataclass(frozen=True)
class MiningConfig:
    positive_source: str = "clicks"
    negative_source: str = "random"
    negatives_per_positive: int = 2  # random / non-click-impression draws
    hard_negatives_per_positive: int = 2
    easy_to_hard_ratio: float = 100.0
    offline_rank_window: tuple = (0.0101, 0.05)

    def __post_init__(self):
        if self.positive_source not in POSITIVE_SOURCES:
            raise InvalidArgument(f"unknown positive_source {self.positive_source!r}")
        if self.negative_source not in NEGATIVE_SOURCES:
            raise InvalidArgument(f"unknown negative_source {self.negative_source!r}")
        if not 1 <= self.hard_negatives_per_positive <= MAX_HARD_PER_POSITIVE:
            raise InvalidArgument(
                f"hard_negatives_per_positive must be in [1, {MAX_HARD_PER_POSITIVE}]")
        if self.negatives_per_positive < 1:
            raise InvalidArgument("negatives_per_positive must be >= 1")
        if self.easy_to_hard_ratio < 0:
            raise InvalidArgument("easy_to_hard_ratio must be >= 0")
        lo, hi = self.offline_rank_window
        if not 0.0 <= lo < hi <= 1.0:
            raise InvalidArgument(f"bad offline_rank_window {self.offline_rank_window}")


def mine_random_negatives(pool, n, seed=0, exclude=()):
    """Draw ``n`` ids uniformly without replacement from ``pool`` minus ``exclude``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    exclude = set(exclude)
    candidates = [p for p in pool if p not in exclude]
    if len(candidates) < n:
        raise InvalidArgument(f"pool has {len(candidates)} candidates, need {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [candidates[i] for i in rng.choice(len(candidates), size=n, replace=False)]


def mine_online_hard_negatives(query_emb, positive_emb, per_positive=2, positive_ids=None):
    """For each query, indices of the most similar *other* in-batch positives.

    Candidates whose document id equals the query's own positive are skipped
    (a duplicate of the positive is not a negative). Ties go to the lower index.
    """
    if not 1 <= per_positive <= MAX_HARD_PER_POSITIVE:
        raise InvalidArgument(f"per_positive must be in [1, {MAX_HARD_PER_POSITIVE}]")
    n = query_emb.shape[0]
    if n < 2:
        raise InvalidArgument("online hard negative mining needs a batch of at least 2")
    sims = query_emb @ positive_emb.T
    np.fill_diagonal(sims, -np.inf)
    if positive_ids is not None:
        ids = np.asarray(positive_ids, dtype=object)
        sims[ids[:, None] == ids[None, :]] = -np.inf
    out = []
    for i in range(n):
        order = np.lexsort((np.arange(n), -sims[i]))
        out.append([int(j) for j in order[:per_positive] if np.isfinite(sims[i, j])])
    return out


def rank_window(size, window):
    """1-based inclusive rank bounds for a fractional window over ``size`` items."""
    lo, hi = window
    lo_rank = max(1, math.ceil(round(lo * size, 9)))
    hi_rank = min(size, math.floor(round(hi * size, 9)))
    return lo_rank, hi_rank


def mine_offline_hard_negatives(query_embs, doc_embs, doc_ids, positives, window,
                                per_query=2, seed=0, ranker=None):
    """Sample negatives uniformly from a rank window of each query's results.

    ``positives[i]`` is the set of ids excluded for query ``i``. The window is
    taken over the corpus size. ``ranker(query_emb)`` may supply an
    approximate ranking (list of row indices); default is exact cosine KNN
    with ties by doc id.
    """
    doc_ids = list(doc_ids)
    lo_rank, hi_rank = rank_window(len(doc_ids), window)
    if hi_rank < lo_rank:
        raise InvalidArgument(f"rank window {window} is empty for {len(doc_ids)} documents")
    rng = np.random.default_rng(seed)
    id_order = np.argsort(np.asarray(doc_ids, dtype=object), kind="stable")
    tie_rank = np.empty(len(doc_ids), dtype=np.int64)
    tie_rank[id_order] = np.arange(len(doc_ids))
    out = []
    for i, q in enumerate(query_embs):
        if ranker is None:
            ranking = np.lexsort((tie_rank, -(doc_embs @ q)))
        else:
            ranking = ranker(q)
        excl = positives[i]
        ranked = [j for j in ranking if doc_ids[j] not in excl]
        window_rows = ranked[lo_rank - 1:hi_rank]
        if not window_rows:
            raise InvalidArgument(f"rank window {window} empty for query {i} after exclusions")
        k = min(per_query, len(window_rows))
        pick = rng.choice(len(window_rows), size=k, replace=False)
        out.append([doc_ids[window_rows[p]] for p in sorted(pick)])
    return out


@dataclass
class Session:
    query: FeatureRecord
    impressed: list
    clicked: list
    later_success: object = None

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(FeatureRecord.from_json(obj["query"]), list(obj["impressed"]),
                       list(obj["clicked"]), obj.get("later_success"))
        except (KeyError, TypeError) as exc:
            raise InvalidArgument(f"malformed session record: {exc}") from None

    def to_json(self):
        return {"query": self.query.to_json(), "impressed": self.impressed,
                "clicked": self.clicked, "later_success": self.later_success}


def read_session_log(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(Session.from_json(json.loads(line)))
            except (ValueError, InvalidArgument) as exc:
                raise InvalidArgument(f"{path}:{lineno}: {exc}") from None
    return out


def mine_hard_positives(sessions, seed=0):
    """``(query, target_id)`` pairs from sessions that failed and later succeeded.

    A session qualifies when nothing impressed was clicked and the later
    success is on a document that was not impressed. Order follows the log;
    ``seed`` is accepted for interface symmetry and unused.
    """
    pairs = []
    for s in sessions:
        if not isinstance(s, Session):
            s = Session.from_json(s)
        if s.clicked or s.later_success is None:
            continue
        if s.later_success in set(s.impressed):
            continue
        pairs.append((s.query, s.later_success))
    return pairs
