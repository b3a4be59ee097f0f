"""Mini-batch SGD over triplets with pluggable negative mining."""
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument, TrainingDiverged
from .features import FeatureRecord
from .loss import TripletBatch, triplet_loss
from .mining import (mine_hard_positives, mine_online_hard_negatives,
                     mine_random_negatives)
from .model import copy_towers

log = logging.getLogger(__name__)

LABEL_SOURCES = ("click", "impression", "hard_positive")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.5
    batch_size: int = 64
    epochs: int = 5
    margin: float = 0.1
    seed: int = 0


@dataclass
class TrainingExample:
    query: FeatureRecord
    positive_id: str
    label_source: str = "click"
    impressed: tuple = ()

    @classmethod
    def from_json(cls, obj):
        src = obj.get("label_source", "click")
        if src not in LABEL_SOURCES:
            raise InvalidArgument(f"unknown label_source {src!r}")
        return cls(FeatureRecord.from_json(obj["query"]), obj["positive_id"], src,
                   tuple(obj.get("impressed", ())))

    def to_json(self):
        out = {"query": self.query.to_json(), "positive_id": self.positive_id,
               "label_source": self.label_source}
        if self.impressed:
            out["impressed"] = list(self.impressed)
        return out


@dataclass
class TrainingData:
    examples: list
    corpus: dict  # doc_id -> FeatureRecord

    def select(self, positive_source):
        keep = {"clicks": ("click",), "impressions": ("impression",),
                "clicks+hard_positives": ("click", "hard_positive")}[positive_source]
        return [e for e in self.examples if e.label_source in keep]


def examples_from_sessions(sessions, positive_source="clicks"):
    """Turn session logs into training examples for one positive definition."""
    out = []
    for s in sessions:
        if positive_source == "impressions":
            out.extend(TrainingExample(s.query, d, "impression", tuple(s.impressed))
                       for d in s.impressed)
        else:
            out.extend(TrainingExample(s.query, d, "click", tuple(s.impressed)) for d in s.clicked)
    if positive_source == "clicks+hard_positives":
        out.extend(TrainingExample(q, t, "hard_positive") for q, t in mine_hard_positives(sessions))
    return out


def read_training_data(path, corpus):
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                ex = TrainingExample.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise InvalidArgument(f"{path}:{lineno}: {exc}") from None
            if ex.positive_id not in corpus:
                raise InvalidArgument(f"{path}:{lineno}: unknown positive id {ex.positive_id!r}")
            examples.append(ex)
    return TrainingData(examples, corpus)


@dataclass
class TrainResult:
    model_q: object
    model_d: object
    loss_curve: list = field(default_factory=list)  # mean loss per epoch
    steps: int = 0


def _is_hard(k, ratio):
    # the k-th negative slot (0-based) is hard when it crosses a multiple of ratio+1
    period = ratio + 1.0
    return int((k + 1) // period) > int(k // period)


def train(model_q, model_d, mining, data, hp=TrainConfig(), offline_negatives=None):
    """Train copies of the two towers; the inputs are left untouched.

    ``offline_negatives`` maps example index (within the selected positives)
    to a list of mined hard-negative ids; required for ``offline_hard`` and
    used by ``mixed`` when given (``mixed`` falls back to in-batch hard
    negatives otherwise). Warm-starting is just passing trained towers in.
    """
    model_q, model_d = copy_towers(model_q, model_d)
    examples = data.select(mining.positive_source)
    if not examples:
        raise InvalidArgument("no training examples for the selected positive source")
    src = mining.negative_source
    if src == "offline_hard" and offline_negatives is None:
        raise InvalidArgument("offline_hard needs mined offline negatives")
    rng = np.random.default_rng(hp.seed)
    pool = sorted(data.corpus)
    slot = 0
    curve = []
    steps = 0
    for _epoch in range(hp.epochs):
        order = rng.permutation(len(examples))
        total, count = 0.0, 0
        for s in range(0, len(order), hp.batch_size):
            idx = order[s:s + hp.batch_size]
            batch = [examples[i] for i in idx]
            negs = _negatives(batch, idx, mining, data, pool, rng, model_q, model_d,
                              offline_negatives, slot)
            slot += sum(len(n) for n in negs) if src == "mixed" else 0
            triplets = [(ex.query, data.corpus[ex.positive_id], [data.corpus[d] for d in n])
                        for ex, n in zip(batch, negs) if n]
            if not triplets:
                continue
            loss, grads = triplet_loss(model_q, model_d, TripletBatch(triplets, hp.margin))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {steps}")
            n_terms = sum(len(t[2]) for t in triplets)
            scale = hp.lr / len(triplets)
            model_q.apply_grads(grads["query"], scale)
            model_d.apply_grads(grads["document"], scale)
            for m in (model_q, model_d):
                for p in m.params().values():
                    if not np.all(np.isfinite(p)):
                        raise TrainingDiverged(f"non-finite parameters at step {steps}")
            total += loss
            count += n_terms
            steps += 1
        curve.append(total / max(count, 1))
        log.info("epoch %d mean loss %.5f", _epoch, curve[-1])
    return TrainResult(model_q, model_d, curve, steps)


def _negatives(batch, idx, mining, data, pool, rng, model_q, model_d, offline, slot):
    src = mining.negative_source
    n = mining.negatives_per_positive
    if src == "random":
        return [mine_random_negatives(pool, n, rng, exclude={e.positive_id}) for e in batch]
    if src == "non_click_impressions":
        out = []
        for e in batch:
            cand = [d for d in e.impressed if d != e.positive_id]
            k = min(n, len(cand))
            out.append([cand[i] for i in rng.choice(len(cand), size=k, replace=False)] if k else [])
        return out
    if src == "offline_hard":
        return [list(offline[int(i)])[:mining.hard_negatives_per_positive] for i in idx]
    online = None
    if src == "online_hard" or (src == "mixed" and offline is None):
        if len(batch) < 2:
            return [[] for _ in batch]
        yq = model_q.encode([e.query for e in batch])
        yp = model_d.encode([data.corpus[e.positive_id] for e in batch])
        ids = [e.positive_id for e in batch]
        picks = mine_online_hard_negatives(yq, yp, mining.hard_negatives_per_positive, ids)
        online = [[ids[j] for j in p] for p in picks]
        if src == "online_hard":
            return online
    # mixed: a deterministic stream of negative slots, one hard per (ratio + 1)
    out = []
    for b, e in enumerate(batch):
        hard_pool = list(offline[int(idx[b])]) if offline is not None else online[b]
        row = []
        for _ in range(n):
            if _is_hard(slot, mining.easy_to_hard_ratio) and hard_pool:
                row.append(hard_pool.pop(0))
            else:
                row.extend(mine_random_negatives(pool, 1, rng, exclude={e.positive_id, *row}))
            slot += 1
        out.append(row)
    return out
