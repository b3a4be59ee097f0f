"""Triplet hinge loss over cosine distance, with gradients for both towers."""
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgument


@dataclass
class TripletBatch:
    triplets: list  # (query, positive, [negatives]) FeatureRecords
    margin: float

    def __post_init__(self):
        if not 0.0 < self.margin < 2.0:
            raise InvalidArgument(f"margin {self.margin} outside (0, 2)")
        for _, _, negs in self.triplets:
            if not negs:
                raise InvalidArgument("every triplet needs at least one negative")


def hinge_terms(d_pos, d_neg, margin):
    """Per-term hinge values ``max(0, D+ - D- + m)``."""
    return np.maximum(0.0, np.asarray(d_pos) - np.asarray(d_neg) + margin)


def triplet_loss_from_embeddings(yq, yp, yn, owner, margin):
    """Loss and embedding-space gradients.

    ``yq``/``yp`` are (n, d) unit rows; ``yn`` holds every negative, with
    ``owner[k]`` the triplet index of negative ``k``. The hinge subgradient
    at exactly zero is taken as zero.
    """
    d_pos = 1.0 - np.einsum("ij,ij->i", yq, yp)
    d_neg = 1.0 - np.einsum("ij,ij->i", yq[owner], yn)
    terms = d_pos[owner] - d_neg + margin
    active = terms > 0.0
    loss = float(terms[active].sum())
    a = active.astype(np.float64)[:, None]
    dyq = np.zeros_like(yq)
    np.add.at(dyq, owner, a * (yn - yp[owner]))
    dyp = np.zeros_like(yp)
    np.add.at(dyp, owner, -a * yq[owner])
    dyn = a * yq[owner]
    return loss, dyq, dyp, dyn, int(active.sum())


def triplet_loss(model_q, model_d, batch):
    """Return ``(loss, {"query": grads, "document": grads})``.

    Document-tower gradients from positives and negatives are summed.
    """
    queries = [t[0] for t in batch.triplets]
    positives = [t[1] for t in batch.triplets]
    negatives, owner = [], []
    for i, (_, _, negs) in enumerate(batch.triplets):
        negatives.extend(negs)
        owner.extend([i] * len(negs))
    owner = np.asarray(owner, dtype=np.int64)
    n = len(positives)
    yq, cq = model_q.forward(model_q.featurize(queries))
    yd, cd = model_d.forward(model_d.featurize(positives + negatives))
    loss, dyq, dyp, dyn, _ = triplet_loss_from_embeddings(yq, yd[:n], yd[n:], owner, batch.margin)
    grads = {"query": model_q.backward(cq, dyq),
             "document": model_d.backward(cd, np.concatenate([dyp, dyn]))}
    return loss, grads
