"""Instance-matching supervision: lookup-table softmax loss over labeled
prototypes plus a circular queue of unlabeled features, combined with a
cosine-margin triplet term.

Table and queue are non-differentiable buffers; gradients flow only through
the query embeddings (and live mini-batch members in the triplet term).
"""
from __future__ import annotations

import torch
import torch.nn as nn

UNLABELED = -1
UNIT_NORM_TOL = 1e-3  # loose enough for finite-difference probes around unit points


def _require_unit(x, what):
    norms = x.norm(dim=-1)
    if torch.any((norms - 1.0).abs() > UNIT_NORM_TOL):
        raise ValueError(f"{what} must be L2-normalized (max deviation "
                         f"{float((norms - 1.0).abs().max()):.2e})")


class OimState(nn.Module):
    """Lookup table of identity prototypes and a circular queue of unlabeled
    features, both unit-norm.  Rows are masked out of the softmax until their
    first update."""

    def __init__(self, num_ids, dim, queue_size=500, temperature=1.0 / 30.0, momentum=0.5):
        super().__init__()
        if num_ids < 1:
            raise ValueError("need at least one labeled identity")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.num_ids = num_ids
        self.dim = dim
        self.queue_size = queue_size
        self.temperature = temperature
        self.momentum = momentum
        self.register_buffer("lut", torch.zeros(num_ids, dim))
        self.register_buffer("lut_valid", torch.zeros(num_ids, dtype=torch.bool))
        self.register_buffer("queue", torch.zeros(queue_size, dim))
        self.register_buffer("queue_len", torch.zeros((), dtype=torch.long))
        self.register_buffer("queue_ptr", torch.zeros((), dtype=torch.long))

    def queue_entries(self):
        """Live queue rows, oldest first (wraparound resolved)."""
        n = int(self.queue_len)
        if n < self.queue_size:
            return self.queue[:n]
        p = int(self.queue_ptr)
        return torch.cat([self.queue[p:], self.queue[:p]], dim=0)

    @torch.no_grad()
    def update(self, embeddings, labels):
        """Post-step state refresh: momentum-update labeled prototypes,
        push unlabeled features into the queue (evicting the oldest)."""
        _require_unit(embeddings, "stored features")
        for x, label in zip(embeddings.detach(), labels):
            label = int(label)
            if label == UNLABELED:
                if self.queue_size == 0:
                    continue
                p = int(self.queue_ptr)
                self.queue[p] = x
                self.queue_ptr.fill_((p + 1) % self.queue_size)
                self.queue_len.fill_(min(int(self.queue_len) + 1, self.queue_size))
                continue
            if not 0 <= label < self.num_ids:
                raise ValueError(f"label {label} outside the identity registry")
            if self.lut_valid[label]:
                mixed = self.momentum * self.lut[label] + (1.0 - self.momentum) * x
            else:
                mixed = x.clone()
            self.lut[label] = mixed / mixed.norm().clamp_min(1e-12)
            self.lut_valid[label] = True


def oim_prob(x, state):
    """Eq.-style softmax over table entries and queue entries jointly.

    Returns (B, L + live_queue) probabilities: first L columns are the labeled
    identities (zero where the row is still unseeded), the rest the queue.
    """
    if x.dim() == 1:
        x = x.unsqueeze(0)
    _require_unit(x, "query embeddings")
    if not bool(state.lut_valid.any()):
        raise ValueError("lookup table is empty: no identity has been seeded yet")
    refs = [state.lut[state.lut_valid], state.queue_entries()]
    logits = x @ torch.cat(refs, dim=0).t() / state.temperature
    probs = torch.softmax(logits, dim=1)
    n_valid = int(state.lut_valid.sum())
    out = x.new_zeros(x.shape[0], state.num_ids + probs.shape[1] - n_valid)
    valid_idx = torch.nonzero(state.lut_valid, as_tuple=False).squeeze(1)
    out[:, valid_idx] = probs[:, :n_valid]
    out[:, state.num_ids:] = probs[:, n_valid:]
    return out


def oim_loss(x, labels, state):
    """Mean negative log-likelihood of each sample's identity column.

    Samples whose prototype row is not yet seeded are skipped (they seed it in
    the following update).  Returns (loss, n_used); loss is 0 when no sample
    is usable.
    """
    if x.dim() == 1:
        x = x.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise ValueError("one label per embedding required")
    if torch.any(labels < 0) or torch.any(labels >= state.num_ids):
        raise ValueError("labels must index the identity registry")
    usable = state.lut_valid[labels]
    if not bool(usable.any()):
        return x.sum() * 0.0, 0
    probs = oim_prob(x[usable], state)
    picked = probs[torch.arange(int(usable.sum())), labels[usable]]
    return -torch.log(picked.clamp_min(1e-30)).mean(), int(usable.sum())


class TripletSkip(Exception):
    """Raised when no positive or negative candidate exists for a sample."""


def triplet_sample(index, embeddings, labels, state, num_pos, num_neg, generator=None):
    """Sample positives/negatives for embeddings[index] from the mini-batch
    joined with the lookup table, without replacement.

    Positives share the sample's label (the sample itself excluded); negatives
    carry any other label.  Short candidate pools are used in full.
    """
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    label = int(labels[index])
    if label == UNLABELED:
        raise TripletSkip("unlabeled sample")
    pos, neg = [], []
    for j in range(embeddings.shape[0]):
        if j == index or int(labels[j]) == UNLABELED:
            continue
        (pos if int(labels[j]) == label else neg).append(embeddings[j])
    for row in range(state.num_ids):
        if not bool(state.lut_valid[row]):
            continue
        (pos if row == label else neg).append(state.lut[row])
    if not pos or not neg:
        raise TripletSkip(f"no {'positive' if not pos else 'negative'} candidate for sample {index}")

    def pick(pool, k):
        if len(pool) <= k:
            return torch.stack(pool)
        sel = torch.randperm(len(pool), generator=generator)[:k]
        return torch.stack([pool[i] for i in sel])

    return pick(pos, num_pos), pick(neg, num_neg)


def triplet_loss(x, positives, negatives, margin):
    """Hinge on the cosine-similarity gap: max(margin - (min pos - max neg), 0)."""
    if positives.numel() == 0 or negatives.numel() == 0:
        raise TripletSkip("empty candidate set")
    _require_unit(x, "anchor")
    _require_unit(positives, "positives")
    _require_unit(negatives, "negatives")
    gap = (positives @ x).min() - (negatives @ x).max()
    return torch.clamp(margin - gap, min=0.0)


def boim_loss(embeddings, labels, state, *, margin, num_pos, num_neg, generator=None):
    """Combined supervision over a mini-batch of unit-norm representations.

    Returns a dict with the combined loss and its components; triplet terms
    that cannot be formed are skipped, falling back to the matching loss
    alone for those samples.
    """
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    labeled = labels != UNLABELED
    loss_oim = embeddings.sum() * 0.0
    n_oim = 0
    if bool(labeled.any()):
        loss_oim, n_oim = oim_loss(embeddings[labeled], labels[labeled], state)
    trip_terms = []
    for i in range(embeddings.shape[0]):
        if int(labels[i]) == UNLABELED:
            continue
        try:
            pos, neg = triplet_sample(i, embeddings, labels, state, num_pos, num_neg, generator)
            trip_terms.append(triplet_loss(embeddings[i], pos, neg, margin))
        except TripletSkip:
            continue
    loss_triplet = torch.stack(trip_terms).mean() if trip_terms else embeddings.sum() * 0.0
    return {
        "loss": loss_oim + loss_triplet,
        "oim": loss_oim,
        "triplet": loss_triplet,
        "n_oim": n_oim,
        "n_triplet": len(trip_terms),
    }
