"""Prototype-based open-world contrastive learning on embedding dumps.

The learner is deliberately small: a linear map followed by row normalization
stands in for a deep encoder, and "augmented views" are Gaussian jitters of
the raw inputs.  Everything else follows the full-scale recipe — a store of
unit-norm class prototypes updated moving-average style, a prototype-similarity
split of the unlabeled pool into candidate-novel and the rest, pseudo-labels
by nearest prototype (the E-step), and a weighted sum of three contrastive
losses: a pseudo-label loss on the novel candidates, a supervised loss on the
labeled batch, and a view-pair loss on all unlabeled data.  All gradients are
analytic so finite differences can audit the whole pipeline.

Conventions fixed here (the underlying method leaves them open):

* The OOD split and pseudo-labels are computed per *sample* on un-jittered
  embeddings; both views of a sample inherit its flag and pseudo-label.
* Prototype updates within a batch run in dataset order, labeled rows first,
  then flagged novel rows.  Unlabeled samples not flagged novel never touch
  the store (they still contribute to the view-pair loss).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .data import EmbeddingSet, UNIT_NORM_TOL
from .metrics import clustering_accuracy, kmeans

_DEGENERATE_NORM = 1e-12


@dataclass
class PrototypeStore:
    """One unit-norm prototype row per class: known classes first, then novel.

    ``gamma`` is the moving-average momentum; ``n_known`` the number of
    leading rows that correspond to labeled (known) classes.
    """

    M: np.ndarray
    gamma: float
    n_known: int

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=np.float64)
        if self.M.ndim != 2:
            raise ValueError("M must be C_all x d")
        norms = np.linalg.norm(self.M, axis=1)
        if self.M.shape[0] > 0 and np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
            raise ValueError("prototype rows must be unit norm")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 1 <= self.n_known < self.M.shape[0]:
            raise ValueError("need 1 <= n_known < C_all")

    @property
    def n_classes(self) -> int:
        return self.M.shape[0]

    @property
    def dim(self) -> int:
        return self.M.shape[1]


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    ``percentile`` is the nearest-rank percentile (from below) of the labeled
    prototype-similarity scores that sets the novelty threshold; ``jitter``
    scales the Gaussian view augmentation of raw inputs; ``init_scale`` is the
    s in the encoder initialization W = eye + s * G.
    """

    d_in: int
    d_out: int
    n_classes: int
    n_known: int
    lambda_n: float = 0.1
    lambda_l: float = 0.2
    lambda_u: float = 1.0
    tau_n: float = 0.7
    tau_l: float = 0.1
    tau_u: float = 0.4
    percentile: float = 30.0
    gamma: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.5
    jitter: float = 0.1
    init_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.d_in, self.d_out) < 1:
            raise ValueError("encoder dims must be >= 1")
        if not 1 <= self.n_known < self.n_classes:
            raise ValueError("need 1 <= n_known < n_classes")
        if min(self.lambda_n, self.lambda_l, self.lambda_u) < 0:
            raise ValueError("loss weights must be >= 0")
        if min(self.tau_n, self.tau_l, self.tau_u) <= 0:
            raise ValueError("temperatures must be > 0")
        if not 0.0 <= self.percentile <= 100.0:
            raise ValueError("percentile must lie in [0, 100]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.jitter < 0 or self.init_scale < 0:
            raise ValueError("jitter and init_scale must be >= 0")


@dataclass
class EpochRecord:
    """One history row; losses and the threshold are means over the epoch's batches.

    ``novel_count`` totals the unlabeled samples flagged novel across batches.
    Accuracies are computed at epoch end on un-jittered embeddings of the full
    dataset: ``novel_acc``/``all_acc`` are matched clustering accuracies over
    the truly-novel / all unlabeled samples, ``known_acc`` is the plain
    pseudo-label hit rate on unlabeled samples of known classes (prototypes of
    known classes are index-aligned, so no matching is involved).
    """

    epoch: int
    loss_n: float
    loss_l: float
    loss_u: float
    loss_total: float
    threshold: float
    novel_count: int
    novel_acc: float
    known_acc: float
    all_acc: float
    grad_norm: float
    stagnant: bool = False

    def csv_row(self) -> list:
        return [self.epoch, self.loss_n, self.loss_l, self.loss_u, self.loss_total,
                self.threshold, self.novel_count, self.novel_acc, self.known_acc,
                self.all_acc]


HISTORY_COLUMNS = ["epoch", "L_n", "L_l", "L_u", "total", "lambda", "novel_count",
                   "novel_acc", "known_acc", "all_acc"]


@dataclass
class TrainState:
    encoder: np.ndarray
    store: PrototypeStore
    epoch: int = 0
    history: list[EpochRecord] = field(default_factory=list)


def _as_rows(features) -> np.ndarray:
    x = features.vectors if isinstance(features, EmbeddingSet) else features
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _embed_rows(encoder: np.ndarray, raw: np.ndarray) -> np.ndarray:
    u = raw @ encoder
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms < _DEGENERATE_NORM):
        bad = int(np.flatnonzero(norms < _DEGENERATE_NORM)[0])
        raise ValueError(f"degenerate embedding: row {bad} maps to (near) zero")
    return u / norms[:, None]


def embed(state, features) -> EmbeddingSet:
    """Encode raw rows as unit-norm embeddings: z = normalize(W_e^T x).

    ``state`` may be a TrainState or a bare d_in x d encoder matrix.  Labels
    ride along unchanged.  Rows whose image has norm below 1e-12 raise.
    """
    encoder = state.encoder if isinstance(state, TrainState) else np.asarray(state, dtype=np.float64)
    raw = _as_rows(features)
    if raw.shape[1] != encoder.shape[0]:
        raise ValueError("raw dimension does not match encoder input dimension")
    z = _embed_rows(encoder, raw)
    labels = features.labels if isinstance(features, EmbeddingSet) else None
    return EmbeddingSet(z, labels, True)


def known_scores(store: PrototypeStore, embeddings) -> np.ndarray:
    """Per row: max cosine similarity against the known-class prototypes."""
    z = _as_rows(embeddings)
    return np.max(z @ store.M[: store.n_known].T, axis=1)


def _nearest_rank(values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile from below of a 1-D sample."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(p / 100.0 * v.size))
    return float(v[rank - 1])


def split_ood(embeddings, store: PrototypeStore, labeled_scores,
              percentile: float) -> tuple[np.ndarray, float]:
    """Flag candidate-novel rows: known-prototype score strictly below the threshold.

    The threshold is the nearest-rank ``percentile`` of ``labeled_scores``
    (so percentile 0 takes the minimum and flags the fewest rows).  Returns
    (indices of flagged rows, threshold).
    """
    scores_l = np.asarray(labeled_scores, dtype=np.float64).ravel()
    if scores_l.size == 0:
        raise ValueError("need at least one labeled score")
    if not 0.0 <= percentile <= 100.0:
        raise ValueError("percentile must lie in [0, 100]")
    lam = _nearest_rank(scores_l, percentile)
    novel = np.flatnonzero(known_scores(store, embeddings) < lam)
    return novel, lam


def pseudo_label(embeddings, store: PrototypeStore) -> np.ndarray:
    """Nearest prototype over *all* classes; ties go to the lowest class index."""
    z = _as_rows(embeddings)
    return np.argmax(z @ store.M.T, axis=1).astype(np.int64)


def label_positive_sets(labels) -> list[np.ndarray]:
    """Positive set per anchor: every other row carrying the same label."""
    y = np.asarray(labels).ravel()
    idx = np.arange(y.size)
    return [np.flatnonzero((y == y[i]) & (idx != i)) for i in range(y.size)]


def view_positive_sets(n_samples: int) -> list[np.ndarray]:
    """Positive sets for a stacked two-view batch: row i pairs with row i + n."""
    return [np.array([(i + n_samples) % (2 * n_samples)]) for i in range(2 * n_samples)]


class ContrastiveResult(NamedTuple):
    loss: float
    grad: np.ndarray
    n_anchors: int
    skipped: int


def contrastive_loss(embeddings, positive_sets: Sequence[np.ndarray],
                     temperature: float) -> ContrastiveResult:
    """Mean per-anchor contrastive loss with analytic gradient.

    Per anchor z with positives P and negatives N = batch minus the anchor:
    -(1/|P|) sum_{p in P} log( exp(z.z_p / t) / sum_{n in N} exp(z.z_n / t) ).
    Anchors with an empty positive set are skipped and counted; the log-sum-exp
    is computed stably.  The gradient is of the mean loss w.r.t. every row.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = _as_rows(embeddings)
    m = z.shape[0]
    if len(positive_sets) != m:
        raise ValueError("need one positive set per row")
    anchors = [i for i in range(m) if len(positive_sets[i]) > 0]
    skipped = m - len(anchors)
    if not anchors:
        return ContrastiveResult(0.0, np.zeros_like(z), 0, skipped)

    sims = (z @ z.T) / temperature
    n_a = len(anchors)
    # R collects, per anchor row, softmax weights minus the positive-average
    # indicator; both loss and gradient fall out of it.
    r = np.zeros((n_a, m))
    loss = 0.0
    for row, i in enumerate(anchors):
        neg = np.delete(np.arange(m), i)
        lse = logsumexp(sims[i, neg])
        pos = np.asarray(positive_sets[i], dtype=np.intp)
        if np.any(pos == i) or np.any((pos < 0) | (pos >= m)):
            raise ValueError("positive sets must index other rows of the batch")
        loss += lse - float(np.mean(sims[i, pos]))
        r[row, neg] = np.exp(sims[i, neg] - lse)
        r[row, pos] -= 1.0 / pos.size
    loss /= n_a

    scale = 1.0 / (n_a * temperature)
    grad = r.T @ z[anchors] * scale
    grad[anchors] += r @ z * scale
    return ContrastiveResult(float(loss), grad, n_a, skipped)


@dataclass
class LossBatches:
    """Embedded two-view sub-batches for one optimization step.

    ``novel`` rows are the views of flagged samples with their pseudo-labels;
    ``unlabeled`` is the full unlabeled view stack [first views; second views]
    (novel rows are a subset of it).  Any sub-batch may be empty.
    """

    novel: np.ndarray
    novel_labels: np.ndarray
    labeled: np.ndarray
    labeled_labels: np.ndarray
    unlabeled: np.ndarray


@dataclass
class OpenConLoss:
    """Unweighted component losses, their weighted total, and per-batch gradients."""

    loss_n: float
    loss_l: float
    loss_u: float
    total: float
    grad_novel: np.ndarray
    grad_labeled: np.ndarray
    grad_unlabeled: np.ndarray
    skipped_anchors: int


def opencon_loss(batches: LossBatches, config: TrainConfig) -> OpenConLoss:
    """Evaluate the three contrastive components and their weighted sum.

    Components are reported unweighted; the total applies the lambda weights.
    Gradients are of the unweighted components w.r.t. their own sub-batch rows.
    """
    novel = _as_rows(batches.novel) if len(batches.novel) else np.zeros((0, 1))
    labeled = _as_rows(batches.labeled) if len(batches.labeled) else np.zeros((0, 1))
    unlabeled = _as_rows(batches.unlabeled) if len(batches.unlabeled) else np.zeros((0, 1))

    if novel.shape[0]:
        res_n = contrastive_loss(novel, label_positive_sets(batches.novel_labels), config.tau_n)
    else:
        res_n = ContrastiveResult(0.0, np.zeros_like(novel), 0, 0)
    if labeled.shape[0]:
        res_l = contrastive_loss(labeled, label_positive_sets(batches.labeled_labels), config.tau_l)
    else:
        res_l = ContrastiveResult(0.0, np.zeros_like(labeled), 0, 0)
    if unlabeled.shape[0]:
        if unlabeled.shape[0] % 2:
            raise ValueError("unlabeled stack must hold two views per sample")
        res_u = contrastive_loss(unlabeled, view_positive_sets(unlabeled.shape[0] // 2),
                                 config.tau_u)
    else:
        res_u = ContrastiveResult(0.0, np.zeros_like(unlabeled), 0, 0)

    total = (config.lambda_n * res_n.loss + config.lambda_l * res_l.loss
             + config.lambda_u * res_u.loss)
    return OpenConLoss(res_n.loss, res_l.loss, res_u.loss, float(total),
                       res_n.grad, res_l.grad, res_u.grad,
                       res_n.skipped + res_l.skipped + res_u.skipped)


def prototype_update(store: PrototypeStore, z, c: int) -> PrototypeStore:
    """Moving-average prototype update: mu_c := normalize(gamma mu_c + (1-gamma) z).

    Mutates row c in place and returns the store.  ``z`` must be unit-norm.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    if not 0 <= c < store.n_classes:
        raise ValueError("class index out of range")
    if abs(np.linalg.norm(z) - 1.0) > 1e-6:
        raise ValueError("z must be unit norm")
    v = store.gamma * store.M[c] + (1.0 - store.gamma) * z
    norm = np.linalg.norm(v)
    if norm < _DEGENERATE_NORM:
        raise ValueError("update cancels the prototype (gamma mu_c = -(1-gamma) z)")
    store.M[c] = v / norm
    return store


def _renormalized_jitter(raw: np.ndarray, scale: float,
                         rng: np.random.Generator) -> np.ndarray:
    """One augmented view: add Gaussian noise to each raw row, re-normalize."""
    view = raw + scale * rng.standard_normal(raw.shape)
    norms = np.linalg.norm(view, axis=1)
    for i in np.flatnonzero(norms < _DEGENERATE_NORM):
        view[i] = raw[i] + scale * rng.standard_normal(raw.shape[1])
        norms[i] = np.linalg.norm(view[i])
        if norms[i] < _DEGENERATE_NORM:
            raise ValueError("jittered row collapsed to zero twice")
    return view / norms[:, None]


def _chain_to_encoder(raw: np.ndarray, encoder: np.ndarray,
                      grad_z: np.ndarray) -> np.ndarray:
    """Backpropagate a gradient on normalized embeddings through z = normalize(W^T x)."""
    u = raw @ encoder
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    z = u / norms
    grad_u = (grad_z - np.sum(grad_z * z, axis=1, keepdims=True) * z) / norms
    return raw.T @ grad_u


def _epoch_metrics(encoder, store, unlabeled: EmbeddingSet,
                   n_known: int) -> tuple[float, float, float]:
    if unlabeled.labels is None:
        return float("nan"), float("nan"), float("nan")
    z = _embed_rows(encoder, _as_rows(unlabeled))
    pred = pseudo_label(z, store)
    truth = np.asarray(unlabeled.labels, dtype=np.int64)
    novel_mask = truth >= n_known
    novel_acc = (clustering_accuracy(pred[novel_mask], truth[novel_mask])
                 if novel_mask.any() else float("nan"))
    known_acc = (float(np.mean(pred[~novel_mask] == truth[~novel_mask]))
                 if (~novel_mask).any() else float("nan"))
    return novel_acc, known_acc, clustering_accuracy(pred, truth)


def em_train(labeled: EmbeddingSet, unlabeled: EmbeddingSet,
             config: TrainConfig) -> TrainState:
    """Run the EM-style training loop; deterministic given the config seed.

    Per batch: jitter two views, embed, split the unlabeled batch by
    prototype similarity (threshold from the labeled batch), pseudo-label the
    flagged samples, take one SGD step on the weighted contrastive loss, then
    fold the un-jittered embeddings into the prototypes.  Unlabeled labels, if
    present, are used solely for the per-epoch accuracy columns of the history.

    A history row is appended every epoch; three consecutive epochs with an
    (essentially) zero encoder gradient mark the rows stagnant and emit a
    single warning.
    """
    if labeled.labels is None:
        raise ValueError("labeled set must carry labels")
    y_l = np.asarray(labeled.labels, dtype=np.int64)
    if y_l.min() < 0 or y_l.max() >= config.n_known:
        raise ValueError("labeled labels must lie in [0, n_known)")
    if set(range(config.n_known)) - set(y_l.tolist()):
        raise ValueError("labeled set must cover every known class")
    if labeled.d != config.d_in or unlabeled.d != config.d_in:
        raise ValueError("dataset dimension must equal d_in")

    rng = np.random.default_rng(config.seed)
    encoder = np.eye(config.d_in, config.d_out) + config.init_scale * rng.standard_normal(
        (config.d_in, config.d_out))

    x_l = _as_rows(labeled)
    x_u = _as_rows(unlabeled)
    z_l0 = _embed_rows(encoder, x_l)
    # Known prototypes start at the labeled class means (the M-step optimum
    # for the initial assignment); novel prototypes start random.
    n_novel = config.n_classes - config.n_known
    proto = np.zeros((config.n_classes, config.d_out))
    for c in range(config.n_known):
        proto[c] = z_l0[y_l == c].mean(axis=0)
    proto[config.n_known:] = rng.standard_normal((n_novel, config.d_out))
    proto /= np.linalg.norm(proto, axis=1, keepdims=True)
    store = PrototypeStore(proto, config.gamma, config.n_known)
    # Swap the random novel rows for K-means centers of the initially flagged
    # set when it can support one cluster per novel class.  A random prototype
    # sitting nearest to several novel clusters is otherwise a stable failure:
    # it absorbs them all while the losers never receive an update.  With
    # lambda_n = 0 the whole novelty branch (this placement, the novel loss,
    # and the moving-average tracking) is off and training degenerates to
    # SupCon on the labeled set plus SimCLR on the unlabeled set.
    if config.lambda_n > 0:
        z_u0 = _embed_rows(encoder, x_u)
        flagged0, _ = split_ood(z_u0, store, known_scores(store, z_l0),
                                config.percentile)
        if flagged0.size >= 2 * n_novel:
            _, centers = kmeans(z_u0[flagged0], n_novel, config.seed)
            norms = np.linalg.norm(centers, axis=1)
            if np.all(norms > _DEGENERATE_NORM):
                store.M[config.n_known:] = centers / norms[:, None]
    state = TrainState(encoder, store)

    zero_grad_run = 0
    warned = False
    for epoch in range(config.epochs):
        order_u = rng.permutation(unlabeled.n)
        order_l = rng.permutation(labeled.n)
        batch_stats, lam_vals, grad_norms = [], [], []
        novel_total = 0
        l_cursor = 0
        for start in range(0, unlabeled.n, config.batch_size):
            idx_u = order_u[start:start + config.batch_size]
            take = min(config.batch_size, labeled.n)
            if l_cursor + take > labeled.n:
                order_l = rng.permutation(labeled.n)
                l_cursor = 0
            idx_l = order_l[l_cursor:l_cursor + take]
            l_cursor += take

            raw_l, raw_u = x_l[idx_l], x_u[idx_u]
            views_l = np.vstack([_renormalized_jitter(raw_l, config.jitter, rng),
                                 _renormalized_jitter(raw_l, config.jitter, rng)])
            views_u = np.vstack([_renormalized_jitter(raw_u, config.jitter, rng),
                                 _renormalized_jitter(raw_u, config.jitter, rng)])
            a_l = _embed_rows(state.encoder, views_l)
            a_u = _embed_rows(state.encoder, views_u)
            clean_l = _embed_rows(state.encoder, raw_l)
            clean_u = _embed_rows(state.encoder, raw_u)

            novel_rows, lam = split_ood(clean_u, store, known_scores(store, clean_l),
                                        config.percentile)
            labels_n = pseudo_label(clean_u[novel_rows], store)
            view_rows = np.concatenate([novel_rows, novel_rows + idx_u.size])

            batches = LossBatches(a_u[view_rows], np.tile(labels_n, 2),
                                  a_l, np.tile(y_l[idx_l], 2), a_u)
            piece = opencon_loss(batches, config)

            grad_u_z = config.lambda_u * piece.grad_unlabeled
            if view_rows.size:
                grad_u_z[view_rows] += config.lambda_n * piece.grad_novel
            grad_w = _chain_to_encoder(views_u, state.encoder, grad_u_z)
            grad_w += _chain_to_encoder(views_l, state.encoder,
                                        config.lambda_l * piece.grad_labeled)
            state.encoder = state.encoder - config.learning_rate * grad_w

            # Prototype updates use the pre-step embeddings: labeled rows
            # first, then flagged novel rows, each in dataset order.  With
            # lambda_n = 0 the novelty branch is off entirely (the GCD-style
            # baseline): no novel loss and no novel-prototype tracking.
            for j in np.argsort(idx_l):
                prototype_update(store, clean_l[j], int(y_l[idx_l[j]]))
            if config.lambda_n > 0:
                for j in novel_rows[np.argsort(idx_u[novel_rows])]:
                    novel_block = store.M[config.n_known:]
                    c = config.n_known + int(np.argmax(novel_block @ clean_u[j]))
                    prototype_update(store, clean_u[j], c)

            batch_stats.append((piece.loss_n, piece.loss_l, piece.loss_u, piece.total))
            lam_vals.append(lam)
            grad_norms.append(float(np.linalg.norm(grad_w)))
            novel_total += int(novel_rows.size)

        mean_stats = np.mean(np.asarray(batch_stats), axis=0)
        grad_norm = float(np.mean(grad_norms))
        zero_grad_run = zero_grad_run + 1 if grad_norm < 1e-12 else 0
        stagnant = zero_grad_run >= 3
        if stagnant and not warned:
            warnings.warn("encoder gradient has been zero for 3 consecutive epochs")
            warned = True
        novel_acc, known_acc, all_acc = _epoch_metrics(state.encoder, store,
                                                       unlabeled, config.n_known)
        state.history.append(EpochRecord(epoch, float(mean_stats[0]), float(mean_stats[1]),
                                         float(mean_stats[2]), float(mean_stats[3]),
                                         float(np.mean(lam_vals)), novel_total,
                                         novel_acc, known_acc, all_acc, grad_norm,
                                         stagnant))
        state.epoch = epoch + 1
    return state


@dataclass
class ConsistencyReport:
    """Numerical EM-view diagnostics of a trained state.

    ``alignment_gain`` must be >= -1e-10 (replacing prototypes by normalized
    class means cannot lower the alignment sum); ``decomposition_error`` is
    the worst |L - (alignment + log-partition)| over seeded batches; the
    lower-bound fields are reported, not asserted, since the population
    inequality can be violated by sampling noise on finite data.
    """

    alignment_current: float
    alignment_optimal: float
    alignment_gain: float
    mstep_optimal: bool
    decomposition_error: float
    bound_lhs: float
    bound_rhs: float
    bound_margin: float
    gamma_hat: float


def _direct_decomposition(z: np.ndarray, positives: list[np.ndarray],
                          tau: float) -> float:
    """Mean L_a + L_b recomputed with plain sums (no log-sum-exp shortcut)."""
    total, count = 0.0, 0
    for i in range(z.shape[0]):
        pos = positives[i]
        if len(pos) == 0:
            continue
        align = -sum(float(z[i] @ z[p]) / tau for p in pos) / len(pos)
        partition = math.log(sum(math.exp(float(z[i] @ z[j]) / tau)
                                 for j in range(z.shape[0]) if j != i))
        total += align + partition
        count += 1
    return total / count if count else 0.0


def em_consistency_checks(state: TrainState, labeled: EmbeddingSet,
                          unlabeled: EmbeddingSet, config: TrainConfig,
                          n_batches: int = 20, batch_size: int = 32,
                          seed: int = 0) -> ConsistencyReport:
    """Audit the EM view of a trained state on the flagged-novel set.

    (a) With assignments fixed to the current pseudo-labels, swapping each
    prototype for its normalized class mean cannot decrease the alignment sum
    over the flagged set.  (b) The pseudo-label loss equals alignment plus
    log-partition when both are recomputed directly.  (c) Both sides of the
    mean-classifier lower bound are evaluated and the margin reported.
    """
    z_l = _embed_rows(state.encoder, _as_rows(labeled))
    z_u = _embed_rows(state.encoder, _as_rows(unlabeled))
    novel_rows, _ = split_ood(z_u, state.store, known_scores(state.store, z_l),
                              config.percentile)
    z_n = z_u[novel_rows]
    if z_n.shape[0] < 2:
        raise ValueError("need at least two flagged-novel samples to audit")
    pseudo = pseudo_label(z_n, state.store)

    # (a) M-step optimality of normalized class means.
    current = optimal = 0.0
    for c in np.unique(pseudo):
        members = z_n[pseudo == c]
        current += float(np.sum(members @ state.store.M[c]))
        optimal += float(np.linalg.norm(members.sum(axis=0)))
    gain = optimal - current

    # (b) loss = alignment + log-partition, recomputed with plain sums.
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_batches):
        take = min(batch_size, z_n.shape[0])
        rows = rng.choice(z_n.shape[0], size=take, replace=False)
        sets = label_positive_sets(pseudo[rows])
        res = contrastive_loss(z_n[rows], sets, config.tau_n)
        if res.n_anchors == 0:
            continue
        worst = max(worst, abs(res.loss - _direct_decomposition(z_n[rows], sets,
                                                                config.tau_n)))

    # (c) mean-classifier lower bound on the full flagged set.
    res_full = contrastive_loss(z_n, label_positive_sets(pseudo), config.tau_n)
    classes, counts = np.unique(pseudo, return_counts=True)
    p_c = counts / counts.sum()
    gamma_hat = float(np.sum(p_c ** 2))
    means = np.stack([z_n[pseudo == c].mean(axis=0) for c in classes])
    rhs = 0.0
    for a in range(classes.size):
        for b in range(classes.size):
            if a != b:
                rhs -= p_c[a] * p_c[b] * float(means[a] @ (means[a] - means[b]))
    rhs /= config.tau_n

    return ConsistencyReport(current, optimal, gain, bool(gain >= -1e-10), worst,
                             res_full.loss, rhs, res_full.loss - rhs, gamma_hat)
