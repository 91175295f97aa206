"""Training orchestration: structure-loss pretraining, then joint iterations
of center update, soft assignment, stopping check, and one epoch of
mini-batch weight updates with the target distribution frozen.

Full-dataset embeddings for centers and labels use the clean images; the
augmented views feed only the weight updates. Centers found in consecutive
iterations are greedily matched by coordinates so the stopping rule compares
stable cluster identities.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import cluster_head, losses
from . import diffcore as dc
from .diffcore import AdamState, Tape, Tensor, adam_step
from .losses import combine, default_perplexity
from .metrics import accuracy, hungarian, nmi
from .model import Network, PatchGrid

PAPER_ENC_BLOCKS = 4
PAPER_DEC_BLOCKS = 1
MIN_DIM_LOSS_BATCH = 5  # below this the perplexity target is meaningless


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient goes non-finite."""


@dataclass
class RunConfig:
    """Hyperparameters; defaults follow the reference experimental setup."""

    n_clusters: int
    alpha: float = 0.1
    beta: float = 0.001
    k: int = 50
    neighbor_fraction: float = 0.02
    epsilon: float = 0.001
    lr: float = 0.01
    batch: int = 256
    pretrain_epochs: int = 200
    max_iter: int = 500
    seed: int = 0
    perplexity: float | None = None  # None = min(30, (n - 1) / 3) per batch
    use_transformer: bool = True
    use_clustering_head: bool = True
    use_dim_reduction: bool = True

    def validate(self) -> None:
        if self.n_clusters < 1:
            raise ValueError(f"n_clusters must be >= 1, got {self.n_clusters}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.batch < 2:
            raise ValueError(f"batch must be >= 2, got {self.batch}")
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass(frozen=True)
class PipelineVariant:
    """Which pathway each ablation flag selects."""

    enc_blocks: int
    dec_blocks: int
    density_peak_centers: bool   # off: farthest-point-seeded Lloyd
    neighbor_assignment: bool    # off: plain one-to-one Student-t
    reduce_for_clustering: bool  # off: cluster on the feature space directly


def apply_ablation(config: RunConfig) -> PipelineVariant:
    return PipelineVariant(
        enc_blocks=PAPER_ENC_BLOCKS if config.use_transformer else 0,
        dec_blocks=PAPER_DEC_BLOCKS if config.use_transformer else 0,
        density_peak_centers=config.use_clustering_head,
        neighbor_assignment=config.use_clustering_head,
        reduce_for_clustering=config.use_dim_reduction,
    )


def build_network(config: RunConfig, grid: PatchGrid, rng) -> Network:
    variant = apply_ablation(config)
    return Network(grid, enc_blocks=variant.enc_blocks,
                   dec_blocks=variant.dec_blocks, rng=rng)


@dataclass
class IterationRecord:
    iteration: int
    loss_total: float | None
    loss_rec: float | None
    loss_dim: float | None
    loss_clu: float | None
    label_change: float | None
    acc: float | None
    nmi: float | None
    note: str = ""


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    labels: np.ndarray | None = None
    z_w: np.ndarray | None = None
    z_v: np.ndarray | None = None
    centers: np.ndarray | None = None
    stopped_early: bool = False
    # carried state so a run can resume exactly where it left off
    adam: AdamState | None = None
    iteration: int = 0
    prev_labels: np.ndarray | None = None
    prev_centers: np.ndarray | None = None


def rotate_bilinear(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center, bilinear resampling, zero padding."""
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    phi = math.radians(degrees)
    cos, sin = math.cos(phi), math.sin(phi)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ry, rx = ys - cy, xs - cx
    src_y = cos * ry + sin * rx + cy
    src_x = -sin * ry + cos * rx + cx
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    fy = src_y - y0
    fx = src_x - x0
    out = np.zeros_like(image)
    for dy_c, dx_c, weight in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy, xx = y0 + dy_c, x0 + dx_c
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        out += image[:, yc, xc] * (weight * valid)
    return out


def shift_pad(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation with zero fill."""
    c, h, w = image.shape
    out = np.zeros_like(image)
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[:, ys, xs] = image[:, ys_src, xs_src]
    return out


def augment(image: np.ndarray, rng) -> np.ndarray:
    """Random rotation up to 10 degrees plus an integer shift up to H/10."""
    angle = rng.uniform(-10.0, 10.0)
    max_shift = image.shape[1] / 10.0
    dy = int(round(rng.uniform(-max_shift, max_shift)))
    dx = int(round(rng.uniform(-max_shift, max_shift)))
    out = rotate_bilinear(image, angle) if angle != 0.0 else image.copy()
    if dy or dx:
        out = shift_pad(out, dy, dx)
    return out


def augment_batch(images: np.ndarray, rng) -> np.ndarray:
    return np.stack([augment(img, rng) for img in images])


def stop_check(y_prev, y_new, epsilon: float) -> bool:
    """True when the fraction of changed labels is at most epsilon."""
    y_prev = np.asarray(y_prev)
    y_new = np.asarray(y_new)
    if y_prev.shape != y_new.shape:
        raise ValueError(
            f"stop_check: label lengths differ, {y_prev.shape} vs {y_new.shape}")
    return label_change(y_prev, y_new) <= epsilon


def label_change(y_prev, y_new) -> float:
    y_prev = np.asarray(y_prev)
    y_new = np.asarray(y_new)
    return float(np.count_nonzero(y_prev != y_new)) / y_prev.size


def match_assignment_ids(y_prev, y_raw, k_clusters: int) -> np.ndarray:
    """Align this iteration's cluster ids with the previous iteration's.

    Density-peak ordering (and the embedding's overall drift) can permute
    cluster identity between outer iterations, which would fake
    non-convergence in the stopping rule. The returned ``order`` maps each
    previous slot to the raw id with maximal label agreement (Hungarian on
    the label contingency); it is a permutation for any inputs.
    """
    w = np.zeros((k_clusters, k_clusters))
    np.add.at(w, (np.asarray(y_prev), np.asarray(y_raw)), 1.0)
    return hungarian(-w)


def lloyd_refine(z: np.ndarray, centers: np.ndarray,
                 max_rounds: int = 100) -> np.ndarray:
    """Plain Lloyd iterations from given initial centers."""
    centers = centers.copy()
    assign = None
    for _ in range(max_rounds):
        d2 = ((z[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for t in range(centers.shape[0]):
            members = assign == t
            if members.any():
                centers[t] = z[members].mean(axis=0)
    return centers


def lloyd_centers(z: np.ndarray, k_clusters: int, rng,
                  max_rounds: int = 100) -> np.ndarray:
    """Farthest-point-seeded Lloyd iterations (the clustering-head-off path)."""
    n = z.shape[0]
    chosen = [int(rng.integers(n))]
    min_d2 = ((z - z[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k_clusters:
        nxt = int(np.argmax(min_d2))
        chosen.append(nxt)
        min_d2 = np.minimum(min_d2, ((z - z[nxt]) ** 2).sum(axis=1))
    return lloyd_refine(z, z[chosen], max_rounds)


def refresh_feature_stats(net: Network, images: np.ndarray,
                          batch: int = 256) -> np.ndarray:
    """Clean full-dataset encode; refreezes the reducer-input statistics."""
    zw_parts = []
    for start in range(0, images.shape[0], batch):
        zw_parts.append(net.encode(images[start:start + batch]).values)
    z_w = np.concatenate(zw_parts)
    net.set_feature_stats(z_w)
    return z_w


def embed_dataset(net: Network, images: np.ndarray, batch: int = 256,
                  refresh_stats: bool = True):
    """Clean full-dataset forward pass (no tape): z_w and z_v arrays.

    By default the reducer-input statistics are refrozen from this pass
    before reducing, so every consumer of the returned z_v sees the same
    standardization the next round of updates will use.
    """
    if refresh_stats:
        z_w = refresh_feature_stats(net, images, batch)
    else:
        zw_parts = []
        for start in range(0, images.shape[0], batch):
            zw_parts.append(net.encode(images[start:start + batch]).values)
        z_w = np.concatenate(zw_parts)
    zv_parts = []
    for start in range(0, z_w.shape[0], batch):
        zv_parts.append(net.dim_reduce(z_w[start:start + batch]).values)
    return z_w, np.concatenate(zv_parts)


def _batch_slices(order: np.ndarray, batch: int):
    chunks = [order[i:i + batch] for i in range(0, order.size, batch)]
    if len(chunks) > 1 and chunks[-1].size == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _structure_terms(net: Network, x: np.ndarray, variant: PipelineVariant,
                     perplexity: float | None):
    """Reconstruction (+ optional dimension-reduction) terms for one batch."""
    x_t = dc.constant(x)
    z_w = net.encode(x_t)
    recon = net.decode(z_w)
    l_rec = losses.reconstruction_loss(x_t, recon)
    z_v = net.dim_reduce(z_w) if variant.reduce_for_clustering else None
    if variant.reduce_for_clustering and x.shape[0] >= MIN_DIM_LOSS_BATCH:
        perp = perplexity if perplexity is not None else default_perplexity(x.shape[0])
        phi, _ = losses.high_affinities(z_w, perp)
        omega = losses.low_affinities(z_v)
        l_dim = losses.dim_loss(phi, omega)
    else:
        l_dim = dc.constant(0.0)
    return z_w, z_v, l_rec, l_dim


def _apply_update(net: Network, tape: Tape, loss: Tensor, adam: AdamState,
                  lr: float, where: str) -> AdamState:
    if not np.isfinite(loss.values):
        raise TrainingDiverged(f"non-finite loss at {where}")
    grads = tape.gradients(loss, net.params)
    try:
        new_values, adam = adam_step(net.params, grads, adam, lr=lr)
    except dc.DomainError as err:
        raise TrainingDiverged(f"{err} at {where}")
    net.replace_params(new_values)
    return adam


def pretrain(net: Network, dataset, config: RunConfig, rng,
             on_epoch=None) -> None:
    """Mini-batch Adam on the structure loss; clustering is never touched."""
    config.validate()
    images = dataset.images
    if images.shape[0] == 0:
        raise ValueError("pretrain: empty dataset")
    variant = apply_ablation(config)
    adam = AdamState.for_params(net.params)
    for epoch in range(config.pretrain_epochs):
        if variant.reduce_for_clustering:
            refresh_feature_stats(net, images, config.batch)
        order = rng.permutation(images.shape[0])
        epoch_losses = []
        for ids in _batch_slices(order, config.batch):
            x = augment_batch(images[ids], rng)
            with Tape() as tape:
                _, _, l_rec, l_dim = _structure_terms(
                    net, x, variant, config.perplexity)
                bundle = combine(l_rec, l_dim, dc.constant(0.0),
                                 alpha=0.0, beta=config.beta)
            adam = _apply_update(net, tape, bundle.l_total, adam, config.lr,
                                 f"pretrain epoch {epoch + 1}")
            epoch_losses.append(bundle.floats())
        if on_epoch is not None:
            mean = {key: float(np.mean([e[key] for e in epoch_losses]))
                    for key in epoch_losses[0]}
            on_epoch(epoch + 1, mean)


def _assignment_pass(net: Network, dataset, config: RunConfig,
                     variant: PipelineVariant, rng, prev_centers, prev_labels):
    """Full-dataset embedding, centers, soft assignments, and hard labels."""
    z_w, z_v = embed_dataset(net, dataset.images, config.batch)
    z_act = z_v if variant.reduce_for_clustering else z_w
    n = z_act.shape[0]
    if variant.density_peak_centers:
        bandwidth = cluster_head.bandwidth_dc(z_act, config.neighbor_fraction)
        rho = cluster_head.densities(z_act, bandwidth)
        delta = cluster_head.min_dist_delta(z_act, rho)
        centers, _ = cluster_head.select_centers(rho, delta, z_act,
                                                 config.n_clusters)
    elif prev_centers is None:
        centers = lloyd_centers(z_act, config.n_clusters, rng)
    else:
        # warm start keeps this path deterministic after the first draw
        centers = lloyd_refine(z_act, prev_centers)
    if variant.neighbor_assignment and config.k > 0:
        k_eff = min(config.k, n - 1)
        knn = cluster_head.knn_indices(z_act, k_eff)
        theta = cluster_head.neighbor_weights(z_act, knn)
    else:
        knn, theta = cluster_head.self_neighborhoods(n)
    q = cluster_head.soft_assign(z_act, centers, knn, theta)
    labels = cluster_head.hard_labels(q)
    if prev_labels is not None:
        order = match_assignment_ids(prev_labels, labels, config.n_clusters)
        centers = centers[order]
        q = q[:, order]
        labels = cluster_head.hard_labels(q)
    return z_w, z_v, z_act, centers, q, labels


def train(net: Network, dataset, config: RunConfig, rng, truth=None,
          resume: TrainReport | None = None) -> TrainReport:
    """Joint self-training: Algorithm flow with frozen per-iteration targets.

    Pass a previous TrainReport as ``resume`` (with the matching rng state
    restored by the caller) to continue an interrupted run exactly.
    """
    config.validate()
    images = dataset.images
    n = images.shape[0]
    if config.n_clusters > n:
        raise ValueError(
            f"train: K={config.n_clusters} exceeds dataset size {n}")
    variant = apply_ablation(config)
    report = TrainReport()
    if resume is not None:
        adam = resume.adam
        start = resume.iteration + 1
        y_prev = resume.prev_labels
        prev_centers = resume.prev_centers
    else:
        adam = AdamState.for_params(net.params)
        start = 1
        y_prev = None
        prev_centers = None

    stopped = False
    for iteration in range(start, config.max_iter + 1):
        z_w, z_v, z_act, centers, q, labels = _assignment_pass(
            net, dataset, config, variant, rng, prev_centers, y_prev)
        acc_val = accuracy(labels, truth) if truth is not None else None
        nmi_val = nmi(labels, truth) if truth is not None else None
        change = label_change(y_prev, labels) if y_prev is not None else None
        note = ""
        counts = np.bincount(labels, minlength=config.n_clusters)
        degenerate = bool(np.any(counts == 0))
        if degenerate:
            empty = np.where(counts == 0)[0].tolist()
            note = f"empty hard cluster(s) {empty}"
            warnings.warn(f"train: {note} at iteration {iteration}")
        # A partition with empty clusters is not a valid K-way result to
        # converge to; training continues until the labels are stable AND
        # every cluster is populated.
        if change is not None and change <= config.epsilon and not degenerate:
            report.records.append(IterationRecord(
                iteration, None, None, None, None, change, acc_val, nmi_val,
                note))
            report.labels = labels
            report.z_w, report.z_v = z_w, z_v
            report.centers = centers
            report.stopped_early = True
            stopped = True
            y_prev, prev_centers = labels, centers
            report.iteration = iteration
            break

        p_all = losses.target_distribution(q)
        order = rng.permutation(n)
        step_losses = []
        for ids in _batch_slices(order, config.batch):
            x = augment_batch(images[ids], rng)
            with Tape() as tape:
                z_w_b, z_v_b, l_rec, l_dim = _structure_terms(
                    net, x, variant, config.perplexity)
                z_act_b = z_v_b if variant.reduce_for_clustering else z_w_b
                if variant.neighbor_assignment and config.k > 0:
                    # the batch is a subsample: keep the neighborhood
                    # fraction, not the raw count (k of n-1 -> k_b of B-1)
                    k_eff = min(config.k, n - 1)
                    k_b = max(1, round(k_eff * (ids.size - 1) / (n - 1)))
                    knn_b = cluster_head.knn_indices(z_act_b.values, k_b)
                else:
                    knn_b, _ = cluster_head.self_neighborhoods(ids.size)
                q_b = losses.neighborhood_assignments(z_act_b, centers, knn_b)
                l_clu = losses.clustering_loss(dc.constant(p_all[ids]), q_b)
                bundle = combine(l_rec, l_dim, l_clu,
                                 alpha=config.alpha, beta=config.beta)
            adam = _apply_update(net, tape, bundle.l_total, adam, config.lr,
                                 f"iteration {iteration}")
            step_losses.append(bundle.floats())
        mean = {key: float(np.mean([s[key] for s in step_losses]))
                for key in step_losses[0]}
        report.records.append(IterationRecord(
            iteration, mean["l_total"], mean["l_rec"], mean["l_dim"],
            mean["l_clu"], change, acc_val, nmi_val, note))
        y_prev, prev_centers = labels, centers
        report.iteration = iteration

    if not stopped:
        # Updates happened after the last label computation: one final pass
        # for reporting. The resume state keeps the loop's own labels and
        # centers so a continued run sees exactly what an uninterrupted one
        # would have.
        z_w, z_v, z_act, centers, q, labels = _assignment_pass(
            net, dataset, config, variant, rng, prev_centers, y_prev)
        report.labels = labels
        report.z_w, report.z_v = z_w, z_v
        report.centers = centers

    report.adam = adam
    report.prev_labels = y_prev
    report.prev_centers = prev_centers
    return report
