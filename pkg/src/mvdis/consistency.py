"""Stage 1: consistent encoder trained for transformation invariance, then clustering consistency."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndgrad as nd
from .datasets import AugmentationPolicy, MultiViewBatch, augment
from .ndgrad import MLP, Linear, Module, Tape, Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg: str, last_good: dict | None = None):
        super().__init__(msg)
        self.last_good = last_good


# ---------------------------------------------------------------------------
# losses


def contrastive_loss(z_blocks, tau: float, block_views=None) -> Tensor:
    """Multi-view InfoNCE over the pooled vectors of all augmented blocks.

    ``z_blocks`` holds nb = 2V blocks of B L2-normalised rows each, row k of
    every block being the same instance.  Every anchor treats each other
    copy of its own instance as a positive and all M-1 remaining vectors
    (M = nb·B) as the normaliser; the loss is the mean over all
    anchor/positive pairs.  Equal similarities everywhere give log(M-1).

    With ``block_views`` (the source view of each block) only copies from a
    different view count as positives, and same-view copies of the anchor's
    instance are dropped from the normaliser.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    blocks = [nd.as_tensor(z) for z in z_blocks]
    nb, B = len(blocks), blocks[0].shape[0]
    if nb < 2:
        raise ValueError("need at least two blocks to form positive pairs")
    if B < 2:
        raise ValueError("degenerate batch: a single instance leaves no negatives")
    M = nb * B
    Z = nd.concat(blocks, axis=0)
    sim = nd.matmul(Z, nd.transpose(Z)) / tau
    self_mask = np.where(np.eye(M, dtype=bool), -np.inf, 0.0)
    lse = nd.logsumexp(sim + self_mask, axis=1)
    inst = np.tile(np.arange(B), nb)
    same = (inst[:, None] == inst[None, :]) & ~np.eye(M, dtype=bool)
    if block_views is None:
        pos = same
    else:
        bv = np.repeat(np.asarray(block_views), B)
        if len(bv) != M:
            raise ValueError("block_views needs one entry per block")
        cross = bv[:, None] != bv[None, :]
        pos = same & cross
        if not pos.any(axis=1).all():
            raise ValueError("every block needs a copy from another view")
        drop = same & ~cross
        lse = nd.logsumexp(sim + np.where(drop | np.eye(M, dtype=bool), -np.inf, 0.0), axis=1)
    w = pos / pos.sum(axis=1, keepdims=True)
    pos_mean = (sim * w).sum(axis=1)
    return (lse - pos_mean).mean()


def batch_entropy(assigns) -> float:
    """Entropy of the batch-mean cluster assignment."""
    g = np.mean([np.asarray(nd.as_tensor(a).data) for a in assigns], axis=(0, 1))
    g = g[g > 0]
    return float(-(g * np.log(g)).sum())


def multiview_clustering_loss(assigns, lambda_clu: float, extra_pairs=(), block_views=None) -> Tensor:
    """Cluster agreement over every pair of assignment blocks plus the entropy term.

    First term: mean over block pairs i<j and rows k of -log<g_i[k], g_j[k]>,
    dot products floored at 1e-12.  ``extra_pairs`` adds (a, b) blocks whose
    rows should also agree (e.g. neighbours).  Second term:
    lambda_clu·Σ_c g'_c log g'_c with g' the mean assignment over all rows
    of ``assigns``; minimising it spreads mass across clusters.  With
    ``block_views`` only blocks from different source views are paired.
    """
    blocks = [nd.as_tensor(a) for a in assigns]
    bv = list(range(len(blocks))) if block_views is None else list(block_views)
    pairs = [(blocks[i], blocks[j]) for i in range(len(blocks)) for j in range(i + 1, len(blocks))
             if bv[i] != bv[j]]
    pairs += [(nd.as_tensor(a), nd.as_tensor(b)) for a, b in extra_pairs]
    if not pairs:
        raise ValueError("need at least two assignment blocks")
    terms = []
    for a, b in pairs:
        dots = nd.floor_at((a * b).sum(axis=1), PROB_FLOOR)
        terms.append(nd.log(dots))
    agreement = -nd.concat(terms, axis=0).mean()
    g_mean = nd.concat(blocks, axis=0).mean(axis=0)
    neg_entropy = (g_mean * nd.log(nd.floor_at(g_mean, PROB_FLOOR))).sum()
    return agreement + lambda_clu * neg_entropy


def clustering_loss(assign_i, assign_j, lambda_clu: float) -> Tensor:
    return multiview_clustering_loss([assign_i, assign_j], lambda_clu)


# ---------------------------------------------------------------------------
# model


@dataclass
class Stage1Config:
    epochs_pretrain: int = 50
    epochs_cluster: int = 30
    batch: int = 128
    tau: float = 0.5
    lambda_clu: float = 2.0
    lr: float = 3e-3
    lr_cluster: float = 1e-4
    weight_decay: float = 3e-2
    cluster_ins_weight: float = 0.0
    hidden: tuple[int, ...] = (512, 256)
    d_e: int = 64
    d_proj: int = 32
    proj_hidden: tuple[int, ...] = (64,)
    use_ins: bool = True
    use_clu: bool = True
    use_knn: bool = False
    cross_view_positives: bool = False
    knn_k: int = 5
    noise_std: float = 0.1
    dropout_prob: float = 0.1
    scale_jitter: tuple[float, float] = (0.9, 1.1)
    occlusion_prob: float = 0.0

    def policy(self, image_shape=None) -> AugmentationPolicy:
        return AugmentationPolicy(self.noise_std, self.dropout_prob, tuple(self.scale_jitter),
                                  occlusion_prob=self.occlusion_prob if image_shape else 0.0,
                                  image_shape=tuple(image_shape) if image_shape else None)


class ConsistentEncoder(Module):
    """Shared encoder E_c with a contrastive head f and a clustering head g."""

    def __init__(self, d_in: int, n_clusters: int, rng: np.random.Generator,
                 hidden=(512, 256), d_e: int = 64, d_proj: int = 32, proj_hidden=(64,)):
        self.encoder = MLP([d_in, *hidden, d_e], rng)
        self.proj = MLP([d_e, *proj_hidden, d_proj], rng)
        self.cluster_head = Linear(d_e, n_clusters, rng)
        self.n_clusters = n_clusters

    def embed(self, x) -> Tensor:
        # E_c ends in a ReLU; S lives in this non-negative embedding space
        return nd.relu(self.encoder(nd.as_tensor(x)))

    def project(self, h: Tensor) -> Tensor:
        return nd.l2_normalize(self.proj(h))

    def assign(self, h: Tensor) -> Tensor:
        return nd.softmax(self.cluster_head(h))

    def encoder_params(self) -> list[Tensor]:
        return self.encoder.parameters()


# ---------------------------------------------------------------------------
# neighbours and pseudo-labels


@dataclass
class NeighborIndex:
    indices: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def mine_neighbors(embeddings: np.ndarray, K: int) -> NeighborIndex:
    """Exact K nearest neighbours under cosine distance, excluding self."""
    X = np.asarray(embeddings, dtype=np.float64)
    n = len(X)
    if K < 1 or K >= n:
        raise ValueError(f"need 1 <= K < N, got K={K}, N={n}")
    Xn = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
    sim = Xn @ Xn.T
    np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")
    return NeighborIndex(order[:, :K])


@dataclass
class ClusterAssignment:
    probs: np.ndarray
    hard: np.ndarray
    view_probs: list[np.ndarray] = field(default_factory=list)
    view_embeddings: list[np.ndarray] = field(default_factory=list)
    S: np.ndarray | None = None

    @property
    def view_hard(self) -> list[np.ndarray]:
        return [p.argmax(1) for p in self.view_probs]


def assign_pseudolabels(model: ConsistentEncoder, views: list[np.ndarray] | MultiViewBatch,
                        chunk: int = 4096) -> ClusterAssignment:
    """Deterministic pass of g∘E_c over every view.

    The fused assignment is the mean of the per-view probabilities and the
    fused consistent representation S the mean of the per-view embeddings.
    ``np.argmax`` breaks ties toward the lowest cluster index.
    """
    if isinstance(views, MultiViewBatch):
        views = views.views
    embs, probs = [], []
    for x in views:
        e_parts, p_parts = [], []
        for start in range(0, len(x), chunk):
            h = model.embed(x[start:start + chunk])
            e_parts.append(h.data)
            p_parts.append(model.assign(h).data)
        embs.append(np.concatenate(e_parts))
        probs.append(np.concatenate(p_parts))
    fused = np.mean(probs, axis=0)
    return ClusterAssignment(probs=fused, hard=fused.argmax(1), view_probs=probs,
                             view_embeddings=embs, S=np.mean(embs, axis=0))


# ---------------------------------------------------------------------------
# training


@dataclass
class Stage1Result:
    model: ConsistentEncoder
    curves: list[dict]
    neighbors: NeighborIndex | None = None


def _minibatches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return np.array_split(perm, max(1, int(np.ceil(n / batch))))


def _check(loss: Tensor, phase: str, epoch: int, model: Module, last_good: dict) -> None:
    if not np.isfinite(loss.data).all():
        raise TrainingDivergedError(f"stage 1 {phase} diverged at epoch {epoch}", last_good)


def stage1_train(data: MultiViewBatch, config: Stage1Config, n_clusters: int, seed: int = 0,
                 image_shape=None) -> Stage1Result:
    """Pretrain E_c and f with the contrastive loss, then train E_c and g with the clustering loss."""
    if not (config.use_ins or config.use_clu):
        raise ValueError("stage 1 needs at least one of the contrastive or clustering objectives")
    init_rng, aug_rng, batch_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    if len(set(data.dims)) != 1:
        raise ValueError("the shared consistent encoder needs equal view dimensions")
    model = ConsistentEncoder(data.dims[0], n_clusters, init_rng, tuple(config.hidden),
                              config.d_e, config.d_proj, tuple(config.proj_hidden))
    policy = config.policy(image_shape)
    block_views = np.repeat(np.arange(data.n_views), 2)
    curves: list[dict] = []

    if config.use_ins:
        params = model.encoder.parameters() + model.proj.parameters()
        opt = nd.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
        for epoch in range(1, config.epochs_pretrain + 1):
            total, count = 0.0, 0
            last_good = model.state_arrays()
            for idx in _minibatches(data.n, config.batch, batch_rng):
                if len(idx) < 2:
                    continue
                blocks = augment([v[idx] for v in data.views], policy, aug_rng)
                B = len(idx)
                with Tape() as tape:
                    z = model.project(model.embed(np.concatenate(blocks)))
                    loss = contrastive_loss([z[i * B:(i + 1) * B] for i in range(len(blocks))], config.tau,
                                            block_views if config.cross_view_positives else None)
                _check(loss, "pretrain", epoch, model, last_good)
                opt.step(tape.gradient(loss, params))
                total += loss.item() * len(idx)
                count += len(idx)
            curves.append({"phase": "pretrain", "epoch": epoch, "L_ins": total / count,
                           "L_clu": float("nan"), "entropy": float("nan")})
            log.debug("stage1 pretrain epoch %d L_ins %.4f", epoch, total / count)

    neighbors = None
    if config.use_clu:
        if config.use_knn:
            neighbors = mine_neighbors(assign_pseudolabels(model, data.views).S, config.knn_k)
        joint = config.use_ins and config.cluster_ins_weight > 0
        enc_params = model.encoder.parameters() + (model.proj.parameters() if joint else [])
        head_params = model.cluster_head.parameters()
        params = enc_params + head_params
        # the encoder keeps its decay so phase B does not re-grow discarded features;
        # the fresh head trains at the base rate without decay
        enc_opt = nd.Adam(enc_params, lr=config.lr_cluster if config.use_ins else config.lr,
                          weight_decay=config.weight_decay)
        head_opt = nd.Adam(head_params, lr=config.lr)
        for epoch in range(1, config.epochs_cluster + 1):
            total, ent, count = 0.0, 0.0, 0
            last_good = model.state_arrays()
            for idx in _minibatches(data.n, config.batch, batch_rng):
                blocks = augment([v[idx] for v in data.views], policy, aug_rng)
                nbr_blocks = []
                if neighbors is not None:
                    pick = neighbors.indices[idx, batch_rng.integers(0, neighbors.k, size=len(idx))]
                    nbr_blocks = [v[pick] for v in data.views]
                B, nb = len(idx), len(blocks)
                with Tape() as tape:
                    h_all = model.embed(np.concatenate(blocks + nbr_blocks))
                    g_all = model.assign(h_all)
                    g = [g_all[i * B:(i + 1) * B] for i in range(nb)]
                    extra = [(g[2 * v], g_all[(nb + v) * B:(nb + v + 1) * B]) for v in range(len(nbr_blocks))]
                    loss = multiview_clustering_loss(g, config.lambda_clu, extra,
                                                     block_views if config.cross_view_positives else None)
                    if joint:
                        z = model.project(h_all[:nb * B])
                        loss = loss + config.cluster_ins_weight * contrastive_loss(
                            [z[i * B:(i + 1) * B] for i in range(nb)], config.tau,
                            block_views if config.cross_view_positives else None)
                _check(loss, "cluster", epoch, model, last_good)
                grads = tape.gradient(loss, params)
                enc_opt.step(grads)
                head_opt.step(grads)
                total += loss.item() * len(idx)
                ent += batch_entropy(g) * len(idx)
                count += len(idx)
            curves.append({"phase": "cluster", "epoch": epoch, "L_ins": float("nan"),
                           "L_clu": total / count, "entropy": ent / count})
            log.debug("stage1 cluster epoch %d L_clu %.4f", epoch, total / count)
    return Stage1Result(model=model, curves=curves, neighbors=neighbors)


def config_dict(config: Stage1Config) -> dict:
    d = asdict(config)
    d["hidden"] = list(d["hidden"])
    d["scale_jitter"] = list(d["scale_jitter"])
    return d
