"""Stage 2: per-view conditional VAEs with a variational mutual-information penalty.

Each view v gets an encoder x_v -> (mu, log_std) over a d_z latent H_v and a
decoder [H_v ; cond] -> x_v.  A conditional Gaussian q_v(H|S) and a mixture
r_v(H) are fitted alongside; their log-ratio on reparameterised samples is an
upper bound on I(S; H_v) that the encoders are trained to shrink.  The
posterior mean of H_v is read out as the view-specific representation P_v.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndgrad as nd
from .consistency import ClusterAssignment, TrainingDivergedError
from .datasets import MultiViewBatch
from .ndgrad import MLP, Module, Tape, Tensor

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -6.0, 3.0
LOG_DENSITY_FLOOR = -745.0
COND_MODES = ("pseudo-label", "S", "both")
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class GaussianLatent:
    mean: Tensor
    log_std: Tensor

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)


def _split_gaussian(out: Tensor, d_z: int) -> GaussianLatent:
    return GaussianLatent(out[:, :d_z], nd.clip(out[:, d_z:], LOG_STD_MIN, LOG_STD_MAX))


def encode_specific(x, encoder: MLP) -> GaussianLatent:
    """Posterior (mu, log_std) of a view encoder whose last layer emits 2·d_z values."""
    out = encoder(nd.as_tensor(x))
    if not np.isfinite(out.data).all():
        raise nd.NonFiniteError("view encoder produced non-finite activations")
    return _split_gaussian(out, out.shape[1] // 2)


def reparameterize(latent: GaussianLatent, rng: np.random.Generator | None = None,
                   eps: np.ndarray | None = None) -> Tensor:
    """mean + exp(log_std) * eps, drawing eps from ``rng`` unless it is given."""
    if eps is None:
        if rng is None:
            raise ValueError("need either an rng or explicit noise")
        eps = rng.standard_normal(latent.mean.shape)
    return latent.mean + nd.exp(latent.log_std) * eps


def kl_std_normal(latent: GaussianLatent) -> Tensor:
    """Batch mean of KL(N(mu, sigma^2) || N(0, I)), summed over latent dims."""
    mu, ls = latent.mean, latent.log_std
    per = 0.5 * (mu * mu + nd.exp(2.0 * ls) - 1.0 - 2.0 * ls)
    return per.sum(axis=1).mean()


def reconstruction_loss(x, x_hat) -> Tensor:
    """Squared error summed over features, averaged over rows."""
    x_hat = nd.as_tensor(x_hat)
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.shape != x_hat.shape:
        raise nd.ShapeError(f"reconstruction shapes differ: {x.shape} vs {x_hat.shape}")
    return nd.square(x_hat - x).sum(axis=1).mean()


def gaussian_log_density(h, mean, log_std) -> Tensor:
    """Diagonal Gaussian log-density summed over the last axis (broadcasting)."""
    z = (nd.as_tensor(h) - mean) * nd.exp(-nd.as_tensor(log_std))
    return (-0.5 * z * z - log_std - _HALF_LOG_2PI).sum(axis=-1)


class VariationalConditional(Module):
    """q(H | S): an MLP from S to a diagonal Gaussian over H."""

    def __init__(self, d_s: int, d_z: int, rng: np.random.Generator, hidden: int = 64):
        self.net = MLP([d_s, hidden, 2 * d_z], rng)
        self.d_z = d_z

    def __call__(self, s) -> GaussianLatent:
        return _split_gaussian(self.net(nd.as_tensor(s)), self.d_z)

    def log_prob(self, s, h) -> Tensor:
        lat = self(s)
        return gaussian_log_density(h, lat.mean, lat.log_std)


class MixtureOfGaussians(Module):
    """Diagonal Gaussian mixture; weights are stored as softmax logits."""

    def __init__(self, n_components: int, d_z: int, rng: np.random.Generator, spread: float = 1.0):
        if n_components < 1:
            raise ValueError("a mixture needs at least one component")
        self.logits = Tensor(np.zeros(n_components), requires_grad=True)
        self.means = Tensor(spread * rng.standard_normal((n_components, d_z)), requires_grad=True)
        self.log_stds = Tensor(np.zeros((n_components, d_z)), requires_grad=True)

    @property
    def n_components(self) -> int:
        return self.logits.shape[0]

    @property
    def d_z(self) -> int:
        return self.means.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return nd.softmax(Tensor(self.logits.data)).data

    def log_prob(self, h) -> Tensor:
        h = nd.as_tensor(h)
        B, K, d = h.shape[0], self.n_components, self.d_z
        log_std = nd.clip(self.log_stds, LOG_STD_MIN, LOG_STD_MAX)
        comp = gaussian_log_density(h.reshape((B, 1, d)), self.means.reshape((1, K, d)),
                                    log_std.reshape((1, K, d)))
        out = nd.logsumexp(comp + nd.log_softmax(self.logits), axis=1)
        if (out.data < LOG_DENSITY_FLOOR).any():
            warnings.warn("mixture log-density below the float64 floor; clamping", RuntimeWarning)
            out = nd.floor_at(out, LOG_DENSITY_FLOOR)
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        std = np.exp(np.clip(self.log_stds.data, LOG_STD_MIN, LOG_STD_MAX))
        return self.means.data[comp] + std[comp] * rng.standard_normal((n, self.d_z))


def mi_upper_bound(s, h, q_cond: VariationalConditional, r: MixtureOfGaussians) -> Tensor:
    """Monte-Carlo mean of log q(h_k | s_k) - log r(h_k) over aligned rows."""
    h = nd.as_tensor(h)
    if np.shape(s)[0] != h.shape[0]:
        raise nd.ShapeError("S and H batches are not aligned")
    return (q_cond.log_prob(s, h) - r.log_prob(h)).mean()


def fit_variational(q_cond: VariationalConditional, r: MixtureOfGaussians, s, h, steps: int,
                    q_opt: nd.Adam | None = None, r_opt: nd.Adam | None = None,
                    lr: float = 1e-3) -> tuple[float, float]:
    """Maximum-likelihood steps for q(H|S) and r(H) on fixed samples.

    Returns the final negative log-likelihoods (q, r).  Pass persistent
    optimisers to keep Adam moments across calls.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    s = np.asarray(s.data if isinstance(s, Tensor) else s)
    h = np.asarray(h.data if isinstance(h, Tensor) else h)
    q_opt = q_opt or nd.Adam(q_cond.parameters(), lr=lr)
    r_opt = r_opt or nd.Adam(r.parameters(), lr=lr)
    nll_q = nll_r = float("nan")
    for _ in range(steps):
        with Tape() as tape:
            loss_q = -q_cond.log_prob(s, h).mean()
            loss_r = -r.log_prob(h).mean()
        q_opt.step(tape.gradient(loss_q, q_opt.params))
        r_opt.step(tape.gradient(loss_r, r_opt.params))
        nll_q, nll_r = loss_q.item(), loss_r.item()
    return nll_q, nll_r


# ---------------------------------------------------------------------------
# models


@dataclass
class DisentangleConfig:
    lambda_dis: float = 0.02
    epochs: int = 150
    lr: float = 5e-4
    batch: int = 128
    cond_mode: str = "pseudo-label"
    n_components: int | None = None  # None -> number of clusters
    d_z: int = 10
    hidden: int = 256
    cond_hidden: int = 64
    fit_steps: int = 5
    fit_lr: float = 1e-3
    eps_view: float = 0.0  # view noise, taken as negligible

    def validate(self) -> None:
        if self.lambda_dis < 0:
            raise ValueError("lambda_dis must be non-negative")
        if self.cond_mode not in COND_MODES:
            raise ValueError(f"cond_mode must be one of {COND_MODES}")
        if self.epochs < 0 or self.batch < 1 or self.d_z < 1 or self.fit_steps < 1:
            raise ValueError("epochs, batch, d_z and fit_steps must be positive")
        if self.lr <= 0 or self.fit_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.eps_view != 0.0:
            raise ValueError("only eps_view = 0 is supported")


def build_condition(mode: str, hard: np.ndarray, S: np.ndarray, n_clusters: int) -> np.ndarray:
    """Decoder conditioning rows: one-hot pseudo-labels, S, or both side by side."""
    if mode not in COND_MODES:
        raise ValueError(f"cond_mode must be one of {COND_MODES}")
    parts = []
    if mode in ("pseudo-label", "both"):
        parts.append(np.eye(n_clusters)[np.asarray(hard)])
    if mode in ("S", "both"):
        parts.append(np.asarray(S, dtype=float))
    return np.concatenate(parts, axis=1)


def class_condition_table(mode: str, hard: np.ndarray, S: np.ndarray, n_clusters: int) -> np.ndarray:
    """One conditioning row per cluster, using S centroids where S is needed."""
    hard = np.asarray(hard)
    cent = np.zeros((n_clusters, S.shape[1]))
    for c in range(n_clusters):
        if (hard == c).any():
            cent[c] = S[hard == c].mean(axis=0)
    return build_condition(mode, np.arange(n_clusters), cent, n_clusters)


class ViewCVAE(Module):
    def __init__(self, d_v: int, d_z: int, cond_dim: int, hidden: int, rng: np.random.Generator):
        self.encoder = MLP([d_v, hidden, 2 * d_z], rng)
        self.decoder = MLP([d_z + cond_dim, hidden, d_v], rng)
        self.d_z, self.cond_dim = d_z, cond_dim

    def encode(self, x) -> GaussianLatent:
        return encode_specific(x, self.encoder)

    def decode(self, h, cond) -> Tensor:
        h = nd.as_tensor(h)
        cond = np.asarray(cond, dtype=float)
        if cond.ndim != 2 or cond.shape[1] != self.cond_dim or h.shape[1] != self.d_z:
            raise nd.ShapeError(f"decoder expects {self.d_z}+{self.cond_dim} inputs")
        return self.decoder(nd.concat([h, Tensor(cond)], axis=1))


class Stage2Model(Module):
    """Per-view CVAEs plus the variational pieces of the MI bound."""

    def __init__(self, dims: list[int], d_s: int, n_clusters: int, config: DisentangleConfig,
                 rng: np.random.Generator, cond_table: np.ndarray):
        config.validate()
        k = config.n_components or n_clusters
        self.n_clusters = n_clusters
        self.cond_table = np.asarray(cond_table, dtype=float)
        cond_dim = self.cond_table.shape[1]
        self.cvaes = [ViewCVAE(d, config.d_z, cond_dim, config.hidden, rng) for d in dims]
        self.q_conds = [VariationalConditional(d_s, config.d_z, rng, config.cond_hidden) for _ in dims]
        self.mixtures = [MixtureOfGaussians(k, config.d_z, rng) for _ in dims]

    @property
    def n_views(self) -> int:
        return len(self.cvaes)

    def model_params(self) -> list[Tensor]:
        return [p for c in self.cvaes for p in c.parameters()]

    def q_params(self) -> list[Tensor]:
        return [p for q in self.q_conds for p in q.parameters()]

    def r_params(self) -> list[Tensor]:
        return [p for r in self.mixtures for p in r.parameters()]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = super().state_arrays()
        out["cond_table"] = self.cond_table
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        super().load_arrays({k: v for k, v in arrays.items() if k != "cond_table"})
        if "cond_table" in arrays:
            self.cond_table = np.array(arrays["cond_table"], dtype=float)


def extract_specific(model: Stage2Model, views) -> list[np.ndarray]:
    """Posterior means P_v for every view."""
    return [cvae.encode(np.asarray(x)).mean.data.copy() for cvae, x in zip(model.cvaes, views)]


def conditional_sample(model: Stage2Model, view: int, class_id, style="random",
                       rng: np.random.Generator | None = None, n: int = 1) -> np.ndarray:
    """Decode [style ; cond(class_id)] for one view.

    ``style`` is an n×d_z array (or one d_z vector) of latent codes, or
    "random" to draw n codes from the view's fitted mixture.
    """
    class_ids = np.atleast_1d(np.asarray(class_id))
    if (class_ids < 0).any() or (class_ids >= model.n_clusters).any():
        raise ValueError(f"class id out of range [0, {model.n_clusters})")
    if isinstance(style, str):
        if style != "random":
            raise ValueError("style must be a latent array or 'random'")
        if rng is None:
            raise ValueError("random style needs an rng")
        codes = model.mixtures[view].sample(max(n, len(class_ids)), rng)
    else:
        codes = np.atleast_2d(np.asarray(style, dtype=float))
    m = max(len(codes), len(class_ids))
    if len(codes) == 1:
        codes = np.repeat(codes, m, axis=0)
    if len(class_ids) == 1:
        class_ids = np.repeat(class_ids, m)
    if len(codes) != len(class_ids):
        raise nd.ShapeError("style and class_id counts differ")
    return model.cvaes[view].decode(codes, model.cond_table[class_ids]).data.copy()


# ---------------------------------------------------------------------------
# training


@dataclass
class StepRecord:
    epoch: int
    step: int
    L_cvae: float
    L_dis: float
    L_spc: float


class Stage2Trainer:
    """Alternating stage-2 optimisation that can be paused and resumed per epoch.

    Per minibatch: draw reparameterisation noise, fit q and r for
    ``fit_steps`` steps on the detached samples, then take one Adam step on
    the encoders and decoders for L_cvae + lambda_dis * L_dis.
    """

    def __init__(self, data: MultiViewBatch, pseudo: ClusterAssignment, S: np.ndarray,
                 config: DisentangleConfig, seed: int = 0):
        config.validate()
        self.data, self.config = data, config
        self.S = np.asarray(S, dtype=float)
        if self.S.shape[0] != data.n:
            raise nd.ShapeError("S rows do not match the dataset")
        C = pseudo.probs.shape[1]
        self.cond = build_condition(config.cond_mode, pseudo.hard, self.S, C)
        table = class_condition_table(config.cond_mode, pseudo.hard, self.S, C)
        init_rng, self.rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
        self.model = Stage2Model(data.dims, self.S.shape[1], C, config, init_rng, table)
        self.opt = nd.Adam(self.model.model_params(), lr=config.lr)
        self.q_opts = [nd.Adam(q.parameters(), lr=config.fit_lr) for q in self.model.q_conds]
        self.r_opts = [nd.Adam(r.parameters(), lr=config.fit_lr) for r in self.model.mixtures]
        self.epoch = 0
        self.steps = 0
        self.curves: list[dict] = []
        self.step_log: list[StepRecord] = []

    # -- one batch ---------------------------------------------------------
    def _batch(self, idx: np.ndarray) -> dict:
        cfg, model = self.config, self.model
        xs = [v[idx] for v in self.data.views]
        s, cond = self.S[idx], self.cond[idx]
        eps = [self.rng.standard_normal((len(idx), cfg.d_z)) for _ in xs]

        for v, cvae in enumerate(model.cvaes):
            lat = cvae.encode(xs[v])
            h = lat.mean.data + lat.std * eps[v]
            fit_variational(model.q_conds[v], model.mixtures[v], s, h, cfg.fit_steps,
                            self.q_opts[v], self.r_opts[v])

        parts = []
        with Tape() as tape:
            cvae_total, dis_total = Tensor(0.0), Tensor(0.0)
            for v, cvae in enumerate(model.cvaes):
                lat = cvae.encode(xs[v])
                h = reparameterize(lat, eps=eps[v])
                rec = reconstruction_loss(xs[v], cvae.decode(h, cond))
                kl = kl_std_normal(lat)
                dis = mi_upper_bound(s, h, model.q_conds[v], model.mixtures[v])
                cvae_total = cvae_total + rec + kl
                dis_total = dis_total + dis
                parts.append((rec.item(), kl.item(), dis.item()))
            loss = cvae_total + cfg.lambda_dis * dis_total
        if not np.isfinite(loss.data).all():
            return {"loss": loss}
        self.opt.step(tape.gradient(loss, self.opt.params))
        return {"loss": loss, "cvae": cvae_total.item(), "dis": dis_total.item(), "parts": parts}

    # -- epochs ------------------------------------------------------------
    def run_epoch(self) -> dict:
        cfg = self.config
        self.epoch += 1
        last_good = self.state_arrays()
        sums = np.zeros((self.data.n_views, 3))
        tot_cvae = tot_dis = 0.0
        count = 0
        order = self.rng.permutation(self.data.n)
        for idx in np.array_split(order, max(1, math.ceil(self.data.n / cfg.batch))):
            if len(idx) == 0:
                continue
            out = self._batch(idx)
            if "cvae" not in out:
                raise TrainingDivergedError(f"stage 2 diverged at epoch {self.epoch}", last_good)
            self.steps += 1
            spc = out["loss"].item()
            self.step_log.append(StepRecord(self.epoch, self.steps, out["cvae"], out["dis"], spc))
            sums += np.asarray(out["parts"]) * len(idx)
            tot_cvae += out["cvae"] * len(idx)
            tot_dis += out["dis"] * len(idx)
            count += len(idx)
        rec = {"epoch": self.epoch, "L_cvae": tot_cvae / count, "L_dis": tot_dis / count,
               "L_spc": tot_cvae / count + cfg.lambda_dis * tot_dis / count}
        for v, (r, k, d) in enumerate(sums / count):
            rec[f"L_rec_{v}"] = r
            rec[f"L_kl_{v}"] = k
            rec[f"L_cvae_{v}"] = r + k
            rec[f"L_dis_{v}"] = d
            rec[f"L_spc_{v}"] = r + k + cfg.lambda_dis * d
        self.curves.append(rec)
        log.debug("stage2 epoch %d L_spc %.4f", self.epoch, rec["L_spc"])
        return rec

    def train(self, epochs: int | None = None) -> "Stage2Result":
        target = self.config.epochs if epochs is None else epochs
        while self.epoch < target:
            self.run_epoch()
        return Stage2Result(self.model, self.curves, self.step_log)

    # -- checkpoint state --------------------------------------------------
    def _optimizers(self):
        yield "opt", self.opt
        for v, (q, r) in enumerate(zip(self.q_opts, self.r_opts)):
            yield f"q_opt.{v}", q
            yield f"r_opt.{v}", r

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"model.{k}": v.copy() for k, v in self.model.state_arrays().items()}
        for name, opt in self._optimizers():
            out.update({k: np.array(v, copy=True) for k, v in opt.state_arrays(name).items()})
        return out

    def state_meta(self) -> dict:
        return {"epoch": self.epoch, "steps": self.steps, "rng_state": self.rng.bit_generator.state,
                "curves": self.curves, "step_log": [asdict(r) for r in self.step_log]}

    def load_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        self.model.load_arrays({k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
        for name, opt in self._optimizers():
            opt.load_arrays(arrays, name)
        self.epoch, self.steps = int(meta["epoch"]), int(meta["steps"])
        self.rng.bit_generator.state = meta["rng_state"]
        self.curves = [dict(c) for c in meta.get("curves", [])]
        self.step_log = [StepRecord(**r) for r in meta.get("step_log", [])]


@dataclass
class Stage2Result:
    model: Stage2Model
    curves: list[dict] = field(default_factory=list)
    step_log: list[StepRecord] = field(default_factory=list)


def stage2_train(data: MultiViewBatch, pseudo: ClusterAssignment, S: np.ndarray,
                 config: DisentangleConfig, seed: int = 0) -> Stage2Result:
    return Stage2Trainer(data, pseudo, S, config, seed).train()
