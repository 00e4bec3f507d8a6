"""Two-stage runs end to end: configuration, checkpoints, ablations and sweeps.

Results land in ``<out>/<config-hash>/<seed>/``; stage-1 checkpoints are
shared through ``<out>/stage1/<stage1-hash>/<seed>/`` so runs differing only
in their stage-2 or evaluation settings reuse the same consistent encoder.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .consistency import (ClusterAssignment, ConsistentEncoder, Stage1Config, assign_pseudolabels,
                          stage1_train)
from .datasets import MultiViewBatch, SyntheticSpec, edge_mnist, gen_synthetic, load_dataset, save_blocks
from .disentangle import DisentangleConfig, Stage2Model, Stage2Trainer, extract_specific
from .evaluate import (MetricsRecord, append_jsonl, cluster_metrics, kmeans, probe_split, r2_score,
                       read_jsonl, write_summary_csv)

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | edge-mnist | file
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    images_path: str = ""
    labels_path: str = ""
    subset: int = 10_000
    path: str = ""
    n_clusters: int | None = None  # None -> read from the data


@dataclass
class EvalConfig:
    test_frac: float = 0.2
    kmeans_restarts: int = 10
    probe_l2: float = 1e-4
    standardize: bool = True


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: DisentangleConfig = field(default_factory=DisentangleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    use_spc: bool = True
    checkpoint_every: int = 10
    seeds: list[int] = field(default_factory=lambda: list(range(10)))

    def validate(self) -> None:
        if not (self.stage1.use_ins or self.stage1.use_clu or self.use_spc):
            raise ValueError("all objectives disabled: nothing to train")
        if self.data.source not in ("synthetic", "edge-mnist", "file"):
            raise ValueError(f"unknown data source {self.data.source!r}")
        if self.use_spc:
            self.stage2.validate()
        if not self.seeds:
            raise ValueError("need at least one seed")


def _jsonable(obj):
    if isinstance(obj, tuple):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def config_to_dict(config: RunConfig) -> dict:
    return _jsonable(asdict(config))


def _build(cls, data: dict):
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value)
        elif isinstance(value, list) and "tuple" in str(hints[name]):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "stage1"): Stage1Config,
    (RunConfig, "stage2"): DisentangleConfig,
    (RunConfig, "eval"): EvalConfig,
    (DataConfig, "synthetic"): SyntheticSpec,
}


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def save_config(path, config: RunConfig) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n")


def load_config(path) -> RunConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_hash(config: RunConfig) -> str:
    """Hash of every materialised field except the seed list."""
    d = config_to_dict(config)
    d.pop("seeds")
    return _digest(d)


def stage1_hash(config: RunConfig) -> str:
    d = config_to_dict(config)
    return _digest({"data": d["data"], "stage1": d["stage1"]})


def set_field(config: RunConfig, dotted: str, value) -> RunConfig:
    """Copy of ``config`` with a dotted field path (e.g. ``stage2.d_z``) replaced."""
    out = copy.deepcopy(config)
    obj = out
    parts = dotted.split(".")
    for p in parts[:-1]:
        obj = getattr(obj, p)
    if not hasattr(obj, parts[-1]):
        raise AttributeError(f"no config field {dotted!r}")
    setattr(obj, parts[-1], value)
    return out


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MVCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    module: str
    arrays: dict[str, np.ndarray]
    config_hash: str = ""
    rng_state: Any = None
    meta: dict = field(default_factory=dict)
    version: int = CKPT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """magic, version byte, u32 header length, JSON header, float64 LE tensors."""
    names = sorted(ckpt.arrays)
    arrays = [np.ascontiguousarray(ckpt.arrays[k], dtype="<f8") for k in names]
    header = {"module": ckpt.module, "config_hash": ckpt.config_hash, "rng_state": ckpt.rng_state,
              "meta": ckpt.meta, "tensors": [{"name": k, "shape": list(a.shape)} for k, a in zip(names, arrays)]}
    blob = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + bytes([CKPT_VERSION]) + struct.pack("<I", len(blob)) + blob)
        for a in arrays:
            fh.write(a.tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if len(raw) < 9:
        raise CheckpointError(f"{path}: truncated header")
    if raw[4] != CKPT_VERSION:
        raise CheckpointError(f"{path}: format version {raw[4]} not supported (expected {CKPT_VERSION})")
    (hlen,) = struct.unpack("<I", raw[5:9])
    try:
        header = json.loads(raw[9:9 + hlen])
    except ValueError:
        raise CheckpointError(f"{path}: corrupt header") from None
    if not isinstance(header, dict) or not {"module", "config_hash", "tensors"} <= set(header):
        raise CheckpointError(f"{path}: corrupt header")
    off = 9 + hlen
    arrays = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        if off + 8 * count > len(raw):
            raise CheckpointError(f"{path}: tensor {t['name']} truncated")
        arrays[t["name"]] = np.frombuffer(raw, "<f8", count, off).astype(np.float64).reshape(t["shape"])
        off += 8 * count
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(header["module"], arrays, header["config_hash"], header["rng_state"],
                      header.get("meta") or {})


def _check_shapes(expected: dict[str, np.ndarray], arrays: dict[str, np.ndarray], what: str) -> None:
    for k, v in expected.items():
        if k not in arrays:
            raise CheckpointError(f"{what}: missing tensor {k}")
        if np.shape(arrays[k]) != np.shape(v):
            raise CheckpointError(f"{what}: shape mismatch for {k}: {np.shape(arrays[k])} vs {np.shape(v)}")


# ---------------------------------------------------------------------------
# data and stages


class StageError(RuntimeError):
    """A stage failed; carries the stage name and seed."""

    def __init__(self, stage: str, seed: int, cause: BaseException):
        super().__init__(f"{stage} failed for seed {seed}: {cause}")
        self.stage, self.seed, self.cause = stage, seed, cause


def load_data(cfg: DataConfig) -> tuple[MultiViewBatch, tuple[int, int] | None]:
    """The dataset and, for image data, the image shape used by occlusion."""
    if cfg.source == "synthetic":
        return gen_synthetic(cfg.synthetic), None
    if cfg.source == "edge-mnist":
        return edge_mnist(cfg.images_path, cfg.labels_path, cfg.subset, cfg.synthetic.seed), (28, 28)
    return load_dataset(cfg.path), None


def n_clusters_of(data: MultiViewBatch, cfg: DataConfig) -> int:
    if cfg.n_clusters:
        return int(cfg.n_clusters)
    if data.meta.get("C"):
        return int(data.meta["C"])
    if data.labels is not None:
        return int(len(np.unique(data.labels)))
    raise ValueError("cannot infer the cluster count; set data.n_clusters")


def _write_rows(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def _stage1(config: RunConfig, data: MultiViewBatch, image_shape, C: int, seed: int,
            out: Path | None) -> tuple[ConsistentEncoder, list[dict]]:
    s1 = config.stage1
    s1_dir = None if out is None else out / "stage1" / stage1_hash(config) / str(seed)
    model = ConsistentEncoder(data.dims[0], C, np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[0]),
                              tuple(s1.hidden), s1.d_e, s1.d_proj, tuple(s1.proj_hidden))
    if s1_dir is not None and (s1_dir / "stage1.ckpt").exists():
        ck = load_checkpoint(s1_dir / "stage1.ckpt")
        if ck.config_hash == stage1_hash(config):
            _check_shapes(model.state_arrays(), ck.arrays, "stage 1 checkpoint")
            model.load_arrays(ck.arrays)
            return model, ck.meta.get("curves", [])
    if s1.use_ins or s1.use_clu:
        res = stage1_train(data, s1, C, seed=seed, image_shape=image_shape)
        model, curves = res.model, res.curves
    else:
        curves = []  # encoder left at its seeded initialisation
    if s1_dir is not None:
        s1_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(s1_dir / "stage1.ckpt", Checkpoint("consistency", model.state_arrays(),
                                                            stage1_hash(config), None, {"curves": curves}))
        _write_rows(s1_dir / "stage1_curves.csv", curves)
    return model, curves


def pseudo_assignment(model: ConsistentEncoder, data: MultiViewBatch, use_clu: bool, C: int,
                      seed: int, restarts: int = 10) -> ClusterAssignment:
    """Stage-1 labels; without a trained clustering head they come from K-means on S."""
    a = assign_pseudolabels(model, data)
    if not use_clu:
        km = kmeans(a.S, C, seed=seed, restarts=restarts)
        a.hard = km.labels
        a.probs = np.eye(C)[km.labels]
    return a


def _stage2(config: RunConfig, data: MultiViewBatch, pseudo: ClusterAssignment, seed: int,
            run_dir: Path | None, chash: str) -> Stage2Trainer:
    trainer = Stage2Trainer(data, pseudo, pseudo.S, config.stage2, seed=seed)
    ck_path = None if run_dir is None else run_dir / "stage2.ckpt"
    if ck_path is not None and ck_path.exists():
        ck = load_checkpoint(ck_path)
        if ck.config_hash == chash:
            _check_shapes(trainer.state_arrays(), ck.arrays, "stage 2 checkpoint")
            meta = dict(ck.meta)
            meta["rng_state"] = ck.rng_state
            trainer.load_state(ck.arrays, meta)
    every = max(1, config.checkpoint_every)
    while trainer.epoch < config.stage2.epochs:
        trainer.run_epoch()
        if ck_path is not None and (trainer.epoch % every == 0 or trainer.epoch == config.stage2.epochs):
            save_stage2(ck_path, trainer, chash, data, pseudo)
    return trainer


def save_stage2(path, trainer: Stage2Trainer, chash: str, data: MultiViewBatch, pseudo) -> None:
    meta = trainer.state_meta()
    rng_state = meta.pop("rng_state")
    meta.update({"dims": data.dims, "d_s": int(pseudo.S.shape[1]), "n_clusters": int(pseudo.probs.shape[1]),
                 "config": _jsonable(asdict(trainer.config))})
    save_checkpoint(path, Checkpoint("disentangle", trainer.state_arrays(), chash, rng_state, meta))


def load_stage2_model(path) -> Stage2Model:
    """Rebuild the stage-2 model stored in a checkpoint (for generation)."""
    ck = load_checkpoint(path)
    if ck.module != "disentangle":
        raise CheckpointError(f"{path}: holds a {ck.module!r} checkpoint")
    m = ck.meta
    cfg = DisentangleConfig(**m["config"])
    table = ck.arrays["model.cond_table"]
    model = Stage2Model(m["dims"], m["d_s"], m["n_clusters"], cfg, np.random.default_rng(0), table)
    arrays = {k[len("model."):]: v for k, v in ck.arrays.items() if k.startswith("model.")}
    _check_shapes(model.state_arrays(), arrays, "stage 2 checkpoint")
    model.load_arrays(arrays)
    return model


def final_representation(S: np.ndarray, P: list[np.ndarray], standardize: bool = True) -> np.ndarray:
    """[S ; P_1 ; ... ; P_V], optionally z-scored per column (constant columns -> 0)."""
    rep = np.concatenate([S, *P], axis=1)
    if standardize:
        sd = rep.std(0)
        rep = np.where(sd > 1e-12, (rep - rep.mean(0)) / np.where(sd > 1e-12, sd, 1.0), 0.0)
    return rep


def _diagnostics(S, P, data: MultiViewBatch, ev: EvalConfig, seed: int) -> dict:
    out = {}
    if data.labels is not None:
        out["probe_S"] = probe_split(S, data.labels, ev.test_frac, seed, l2=ev.probe_l2).acc_cls
        out["probe_P"] = [probe_split(p, data.labels, ev.test_frac, seed, l2=ev.probe_l2).acc_cls for p in P]
    if data.gt_specific is not None:
        out["r2_S"] = [r2_score(S, g, ev.test_frac, seed) for g in data.gt_specific]
        out["r2_P"] = [r2_score(p, g, ev.test_frac, seed) for p, g in zip(P, data.gt_specific)]
    return out


# ---------------------------------------------------------------------------
# runs


def run_seed(config: RunConfig, seed: int, out=None, data=None, resume: bool = True) -> MetricsRecord:
    """One seed of the two-stage protocol; returns its metrics."""
    config.validate()
    chash = config_hash(config)
    out = None if out is None else Path(out)
    run_dir = None
    if out is not None:
        run_dir = out / chash / str(seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(out / chash / "config.json", config)
        if resume and (run_dir / "metrics.jsonl").exists():
            done = read_jsonl(run_dir / "metrics.jsonl")
            if done:
                return done[-1]
    if data is None:
        data, image_shape = load_data(config.data)
    else:
        image_shape = (28, 28) if config.data.source == "edge-mnist" else None
    C = n_clusters_of(data, config.data)
    t0 = time.perf_counter()
    try:
        model, _ = _stage1(config, data, image_shape, C, seed, out)
        pseudo = pseudo_assignment(model, data, config.stage1.use_clu, C, seed, config.eval.kmeans_restarts)
    except Exception as exc:
        raise StageError("stage1", seed, exc) from exc
    t1 = time.perf_counter()
    S = pseudo.S
    P: list[np.ndarray] = []
    if config.use_spc:
        try:
            trainer = _stage2(config, data, pseudo, seed, run_dir, chash)
        except Exception as exc:
            raise StageError("stage2", seed, exc) from exc
        P = extract_specific(trainer.model, data.views)
        if run_dir is not None:
            _write_rows(run_dir / "stage2_curves.csv", trainer.curves)
            _write_rows(run_dir / "stage2_steps.csv", [asdict(r) for r in trainer.step_log])
    t2 = time.perf_counter()
    try:
        rep = final_representation(S, P, config.eval.standardize)
        km = kmeans(rep, C, seed=seed, restarts=config.eval.kmeans_restarts)
        extra: dict[str, Any] = {"n_clusters": C, "repr_width": int(rep.shape[1]),
                                 "stage1_time": t1 - t0, "stage2_time": t2 - t1}
        if data.labels is not None:
            m = cluster_metrics(km.labels, data.labels)
            probe = probe_split(rep, data.labels, config.eval.test_frac, seed, l2=config.eval.probe_l2)
            extra["pseudo_acc"] = cluster_metrics(pseudo.hard, data.labels)["acc_clu"]
            extra.update(_diagnostics(S, P, data, config.eval, seed))
            acc_cls, f1 = probe.acc_cls, probe.f_score
        else:
            m = {"acc_clu": float("nan"), "nmi": float("nan"), "ari": float("nan")}
            acc_cls = f1 = float("nan")
    except Exception as exc:
        raise StageError("evaluate", seed, exc) from exc
    rec = MetricsRecord(acc_clu=m["acc_clu"], nmi=m["nmi"], ari=m["ari"], acc_cls=acc_cls, f_score=f1,
                        seed=seed, config_hash=chash, wall_time=time.perf_counter() - t0, extra=extra)
    log.info("seed %d: acc_clu=%.4f nmi=%.4f (%.1fs)", seed, rec.acc_clu, rec.nmi, rec.wall_time)
    if run_dir is not None:
        save_blocks(run_dir / "representation.mvds", [rep], data.labels, meta={"C": C, "seed": seed})
        np.savetxt(run_dir / "pseudo_labels.txt", pseudo.hard, fmt="%d")
        append_jsonl(run_dir / "metrics.jsonl", rec)
    return rec


def run_pipeline(config: RunConfig, out=None, seeds=None, resume: bool = True) -> list[MetricsRecord]:
    """Every seed of ``config`` (or the given ``seeds``); writes a summary CSV under ``out``."""
    config.validate()
    seeds = list(config.seeds if seeds is None else seeds)
    data, _ = load_data(config.data)
    records = [run_seed(config, s, out, data=data, resume=resume) for s in seeds]
    if out is not None:
        write_summary_csv(Path(out) / config_hash(config) / "summary.csv", {"model": records})
    return records


ABLATION_ROWS = [
    (True, True, True),
    (True, False, True),
    (False, True, True),
    (False, False, True),
    (True, False, False),
    (False, True, False),
    (True, True, False),
]


def ablation_config(config: RunConfig, use_ins: bool, use_clu: bool, use_spc: bool) -> RunConfig:
    cfg = copy.deepcopy(config)
    cfg.stage1.use_ins, cfg.stage1.use_clu, cfg.use_spc = use_ins, use_clu, use_spc
    cfg.validate()
    return cfg


def run_ablation(config: RunConfig, seed: int = 0, out=None) -> list[tuple[tuple[bool, bool, bool], MetricsRecord]]:
    """Every valid on/off combination of (L_ins, L_clu, L_spc), one seed each."""
    data, _ = load_data(config.data)
    table = []
    for flags in ABLATION_ROWS:
        rec = run_seed(ablation_config(config, *flags), seed, out, data=data)
        table.append((flags, rec))
    if out is not None:
        rows = [{"L_ins": int(f[0]), "L_clu": int(f[1]), "L_spc": int(f[2]), "acc_clu": r.acc_clu,
                 "nmi": r.nmi, "ari": r.ari, "acc_cls": r.acc_cls, "f_score": r.f_score} for f, r in table]
        _write_rows(Path(out) / f"ablation_{config_hash(config)}_seed{seed}.csv", rows)
    return table


SWEEP_PARAMS = {
    "lambda_dis": ("stage2.lambda_dis",),
    "d_z": ("stage2.d_z",),
    "batch": ("stage1.batch", "stage2.batch"),
    "epochs": ("stage2.epochs",),
}


def sweep_config(config: RunConfig, param: str, value) -> RunConfig:
    paths = SWEEP_PARAMS.get(param, (param,))
    cfg = config
    for p in paths:
        cfg = set_field(cfg, p, value)
    return cfg


def run_sweep(config: RunConfig, param: str, grid, seed: int = 0, out=None) -> list[tuple[Any, MetricsRecord]]:
    """One run per grid value at a fixed seed; writes acc_clu vs value as CSV."""
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    data, _ = load_data(config.data)
    rows = [(v, run_seed(sweep_config(config, param, v), seed, out, data=data)) for v in grid]
    if out is not None:
        _write_rows(Path(out) / f"sweep_{param}_{config_hash(config)}_seed{seed}.csv",
                    [{param: v, "acc_clu": r.acc_clu, "nmi": r.nmi, "ari": r.ari, "acc_cls": r.acc_cls}
                     for v, r in rows])
    return rows
