import csv
import json

import numpy as np
import pytest

from mvdis import cli, pipeline
from mvdis.datasets import load_blocks
from mvdis.disentangle import Stage2Trainer
from mvdis.pipeline import Checkpoint, CheckpointError, RunConfig


def tiny_config(**overrides) -> RunConfig:
    cfg = RunConfig(seeds=[0, 1])
    cfg.data.synthetic.N = 160
    cfg.data.synthetic.d_v = 8
    s1, s2 = cfg.stage1, cfg.stage2
    s1.epochs_pretrain, s1.epochs_cluster, s1.batch = 2, 2, 40
    s1.hidden, s1.d_e, s1.d_proj, s1.proj_hidden = (16,), 6, 4, ()
    s2.epochs, s2.batch, s2.d_z, s2.hidden, s2.cond_hidden, s2.fit_steps = 4, 40, 3, 16, 8, 2
    cfg.checkpoint_every = 2
    cfg.eval.kmeans_restarts = 2
    for k, v in overrides.items():
        cfg = pipeline.set_field(cfg, k, v)
    return cfg


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config()
        pipeline.save_config(tmp_path / "c.json", cfg)
        back = pipeline.load_config(tmp_path / "c.json")
        assert back == cfg
        assert pipeline.config_hash(back) == pipeline.config_hash(cfg)

    def test_defaults_materialised(self):
        d = pipeline.config_to_dict(RunConfig())
        assert d["seeds"] == list(range(10))
        assert d["stage2"]["epochs"] == 150 and d["stage1"]["epochs_pretrain"] == 50
        assert d["data"]["synthetic"]["N"] == 2000

    def test_hash_ignores_seeds_only(self):
        a = RunConfig()
        assert pipeline.config_hash(a) == pipeline.config_hash(RunConfig(seeds=[3]))
        assert pipeline.config_hash(a) != pipeline.config_hash(pipeline.set_field(a, "stage2.d_z", 11))
        assert pipeline.stage1_hash(a) == pipeline.stage1_hash(pipeline.set_field(a, "stage2.d_z", 11))

    def test_unknown_fields(self, tmp_path):
        with pytest.raises(ValueError):
            pipeline.config_from_dict({"stage2": {"lambda": 1}})
        with pytest.raises(AttributeError):
            pipeline.set_field(RunConfig(), "stage2.lambda", 1.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            tiny_config(**{"stage1.use_ins": False, "stage1.use_clu": False, "use_spc": False}).validate()
        with pytest.raises(ValueError):
            tiny_config(**{"data.source": "cifar"}).validate()
        with pytest.raises(ValueError):
            RunConfig(seeds=[]).validate()


class TestCheckpoint:
    def arrays(self):
        rng = np.random.default_rng(0)
        return {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5),
                "tiny": np.array([5e-324, -0.0, np.inf])}

    def test_bit_exact(self, tmp_path):
        rng_state = np.random.default_rng(7).bit_generator.state
        ck = Checkpoint("test", self.arrays(), "abc", rng_state, {"epoch": 3})
        pipeline.save_checkpoint(tmp_path / "c.ckpt", ck)
        back = pipeline.load_checkpoint(tmp_path / "c.ckpt")
        assert back.module == "test" and back.config_hash == "abc" and back.meta == {"epoch": 3}
        for k, v in ck.arrays.items():
            assert back.arrays[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()
        gen = np.random.default_rng()
        gen.bit_generator.state = back.rng_state
        ref = np.random.default_rng(7)
        np.testing.assert_array_equal(gen.random(4), ref.random(4))

    def test_layout(self, tmp_path):
        pipeline.save_checkpoint(tmp_path / "c.ckpt", Checkpoint("m", {"a": np.array([1.0, 2.0])}))
        raw = (tmp_path / "c.ckpt").read_bytes()
        assert raw[:4] == b"MVCK" and raw[4] == pipeline.CKPT_VERSION
        n = int.from_bytes(raw[5:9], "little")
        header = json.loads(raw[9:9 + n])
        assert header["tensors"] == [{"name": "a", "shape": [2]}]
        assert np.frombuffer(raw[9 + n:], "<f8").tolist() == [1.0, 2.0]

    def test_wrong_version(self, tmp_path):
        p = tmp_path / "c.ckpt"
        pipeline.save_checkpoint(p, Checkpoint("m", self.arrays()))
        raw = bytearray(p.read_bytes())
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            pipeline.load_checkpoint(p)

    @pytest.mark.parametrize("damage", ["magic", "header", "truncate", "trailing"])
    def test_corrupt(self, tmp_path, damage):
        p = tmp_path / "c.ckpt"
        pipeline.save_checkpoint(p, Checkpoint("m", self.arrays()))
        raw = bytearray(p.read_bytes())
        if damage == "magic":
            raw[:4] = b"XXXX"
        elif damage == "header":
            raw[10] = ord("#")
        elif damage == "truncate":
            raw = raw[:-8]
        else:
            raw += b"\0"
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            pipeline.load_checkpoint(p)

    def test_shape_mismatch(self):
        with pytest.raises(CheckpointError, match="shape"):
            pipeline._check_shapes({"w": np.zeros((2, 3))}, {"w": np.zeros((3, 2))}, "x")
        with pytest.raises(CheckpointError, match="missing"):
            pipeline._check_shapes({"w": np.zeros(2)}, {}, "x")


class TestRunSeed:
    def test_artifacts_and_width(self, tmp_path):
        cfg = tiny_config()
        rec = pipeline.run_seed(cfg, 0, tmp_path)
        run = tmp_path / pipeline.config_hash(cfg) / "0"
        for name in ("metrics.jsonl", "stage2.ckpt", "stage2_curves.csv", "stage2_steps.csv",
                     "representation.mvds", "pseudo_labels.txt"):
            assert (run / name).exists(), name
        assert (tmp_path / pipeline.config_hash(cfg) / "config.json").exists()
        assert rec.extra["repr_width"] == 6 + 2 * 3
        _, blocks, labels, _ = load_blocks(run / "representation.mvds")
        assert blocks[0].shape == (160, 12) and labels is not None
        steps = read_csv(run / "stage2_steps.csv")
        assert len(steps) == 4 * 4
        for r in steps:
            assert abs(float(r["L_spc"]) - float(r["L_cvae"]) - 0.02 * float(r["L_dis"])) <= 1e-10

    def test_deterministic(self, tmp_path):
        cfg = tiny_config()
        a = pipeline.run_seed(cfg, 1, tmp_path / "a")
        b = pipeline.run_seed(cfg, 1, tmp_path / "b")
        assert a.numeric() == b.numeric()
        c = pipeline.run_seed(cfg, 1)
        assert c.numeric() == a.numeric()

    def test_cached_metrics_reused(self, tmp_path):
        cfg = tiny_config()
        a = pipeline.run_seed(cfg, 0, tmp_path)
        b = pipeline.run_seed(cfg, 0, tmp_path)
        assert a == b

    def test_s_only(self, tmp_path):
        rec = pipeline.run_seed(tiny_config(use_spc=False), 0, tmp_path)
        assert rec.extra["repr_width"] == 6
        assert 0.0 <= rec.acc_clu <= 1.0

    def test_untrained_stage1_with_spc(self):
        rec = pipeline.run_seed(tiny_config(**{"stage1.use_ins": False, "stage1.use_clu": False}), 0)
        assert rec.extra["repr_width"] == 12

    def test_resume_after_interruption(self, tmp_path, monkeypatch):
        cfg = tiny_config()
        pipeline.run_seed(cfg, 0, tmp_path / "cont")
        original = Stage2Trainer.run_epoch

        def flaky(self):
            if self.epoch == 2:
                raise KeyboardInterrupt
            return original(self)

        monkeypatch.setattr(Stage2Trainer, "run_epoch", flaky)
        with pytest.raises(KeyboardInterrupt):
            pipeline.run_seed(cfg, 0, tmp_path / "cut")
        ck = pipeline.load_checkpoint(tmp_path / "cut" / pipeline.config_hash(cfg) / "0" / "stage2.ckpt")
        assert ck.meta["epoch"] == 2
        monkeypatch.setattr(Stage2Trainer, "run_epoch", original)
        pipeline.run_seed(cfg, 0, tmp_path / "cut")
        h = pipeline.config_hash(cfg)
        a = read_csv(tmp_path / "cont" / h / "0" / "stage2_steps.csv")
        b = read_csv(tmp_path / "cut" / h / "0" / "stage2_steps.csv")
        assert len(a) == len(b)
        for ra, rb in zip(a, b):
            assert abs(float(ra["L_spc"]) - float(rb["L_spc"])) <= 1e-9

    def test_stage_error_carries_tag(self, monkeypatch):
        def boom(*a, **k):
            raise RuntimeError("bad")

        monkeypatch.setattr(pipeline, "stage1_train", boom)
        with pytest.raises(pipeline.StageError) as info:
            pipeline.run_seed(tiny_config(), 5)
        assert info.value.stage == "stage1" and info.value.seed == 5

    def test_run_pipeline_summary(self, tmp_path):
        cfg = tiny_config()
        recs = pipeline.run_pipeline(cfg, tmp_path)
        assert [r.seed for r in recs] == [0, 1]
        assert (tmp_path / pipeline.config_hash(cfg) / "summary.csv").exists()


class TestSuites:
    def test_all_off_rejected(self):
        with pytest.raises(ValueError):
            pipeline.ablation_config(tiny_config(), False, False, False)

    def test_ablation_rows(self, tmp_path):
        cfg = tiny_config()
        table = pipeline.run_ablation(cfg, 0, tmp_path)
        assert [f for f, _ in table] == pipeline.ABLATION_ROWS
        assert len(pipeline.ABLATION_ROWS) == 7 and (False, False, False) not in pipeline.ABLATION_ROWS
        rows = read_csv(tmp_path / f"ablation_{pipeline.config_hash(cfg)}_seed0.csv")
        assert [(r["L_ins"], r["L_clu"], r["L_spc"]) for r in rows][:2] == [("1", "1", "1"), ("1", "0", "1")]

    def test_lambda_sweep_csv(self, tmp_path):
        cfg = tiny_config(**{"stage2.epochs": 1})
        pipeline.run_sweep(cfg, "lambda_dis", [0, 0.01, 0.02, 0.05, 0.5], 0, tmp_path)
        rows = read_csv(tmp_path / f"sweep_lambda_dis_{pipeline.config_hash(cfg)}_seed0.csv")
        assert len(rows) == 5 and [float(r["lambda_dis"]) for r in rows] == [0, 0.01, 0.02, 0.05, 0.5]

    def test_batch_sweep_hits_both_stages(self):
        cfg = pipeline.sweep_config(RunConfig(), "batch", 64)
        assert cfg.stage1.batch == cfg.stage2.batch == 64
        assert pipeline.sweep_config(RunConfig(), "epochs", 7).stage2.epochs == 7

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            pipeline.run_sweep(tiny_config(), "d_z", [])


class TestCLI:
    def test_flags_mirror_config(self):
        parser = cli.build_parser()
        args = parser.parse_args(["run", "--config", "c.json", "--seed", "0", "--out", "o",
                                  "--stage2.lambda_dis", "0.05", "--stage1.hidden", "32,16",
                                  "--stage1.use_knn", "true", "--data.n_clusters", "none"])
        cfg = cli._resolve_config(type(args)(**{**vars(args), "config": None}))
        assert cfg.stage2.lambda_dis == 0.05 and cfg.stage1.hidden == (32, 16)
        assert cfg.stage1.use_knn is True and cfg.data.n_clusters is None

    @pytest.mark.parametrize("missing", ["--seed", "--config", "--out"])
    def test_run_requires(self, missing):
        argv = {"--seed": ["--seed", "0"], "--config": ["--config", "c"], "--out": ["--out", "o"]}
        flat = ["run"] + [t for k, v in argv.items() if k != missing for t in v]
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args(flat)

    def test_no_prefix_matching(self):
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args(["run", "--config", "c", "--seed", "0", "--out", "o",
                                           "--data.synthetic.n", "5"])

    def test_end_to_end(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        pipeline.save_config(cfg_path, tiny_config())
        out = tmp_path / "runs"
        assert cli.main(["run", "--config", str(cfg_path), "--seed", "0", "--out", str(out)]) == 0
        line = json.loads(capsys.readouterr().out.strip().splitlines()[0])
        run = out / line["config_hash"] / "0"
        assert cli.main(["eval", str(run / "representation.mvds")]) == 0
        metrics = json.loads(capsys.readouterr().out)
        assert set(metrics) == {"acc_clu", "nmi", "ari", "acc_cls", "f_score"}
        assert cli.main(["project", str(run / "representation.mvds"), "--out", str(tmp_path / "p.csv")]) == 0
        assert len(read_csv(tmp_path / "p.csv")) == 160
        assert cli.main(["generate", str(run / "stage2.ckpt"), "--out", str(tmp_path / "g.mvds"), "--n", "2"]) == 0
        _, blocks, labels, _ = load_blocks(tmp_path / "g.mvds")
        assert blocks[0].shape == (8, 8) and labels.tolist() == [0, 0, 1, 1, 2, 2, 3, 3]

    def test_error_exit_code(self, tmp_path, capsys):
        pipeline.save_config(tmp_path / "c.json", tiny_config())
        rc = cli.main(["run", "--config", str(tmp_path / "c.json"), "--seed", "0", "--out", str(tmp_path),
                       "--stage1.use_ins", "0", "--stage1.use_clu", "0", "--use_spc", "0"])
        assert rc == 1 and "nothing to train" in capsys.readouterr().err

    def test_defaults_file(self, tmp_path):
        assert cli.main(["defaults", "--out", str(tmp_path / "d.json")]) == 0
        assert pipeline.load_config(tmp_path / "d.json") == RunConfig()
