import csv
import hashlib

import pytest
import yaml
from hypothesis import HealthCheck, given, settings, strategies as st

from hvsr.cli import EVALUATE_COLUMNS, main
from hvsr.config import ConfigError, ExperimentConfig, bundled_config, load_config, parse_overrides
from hvsr.data import save_image, toy_faces

TINY = {
    "spec": {"groups": [[4, 1, 1], [4, 4, 4], [2, 8, 8]], "widths": {1: 16, 4: 16, 8: 8}, "image_shape": [3, 8, 8]},
    "data": {"toy_n": 48, "val_fraction": 0.25},
    "degradation": {"kind": "block-average", "scale": 2},
    "vae": {"batch_size": 8, "learning_rate": 1e-3, "max_iterations": 20, "eval_interval": 10},
    "lrenc": {"batch_size": 8, "learning_rate": 1e-3, "max_iterations": 10, "eval_interval": 5},
    "analysis": {"n_codes": 4, "n_samples": 3, "n_images": 4, "s_list": [1, 2]},
}


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["train-vae", "--config", str(cfg), "--out", str(root), "--run-name", "vae"]) == 0
    vae = root / "vae" / "last.ckpt"
    assert main(["train-lrenc", "--config", str(cfg), "--out", str(root), "--run-name", "lr",
                 "--paths.vae_checkpoint", str(vae)]) == 0
    return root, cfg, vae, root / "lr" / "last.ckpt"


# --------------------------------------------------------------------------
# config


def test_bundled_reference_configs():
    expected = {"table1_x4": (57, 8, 1e-5, 150_000), "table1_x8": (43, 16, 4e-5, 150_000),
                "table1_x16": (21, 32, 1e-4, 300_000)}
    for name, (k, batch, lr, iters) in expected.items():
        cfg = load_config(bundled_config(name))
        assert (cfg.lrenc.k, cfg.lrenc.batch_size, cfg.lrenc.learning_rate, cfg.lrenc.max_iterations) == \
            (k, batch, lr, iters)
        assert cfg.resolved_k() == k
        assert cfg.hierarchy().n_groups == 66


def test_desk_config_loads():
    cfg = load_config(bundled_config("desk"))
    assert cfg.hierarchy().n_groups == 8
    assert cfg.resolved_k() == 5


def test_parse_overrides():
    over = parse_overrides(["--train.learning_rate", "5e-4", "--paths.out_dir=x", "--lrenc.k", "3"], "vae")
    assert over == {"vae": {"learning_rate": 5e-4}, "paths": {"out_dir": "x"}, "lrenc": {"k": 3}}
    with pytest.raises(ConfigError):
        parse_overrides(["--train.learning_rate", "1"], None)
    with pytest.raises(ConfigError):
        parse_overrides(["--vae.batch_size"], None)
    with pytest.raises(ConfigError):
        parse_overrides(["stray"], None)


def test_config_errors(tmp_path):
    for bad in [{"vae": {"batch_sise": 2}}, {"bogus": 1}, {"seed": -1}, {"spec": "nope"},
                {"degradation": {"kind": "blur"}}, {"vae": {"batch_size": "many"}}, {"analysis": {"mode": "x"}},
                {"vae": 3}]:
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY)
    path = cfg.dump(tmp_path / "c.yaml")
    assert load_config(path) == cfg


# --------------------------------------------------------------------------
# commands


def test_gen_toydata(tmp_path, capsys):
    assert main(["gen-toydata", str(tmp_path / "a"), "--n", "100", "--seed", "3"]) == 0
    files = sorted((tmp_path / "a").iterdir())
    assert len(files) == 100
    assert main(["gen-toydata", str(tmp_path / "b"), "--n", "100", "--seed", "3"]) == 0
    assert [_digest(f) for f in files] == [_digest(f) for f in sorted((tmp_path / "b").iterdir())]
    assert main(["gen-toydata", str(tmp_path / "c"), "--n", "0"]) != 0


def test_override_takes_precedence(tiny, tmp_path):
    root, cfg, _, _ = tiny
    assert main(["train-vae", "--config", str(cfg), "--out", str(tmp_path), "--run-name", "r",
                 "--train.learning_rate", "5e-4", "--train.max_iterations", "2", "--train.eval_interval", "1"]) == 0
    resolved = yaml.safe_load((tmp_path / "r" / "config.yaml").read_text())
    assert resolved["vae"]["learning_rate"] == 5e-4
    assert TINY["vae"]["learning_rate"] == 1e-3


def test_rerun_prints_identical_final_loss(tiny, tmp_path, capsys):
    _, cfg, _, _ = tiny
    outs = []
    for name in ("a", "b"):
        assert main(["train-vae", "--config", str(cfg), "--out", str(tmp_path), "--run-name", name,
                     "--train.max_iterations", "5", "--train.eval_interval", "5"]) == 0
        outs.append([l for l in capsys.readouterr().out.splitlines() if l.startswith("final")])
    assert outs[0] == outs[1] and outs[0]
    assert _digest(tmp_path / "a" / "last.ckpt") == _digest(tmp_path / "b" / "last.ckpt")


def test_missing_parent_checkpoint(tiny, tmp_path, capsys):
    _, cfg, _, _ = tiny
    code = main(["train-lrenc", "--config", str(cfg), "--out", str(tmp_path),
                 "--paths.vae_checkpoint", str(tmp_path / "nope.ckpt")])
    assert code == 2
    assert "parent hash" in capsys.readouterr().err


def test_parent_mismatch_is_reported(tiny, tmp_path, capsys):
    root, cfg, _, lr = tiny
    other = tmp_path / "other"
    assert main(["train-vae", "--config", str(cfg), "--out", str(tmp_path), "--run-name", "other",
                 "--seed", "1", "--train.max_iterations", "2", "--train.eval_interval", "1"]) == 0
    capsys.readouterr()
    code = main(["evaluate", "--config", str(cfg), "--out", str(tmp_path), "--paths.vae_checkpoint",
                 str(other / "last.ckpt"), "--paths.lrenc_checkpoint", str(lr)])
    assert code == 2 and "hash mismatch" in capsys.readouterr().err


def test_analyze_uk_csv(tiny, tmp_path):
    _, cfg, vae, _ = tiny
    assert main(["analyze-uk", "--config", str(cfg), "--out", str(tmp_path), "--run-name", "uk",
                 "--paths.vae_checkpoint", str(vae)]) == 0
    with open(tmp_path / "uk" / "uk.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["k", "rmse_s1_mean", "rmse_s1_stderr", "rmse_s2_mean", "rmse_s2_stderr"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]
    # both pixel modes are written and labelled; uk.csv is the configured one
    run = tmp_path / "uk"
    assert (run / "uk.csv").read_bytes() == (run / "uk_sample.csv").read_bytes()
    with open(run / "uk_mean.csv") as f:
        mean_rows = list(csv.reader(f))
    assert mean_rows[0] == rows[0] and len(mean_rows) == len(rows)


def test_evaluate_columns_and_projection(tiny, tmp_path):
    _, cfg, vae, lr = tiny
    args = ["evaluate", "--config", str(cfg), "--out", str(tmp_path), "--paths.vae_checkpoint", str(vae),
            "--paths.lrenc_checkpoint", str(lr)]
    assert main(args + ["--run-name", "e", "--project"]) == 0
    with open(tmp_path / "e" / "evaluate.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == EVALUATE_COLUMNS
    assert EVALUATE_COLUMNS == ["k", "s", "ce_empirical", "ce_empirical_stderr", "ce_empirical_projected",
                                "ce_empirical_projected_stderr", "ce_hr_encoder", "ce_hr_encoder_stderr",
                                "uk_prior", "uk_prior_stderr"]
    assert float(rows[0]["ce_empirical_projected"]) <= 1e-4
    assert float(rows[0]["ce_empirical"]) > 0
    assert main(args + ["--run-name", "e2"]) == 0
    with open(tmp_path / "e2" / "evaluate.csv") as f:
        assert next(csv.DictReader(f))["ce_empirical_projected"] == "nan"


def test_super_resolve_reproducible(tiny, tmp_path):
    _, cfg, vae, lr = tiny
    lr_img = tmp_path / "lr.png"
    save_image(toy_faces(1, seed=5, size=4)[0], lr_img)
    hr_img = tmp_path / "hr.png"
    save_image(toy_faces(1, seed=5, size=8)[0], hr_img)
    base = ["super-resolve", str(lr_img), "--n", "4", "--config", str(cfg), "--out", str(tmp_path), "--seed", "7",
            "--paths.vae_checkpoint", str(vae), "--paths.lrenc_checkpoint", str(lr), "--hr", str(hr_img)]
    assert main(base + ["--run-name", "a"]) == 0
    assert main(base + ["--run-name", "b"]) == 0
    names = sorted(p.name for p in (tmp_path / "a").glob("*.png"))
    assert names == ["grid.png", "sample_000.png", "sample_001.png", "sample_002.png", "sample_003.png"]
    for n in names:
        assert _digest(tmp_path / "a" / n) == _digest(tmp_path / "b" / n)
    from PIL import Image
    assert Image.open(tmp_path / "a" / "grid.png").size == (8 * 6, 8)


def test_super_resolve_rejects_bad_images(tiny, tmp_path):
    _, cfg, vae, lr = tiny
    base = ["--config", str(cfg), "--out", str(tmp_path), "--paths.vae_checkpoint", str(vae),
            "--paths.lrenc_checkpoint", str(lr)]
    (tmp_path / "junk.png").write_bytes(b"\x89PNG garbage")
    assert main(["super-resolve", str(tmp_path / "junk.png"), *base]) == 2
    save_image(toy_faces(1, size=8)[0], tmp_path / "big.png")
    assert main(["super-resolve", str(tmp_path / "big.png"), *base]) == 2
    assert main(["super-resolve", str(tmp_path / "absent.png"), *base]) == 2


def test_missing_checkpoints_exit_2(tmp_path):
    assert main(["analyze-uk", "--out", str(tmp_path)]) == 2
    assert main(["evaluate", "--out", str(tmp_path), "--paths.vae_checkpoint", str(tmp_path / "x")]) == 2


def test_usage_errors_exit_2():
    assert main([]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["analyze-uk", "--seed", "abc"]) == 2


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(blob=st.binary(max_size=200))
def test_malformed_config_files_exit_2(tmp_path, blob):
    path = tmp_path / "bad.yaml"
    path.write_bytes(blob)
    # with no checkpoint configured every outcome is a user error
    assert main(["analyze-uk", "--config", str(path), "--out", str(tmp_path)]) == 2


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(key=st.sampled_from(["vae.batch_size", "vae.learning_rate", "seed", "degradation.scale", "analysis.n_codes",
                            "spec", "vae.plateau_factor", "degradation.kind"]),
       value=st.sampled_from(["-1", "0", "abc", "[1, 2]", "{a: 1}", "1.5", "null", "true"]))
def test_malformed_overrides_exit_2(tmp_path, key, value):
    code = main(["analyze-uk", "--out", str(tmp_path), f"--{key}", value])
    assert code == 2
