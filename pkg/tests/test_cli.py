import json
import math
import subprocess
import sys

import numpy as np
import pytest

from viewforge import cli
from viewforge.data import load_dataset, read_tensor_file
from viewforge.networks import load_checkpoint
from viewforge.training import ConfigError, metrics_from_csv, sweep_from_csv

SPEC = dict(num_classes=3, channels=4, resolution=16, samples_per_class=12, noise=0.1, seed=1)


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture
def dataset_dir(tmp_path):
    spec = write_json(tmp_path / "spec.json", SPEC)
    assert cli.main(["synth", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def config_for(tmp_path, data_dir, **kw):
    cfg = dict(method="viewmaker", dataset=str(data_dir), epochs=1, batch_size=8, embed_dim=8,
               generator_width=4, probe_epochs=3)
    cfg.update(kw)
    return write_json(tmp_path / "config.json", cfg)


# -- parse_config -------------------------------------------------------------

def test_minimal_config_gets_defaults(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.SEED_ENV, raising=False)
    c = cli.parse_config(write_json(tmp_path / "c.json", {"method": "divmaker", "dataset": "/d"}))
    assert c.lr == 0.005 and c.temperature == 0.07 and c.num_views == 2
    assert c.momentum == 0.9 and c.batch_size == 32 and c.seed == 0


def test_divmaker_single_view_rejected(tmp_path):
    with pytest.raises(ConfigError, match="num_views"):
        cli.parse_config(write_json(tmp_path / "c.json", {"method": "divmaker", "dataset": "/d", "num_views": 1}))


@pytest.mark.parametrize("body,key", [({"dataset": "/d"}, "method"),
                                      ({"method": "viewmaker", "dataset": "/d", "tau": 1}, "tau"),
                                      ({"method": "viewmaker", "dataset": "/d", "batch_size": 3.5}, "batch_size")])
def test_config_errors_name_key(tmp_path, body, key):
    with pytest.raises(ConfigError, match=key):
        cli.parse_config(write_json(tmp_path / "c.json", body))


def test_config_echo_reparses(tmp_path):
    c = cli.parse_config(write_json(tmp_path / "c.json", {"method": "expert_full", "dataset": "/d", "epochs": 3}))
    again = cli.parse_config(write_json(tmp_path / "echo.json", c.to_dict()))
    assert again == c


def test_seed_precedence(tmp_path, monkeypatch):
    with_seed = write_json(tmp_path / "a.json", {"method": "viewmaker", "dataset": "/d", "seed": 5})
    without = write_json(tmp_path / "b.json", {"method": "viewmaker", "dataset": "/d"})
    monkeypatch.setenv(cli.SEED_ENV, "9")
    assert cli.parse_config(without).seed == 9
    assert cli.parse_config(with_seed).seed == 5
    assert cli.parse_config(with_seed, seed=7).seed == 7


# -- PGM ----------------------------------------------------------------------

def test_delta_rescale_midpoint_rounds_up():
    d = np.array([[-0.2, 0.0, 0.2]])
    assert cli.rescale_to_u8(d).tolist() == [[0, 128, 255]]


def test_constant_delta_is_uniform_128():
    assert np.all(cli.rescale_to_u8(np.zeros((4, 4))) == 128)


def test_pgm_header_and_size():
    buf = cli.encode_pgm(np.zeros((32, 32), dtype=np.uint8))
    assert buf.startswith(b"P5\n32 32\n255\n")
    assert len(buf) == len(b"P5\n32 32\n255\n") + 1024
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    np.testing.assert_array_equal(cli.decode_pgm(cli.encode_pgm(img)), img)


def test_window_mapping():
    assert cli.window_to_u8(np.array([-3.0, -1.0, 0.0, 1.0, 2.0])).tolist() == [0, 0, 128, 255, 255]


# -- commands -----------------------------------------------------------------

def test_synth_writes_readable_dataset(dataset_dir):
    ds, meta = load_dataset(dataset_dir)
    assert ds.images.shape == (36, 4, 16, 16)
    assert meta["split"] == {"fractions": [0.8, 0.1, 0.1], "seed": 1}
    assert len(meta["channel_stats"]["mean"]) == 4
    assert (dataset_dir / "run_meta.json").exists()


def test_pipeline_synth_pretrain_probe_visualize(tmp_path, dataset_dir):
    cfg = config_for(tmp_path, dataset_dir)
    run = tmp_path / "run"
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(run)]) == 0
    ckpt = run / cli.CHECKPOINT_NAME
    payload, params = load_checkpoint(ckpt)
    assert payload["config"]["method"] == "viewmaker" and any(k.startswith("generator.") for k in params)
    assert len(metrics_from_csv((run / "metrics.csv").read_text())) == 1

    assert cli.main(["probe", "--checkpoint", str(ckpt), "--data", str(dataset_dir), "--out", str(tmp_path / "probe")]) == 0
    results = json.loads((tmp_path / "probe" / "results.json").read_text())
    assert math.isfinite(results["accuracy"])

    vis = tmp_path / "vis"
    assert cli.main(["visualize", "--checkpoint", str(ckpt), "--data", str(dataset_dir), "--n", "2",
                     "--out", str(vis)]) == 0
    pgms = sorted(p.name for p in vis.glob("*.pgm"))
    assert len(pgms) == 2 * 4 * 3
    assert "sample001_ch03_delta.pgm" in pgms
    img = cli.decode_pgm((vis / "sample000_ch00_delta.pgm").read_bytes())
    assert img.shape == (16, 16) and img.min() == 0 and img.max() == 255


def test_pretrain_outputs_are_byte_identical(tmp_path, dataset_dir):
    cfg = config_for(tmp_path, dataset_dir, method="divmaker")
    for name in ("a", "b"):
        assert cli.main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    for f in (cli.CHECKPOINT_NAME, "metrics.csv", "config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_sweep_with_three_budgets(tmp_path, dataset_dir):
    cfg = config_for(tmp_path, dataset_dir)
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(cfg), "--budgets", "0.1,0.01,0.05", "--out", str(out)]) == 0
    rows = sweep_from_csv((out / "sweep.csv").read_text())
    assert len(rows) == 6 and all(r.status == "ok" for r in rows)


def test_expert_checkpoint_visualizes(tmp_path, dataset_dir):
    cfg = config_for(tmp_path, dataset_dir, method="expert_full")
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert cli.main(["visualize", "--checkpoint", str(tmp_path / "run" / cli.CHECKPOINT_NAME),
                     "--data", str(dataset_dir), "--n", "1", "--out", str(tmp_path / "vis")]) == 0


def test_probe_channel_mismatch_fails(tmp_path, dataset_dir, capsys):
    cfg = config_for(tmp_path, dataset_dir, method="expert_basic")
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    other = write_json(tmp_path / "spec2.json", dict(SPEC, channels=3))
    assert cli.main(["synth", "--spec", str(other), "--out", str(tmp_path / "d3")]) == 0
    capsys.readouterr()
    code = cli.main(["probe", "--checkpoint", str(tmp_path / "run" / cli.CHECKPOINT_NAME),
                     "--data", str(tmp_path / "d3"), "--out", str(tmp_path / "p")])
    err = capsys.readouterr().err
    assert code != 0 and "channels" in err and err.count("\n") == 1


@pytest.mark.parametrize("argv", [["pretrain", "--config", "/nonexistent.json", "--out", "/tmp/x"],
                                  ["probe", "--checkpoint", "/nonexistent.vfck", "--out", "/tmp/x"]])
def test_failures_give_single_line_diagnostic(argv, capsys):
    assert cli.main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("viewforge: error:") and err.count("\n") == 1


def test_bad_config_json(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{oops")
    assert cli.main(["pretrain", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 1
    assert "invalid JSON" in capsys.readouterr().err


def test_unknown_subcommand_exits_2_with_usage():
    proc = subprocess.run([sys.executable, "-m", "viewforge", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage:" in proc.stderr


def test_written_tensors_reread(dataset_dir):
    labels = read_tensor_file(dataset_dir / "labels.mstf")
    assert labels.shape == (36,) and set(np.unique(labels)) == {0.0, 1.0, 2.0}


def test_none_control_views_are_clamped_inputs():
    from viewforge.training import ExperimentConfig
    x = np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32) * 3
    _, views, delta = cli.render_views(ExperimentConfig(method="none", dataset="/d"), 3, None, x)
    np.testing.assert_array_equal(views, np.clip(x, -1, 1))
    np.testing.assert_array_equal(delta, views - x)
