import json

import numpy as np
import pytest

from hazardvlm.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, RunConfig, main
from hazardvlm.data import load_dataset

FAST_TRAIN = [
    "--epochs", "1",
    "--base-lr", "1e-3",
    "--grad-accum-steps", "2",
]

SMALL_CONF = """
# small geometry for quick runs
image_size = 16
patch_size = 4
embed_dim = 16
heads = 2
encoder_layers = 1
decoder_layers = 1
latent_dim = 8
lora_rank = 2
"""


@pytest.fixture()
def conf(tmp_path):
    path = tmp_path / "small.conf"
    path.write_text(SMALL_CONF)
    return str(path)


def synth(tmp_path, conf, n=12, seed=4):
    data = tmp_path / "data.jsonl"
    rc = main(["synth", "--config", conf, "--out", str(data), "--n", str(n), "--seed", str(seed)])
    assert rc == EXIT_OK
    return data


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_writes_valid_records(tmp_path, conf):
    data = synth(tmp_path, conf, n=10)
    lines = data.read_text().strip().splitlines()
    assert len(lines) == 10
    samples, errors = load_dataset(data)
    assert len(samples) == 10 and not errors


def test_synth_same_seed_byte_identical(tmp_path, conf):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    a_dir.mkdir()
    b_dir.mkdir()
    a = synth(a_dir, conf, seed=9)
    b = synth(b_dir, conf, seed=9)
    assert a.read_bytes() == b.read_bytes()


def test_synth_refuses_overwrite_without_force(tmp_path, conf):
    data = synth(tmp_path, conf)
    rc = main(["synth", "--config", conf, "--out", str(data), "--n", "3"])
    assert rc == EXIT_DATA
    rc = main(["synth", "--config", conf, "--out", str(data), "--n", "3", "--force"])
    assert rc == EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_missing_dataset_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit):  # argparse --help style exits are separate
        main(["train", "--help"])
    rc = main(["train", "--out", str(tmp_path / "x.ckpt")])
    assert rc == EXIT_USAGE


def test_train_nonexistent_dataset_is_data_error(tmp_path, conf):
    rc = main(["train", "--config", conf, "--dataset", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "x.ckpt")])
    assert rc == EXIT_DATA


def test_train_produces_checkpoint_log_and_vocab(tmp_path, conf, capsys):
    data = synth(tmp_path, conf)
    ckpt = tmp_path / "model.ckpt"
    rc = main(["train", "--config", conf, "--dataset", str(data), "--out", str(ckpt), *FAST_TRAIN])
    assert rc == EXIT_OK
    assert ckpt.exists()
    log = tmp_path / "model.csv"
    assert log.exists()
    rows = log.read_text().strip().splitlines()
    n_steps = len(rows) - 1
    from hazardvlm.training import load_checkpoint

    assert load_checkpoint(ckpt).step == n_steps
    assert (tmp_path / "model.ckpt.vocab").exists()
    assert int(rows[-1].split(",")[0]) == n_steps - 1


def test_reported_hparams_flag_echoes_them(tmp_path, conf, capsys):
    data = synth(tmp_path, conf)
    ckpt = tmp_path / "rh.ckpt"
    rc = main([
        "train", "--config", conf, "--dataset", str(data),
        "--out", str(ckpt), "--reported-hparams", "--epochs", "1",
    ])
    assert rc == EXIT_OK
    echoed = capsys.readouterr().out
    assert "base_lr = 0.0001" in echoed
    assert "grad_accum_steps = 8" in echoed
    assert "clip_max_norm = 1.0" in echoed
    assert "lora_rank = 8" in echoed
    # the explicit flag still wins over the preset
    assert "epochs = 1" in echoed


def test_unknown_config_key_rejected(tmp_path, conf):
    bad = tmp_path / "bad.conf"
    bad.write_text("image_size = 16\nwombats = 3\n")
    rc = main(["synth", "--config", str(bad), "--out", str(tmp_path / "d.jsonl")])
    assert rc == EXIT_USAGE


def test_invalid_flag_is_usage_error(tmp_path):
    rc = main(["synth", "--out", str(tmp_path / "d.jsonl"), "--wat"])
    assert rc == EXIT_USAGE
    assert not (tmp_path / "d.jsonl").exists()  # no side effects


# ---------------------------------------------------------------------------
# eval / predict
# ---------------------------------------------------------------------------

@pytest.fixture()
def trained(tmp_path, conf):
    data = synth(tmp_path, conf, n=14)
    ckpt = tmp_path / "model.ckpt"
    rc = main(["train", "--config", conf, "--dataset", str(data), "--out", str(ckpt), *FAST_TRAIN])
    assert rc == EXIT_OK
    return data, ckpt


def test_eval_writes_full_report(tmp_path, conf, trained, capsys):
    data, ckpt = trained
    out = tmp_path / "report"
    rc = main(["eval", "--config", conf, "--checkpoint", str(ckpt), "--dataset", str(data), "--out", str(out)])
    assert rc == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report) == {"bleu4", "rouge1", "rouge2", "rougeL", "mse_pixels", "count"}
    text = (tmp_path / "report.txt").read_text()
    assert "bleu4 = " in text


def test_eval_honors_max_samples(tmp_path, conf, trained, capsys):
    data, ckpt = trained
    rc = main([
        "eval", "--config", conf, "--checkpoint", str(ckpt),
        "--dataset", str(data), "--max-samples", "5",
    ])
    assert rc == EXIT_OK
    assert "count = 5" in capsys.readouterr().out


def test_predict_output_format(tmp_path, conf, trained, capsys):
    data, ckpt = trained
    samples, _ = load_dataset(data)
    img_path = tmp_path / "img.npy"
    np.save(img_path, samples[0].image)
    out_file = tmp_path / "prediction.txt"
    rc = main([
        "predict", "--config", conf, "--checkpoint", str(ckpt),
        "--image", str(img_path), "--greedy", "--out", str(out_file),
    ])
    assert rc == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("hazard=(") and ", " in lines[0] and lines[0].endswith(")")
    assert out_file.read_text().splitlines() == lines
    caption_first = lines[1]

    rc = main([
        "predict", "--config", conf, "--checkpoint", str(ckpt),
        "--image", str(img_path), "--greedy",
    ])
    assert rc == EXIT_OK
    assert capsys.readouterr().out.strip().splitlines()[1] == caption_first


def test_predict_rejects_wrong_shape(tmp_path, conf, trained):
    _, ckpt = trained
    img_path = tmp_path / "wrong.npy"
    np.save(img_path, np.zeros((1, 8, 8), np.float32))
    rc = main(["predict", "--config", conf, "--checkpoint", str(ckpt), "--image", str(img_path)])
    assert rc == EXIT_DATA


def test_overlong_caption_is_data_error(tmp_path, conf):
    data = synth(tmp_path, conf)
    lines = data.read_text().splitlines()
    record = json.loads(lines[0])
    record["caption"] = " ".join(["word"] * 40)
    lines[0] = json.dumps(record)
    data.write_text("\n".join(lines) + "\n")
    rc = main(["train", "--config", conf, "--dataset", str(data), "--out", str(tmp_path / "x.ckpt")])
    assert rc == EXIT_DATA


def test_corrupt_checkpoint_is_data_error(tmp_path, conf, trained):
    data, ckpt = trained
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + ckpt.read_bytes()[4:])
    (tmp_path / "bad.ckpt.vocab").write_bytes((tmp_path / "model.ckpt.vocab").read_bytes())
    rc = main(["eval", "--config", conf, "--checkpoint", str(bad), "--dataset", str(data)])
    assert rc == EXIT_DATA


def test_lora_checkpoint_round_trips_through_eval(tmp_path, conf, trained, capsys):
    data, base_ckpt = trained
    lora_ckpt = tmp_path / "lora.ckpt"
    rc = main([
        "train", "--config", conf, "--dataset", str(data), "--out", str(lora_ckpt),
        "--mode", "lora", "--init-from", str(base_ckpt), *FAST_TRAIN,
    ])
    assert rc == EXIT_OK
    rc = main(["eval", "--config", conf, "--checkpoint", str(lora_ckpt), "--dataset", str(data)])
    assert rc == EXIT_OK
    assert "bleu4 = " in capsys.readouterr().out


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------

def test_probe_table_and_records(tmp_path, capsys):
    out = tmp_path / "probe.csv"
    rc = main(["probe", "--seeds", "2", "--t-list", "50,200,800", "--out", str(out)])
    assert rc == EXIT_OK
    table = capsys.readouterr().out
    rows = out.read_text().strip().splitlines()
    assert len(rows) == 3
    assert all(len(r.split(",")) == 2 for r in rows)
    assert "slope" in table


def test_probe_divergence_exit_code(capsys):
    rc = main(["probe", "--seeds", "1", "--t-list", "100", "--lr0", "1e30"])
    assert rc == EXIT_DIVERGED


# ---------------------------------------------------------------------------
# help and config plumbing
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("command", ["synth", "train", "eval", "predict", "probe"])
def test_every_subcommand_has_help(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_run_config_defaults_are_reported_values():
    cfg = RunConfig()
    assert cfg.base_lr == 1e-4
    assert cfg.epochs == 3
    assert cfg.grad_accum_steps == 8
    assert cfg.clip_max_norm == 1.0
    assert cfg.batch_size == 1
    assert cfg.top_p == 0.9
    assert cfg.temperature == 0.95
    assert cfg.warmup_start_lr == 3e-5


def test_flags_override_config_file(tmp_path, conf):
    data = tmp_path / "d.jsonl"
    rc = main(["synth", "--config", conf, "--out", str(data), "--n", "3", "--seed", "1"])
    assert rc == EXIT_OK
    samples, _ = load_dataset(data)
    assert len(samples) == 3
    assert samples[0].image.shape == (1, 16, 16)  # from config file
