import pytest

from cslab.cli import (
    ConfigFileError,
    load_synth_spec,
    load_train_config,
    main,
    parse_kv_config,
)


GEN_CFG = """\
# tiny corpus for smoke tests
n_a = 3
n_b = 3
feature_dim = 8
seed = 13
train_size = 30
valid_size = 30
dev_a_size = 30
dev_b_size = 30
"""

TRAIN_CFG = """\
system = moe_lae
disentangle = true
epochs = 1
batch_size = 8
warmup_steps = 5
checkpoint_average_k = 1
seed = 4
lambda = 10.0
d_model = 8
ff_dim = 12
n_heads = 2
n_shared_blocks = 1
n_specific_blocks = 1
"""


def test_parse_kv_config_basics():
    got = parse_kv_config("a = 1\n# comment\nb = two # trailing\n\n")
    assert got == {"a": "1", "b": "two"}


def test_parse_kv_config_rejects_garbage():
    with pytest.raises(ConfigFileError):
        parse_kv_config("not a pair\n")
    with pytest.raises(ConfigFileError):
        parse_kv_config("a = 1\na = 2\n")
    with pytest.raises(ConfigFileError):
        parse_kv_config("a =\n")


def test_unknown_keys_are_errors(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochz = 3\n")
    with pytest.raises(ConfigFileError, match="epochz"):
        load_train_config(cfg)
    cfg.write_text("n_a = 2\nwat = 1\n")
    with pytest.raises(ConfigFileError, match="wat"):
        load_synth_spec(cfg)


def test_bad_value_types_are_errors(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = soon\n")
    with pytest.raises(ConfigFileError):
        load_train_config(cfg)
    cfg.write_text("disentangle = yes\n")
    with pytest.raises(ConfigFileError):
        load_train_config(cfg)


def test_load_configs(tmp_path):
    gen = tmp_path / "gen.cfg"
    gen.write_text(GEN_CFG)
    spec = load_synth_spec(gen)
    assert spec.n_a == 3 and spec.split_sizes["train"] == 30
    train = tmp_path / "train.cfg"
    train.write_text(TRAIN_CFG)
    tc, overrides = load_train_config(train)
    assert tc.system == "moe_lae" and tc.lam == 10.0
    assert overrides["d_model"] == 8


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen = root / "gen.cfg"
    gen.write_text(GEN_CFG)
    data = root / "data"
    assert main(["gen", "--spec", str(gen), "--out", str(data)]) == 0
    return root, data


def test_cli_end_to_end(corpus_dir, capsys):
    root, data = corpus_dir
    train_cfg = root / "train.cfg"
    train_cfg.write_text(TRAIN_CFG)
    run = root / "run"
    assert main(["train", "--config", str(train_cfg), "--data", str(data),
                 "--out", str(run)]) == 0
    assert (run / "averaged.ckpt").exists()
    assert (run / "train_log.tsv").exists()
    assert (run / "epoch_000000.ckpt").exists()

    assert main(["eval", "--model", str(run / "averaged.ckpt"),
                 "--data", str(data), "--split", "dev_B_heavy",
                 "--beam", "2"]) == 0
    out = capsys.readouterr().out
    assert "MER" in out and "beam2" in out

    assert main(["eval", "--model", str(run / "averaged.ckpt"),
                 "--data", str(data), "--split", "nope", "--beam", "1"]) == 2


def test_cli_matrix_and_report(corpus_dir):
    root, data = corpus_dir
    cfg = root / "matrix.cfg"
    cfg.write_text(TRAIN_CFG)
    out = root / "matrix"
    assert main(["matrix", "--config", str(cfg), "--data", str(data),
                 "--out", str(out), "--jobs", "2"]) == 0
    assert (out / "score_report.csv").exists()
    assert (out / "gating_report.csv").exists()
    assert (out / "separation_report.csv").exists()
    assert (out / "moe_lae_dis" / "projection_points.csv").exists()
    assert main(["report", "--run", str(out)]) == 0
    assert (out / "score_comparison.png").exists()
    assert (out / "gating_weights.png").exists()
    assert (out / "training_curves.png").exists()
    assert (out / "moe_lae_dis" / "projection_points.png").exists()


def test_cli_report_empty_dir(tmp_path):
    assert main(["report", "--run", str(tmp_path)]) == 2


def test_cli_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.cfg"),
                 "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
