import csv
import json

import numpy as np
import pytest

from gradrel.cli import main
from gradrel.model import load_checkpoint

FAST = ["--embed-dim", "16", "--max-epochs", "12", "--omega", "1.0"]


def gen(out, *extra, seed=3, captions=45, audio=80, dim=6):
    assert main(["gen", "--seed", str(seed), "--captions", str(captions), "--audio", str(audio),
                 "--dim", str(dim), "--list-size", "5", "--out", str(out), *extra]) == 0
    return out


@pytest.fixture
def data(tmp_path):
    return gen(tmp_path / "data")


def paths(data, out):
    return ["--data", str(data), "--output", str(out)]


# --------------------------------------------------------------------------- gen


def test_gen_is_byte_identical(tmp_path):
    a, b = gen(tmp_path / "a"), gen(tmp_path / "b")
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes(), f.name


def test_gen_reference_shape(tmp_path):
    out = gen(tmp_path / "d", "--noise", "0.2", seed=7, captions=600, audio=1009)
    lines = lambda name: (out / name).read_text().count("\n") - 1  # noqa: E731
    assert lines("ratings.csv") == 600 * 5
    assert lines("audio_features.csv") == 1009
    assert lines("pairs.csv") == lines("splits.csv") == 600


def test_gen_list_size_zero_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["gen", "--list-size", "0", "--out", str(tmp_path)])
    assert err.value.code == 2
    assert "--list-size" in capsys.readouterr().err


# --------------------------------------------------------------------------- train / eval


def test_train_eval_joint(data, tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["train", *paths(data, out), "--loss", "joint", "--alpha", "0.5", "--repeat", "3", *FAST]) == 0
    for i in range(3):
        enc, cfg = load_checkpoint(out / f"run_{i}" / "checkpoint.json")
        assert cfg.seed == i and cfg.alpha == 0.5
        assert json.loads((out / f"run_{i}" / "report.json").read_text())["seed"] == i
    capsys.readouterr()
    assert main(["eval", *paths(data, out), "--repeat", "3"]) == 0
    text = capsys.readouterr().out
    assert text.count("run ") == 3 and "mean ± sd over 3 runs" in text
    report = json.loads((out / "eval_report.json").read_text())
    assert report["n"] == 3 and len(report["runs"]) == 3
    assert np.isclose(report["map"], np.mean([r["map"] for r in report["runs"]]))
    assert report["r_at_10_sd"] == pytest.approx(np.std([r["r_at_10"] for r in report["runs"]], ddof=1))


def test_eval_single_run_omits_sd(data, tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["train", *paths(data, out), "--loss", "infonce", "--repeat", "1", *FAST]) == 0
    capsys.readouterr()
    assert main(["eval", *paths(data, out), "--repeat", "1"]) == 0
    assert "±" not in capsys.readouterr().out
    assert json.loads((out / "eval_report.json").read_text())["map_sd"] is None


def test_eval_k_beyond_pool_warns(tmp_path, caplog):
    data = gen(tmp_path / "d", captions=8, audio=8)
    out = tmp_path / "runs"
    assert main(["train", *paths(data, out), "--loss", "infonce", "--repeat", "1", *FAST]) == 0
    with caplog.at_level("WARNING"):
        assert main(["eval", *paths(data, out), "--repeat", "1", "--k", "50"]) == 0
    assert "exceeds the candidate pool" in caplog.text
    assert json.loads((out / "eval_report.json").read_text())["r_at_50"] == 1.0


def test_listnet_without_ratings_is_explicit(data, tmp_path, capsys):
    argv = ["train", "--audio-features", str(data / "audio_features.csv"),
            "--caption-features", str(data / "caption_features.csv"), "--pairs", str(data / "pairs.csv"),
            "--output", str(tmp_path / "r"), "--loss", "listnet"]
    assert main(argv) == 1
    assert "needs relevance ratings" in capsys.readouterr().err


def test_alpha_outside_unit_interval_is_usage_error(data, tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["train", *paths(data, tmp_path / "r"), "--alpha", "1.5"])
    assert err.value.code == 2
    assert "[0, 1]" in capsys.readouterr().err


def test_missing_checkpoint_named(data, tmp_path, capsys):
    assert main(["eval", *paths(data, tmp_path / "nothing")]) == 1
    assert "run_0" in capsys.readouterr().err


def test_bad_ratings_record_named(data, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("caption_id,audio_id,rating\nc0000,a0000,150\n")
    assert main(["train", *paths(data, tmp_path / "r"), "--ratings", str(bad), "--loss", "listnet"]) == 1
    err = capsys.readouterr().err
    assert "bad.csv:2" in err


def test_binarize_flag_changes_training(data, tmp_path):
    for name, extra in (("graded", []), ("binary", ["--binarize"])):
        assert main(["train", *paths(data, tmp_path / name), "--loss", "listnet", "--repeat", "1", *FAST, *extra]) == 0
    a = load_checkpoint(tmp_path / "graded" / "run_0" / "checkpoint.json")[0]
    b = load_checkpoint(tmp_path / "binary" / "run_0" / "checkpoint.json")[0]
    assert not np.array_equal(a.audio_head.weights, b.audio_head.weights)


def test_train_eval_bit_identical(data, tmp_path):
    files = []
    for name in ("x", "y"):
        out = tmp_path / name
        assert main(["train", *paths(data, out), "--repeat", "2", *FAST]) == 0
        assert main(["eval", *paths(data, out), "--repeat", "2"]) == 0
        files.append(out)
    x, y = files
    for rel in ("eval_report.json", "run_0/checkpoint.json", "run_1/report.json"):
        assert (x / rel).read_bytes() == (y / rel).read_bytes(), rel


# --------------------------------------------------------------------------- config


def test_config_paths_relative_to_config_and_flags_win(data, tmp_path, monkeypatch):
    cfg_dir = tmp_path / "exp"
    cfg_dir.mkdir()
    (cfg_dir / "exp.toml").write_text(
        "[paths]\n"
        'audio_features = "../data/audio_features.csv"\n'
        'caption_features = "../data/caption_features.csv"\n'
        'pairs = "../data/pairs.csv"\n'
        'ratings = "../data/ratings.csv"\n'
        'splits = "../data/splits.csv"\n'
        'output = "runs"\n'
        "[train]\nloss_mode = \"infonce\"\nembed_dim = 8\nmax_epochs = 3\n"
        "[experiment]\nrepeat = 1\nbase_seed = 40\n"
    )
    monkeypatch.chdir(tmp_path / "data")
    assert main(["train", "--config", str(cfg_dir / "exp.toml"), "--embed-dim", "12"]) == 0
    enc, cfg = load_checkpoint(cfg_dir / "runs" / "run_0" / "checkpoint.json")
    assert cfg.seed == 40 and cfg.embed_dim == 12 and cfg.loss_mode == "infonce"
    assert enc.embed_dim == 12


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.toml").write_text("[train]\nlearning_rate = 0.1\n")
    assert main(["train", "--config", str(tmp_path / "c.toml")]) == 1
    assert "learning_rate" in capsys.readouterr().err


# --------------------------------------------------------------------------- rank / correlate


def test_rank_dump(data, tmp_path):
    out = tmp_path / "runs"
    assert main(["train", *paths(data, out), "--loss", "infonce", "--repeat", "1", *FAST]) == 0
    assert main(["rank", *paths(data, out), "--top", "4"]) == 0
    with open(out / "run_0" / "rankings.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 15 * 4  # 45 captions / 3 splits
    assert [r["rank"] for r in rows[:4]] == ["1", "2", "3", "4"]


def test_correlate_noise_free_positive(tmp_path):
    data = gen(tmp_path / "d", "--noise", "0", captions=90, audio=120, dim=16)
    out = tmp_path / "runs"
    assert main(["train", *paths(data, out), "--loss", "listnet", "--repeat", "1", "--embed-dim", "16",
                 "--max-epochs", "60", "--omega", "1.0"]) == 0
    assert main(["correlate", *paths(data, out), "--repeat", "1"]) == 0
    report = json.loads((out / "correlation_report.json").read_text())
    assert report["spearman_rho"] > 0 and report["spearman_p"] < 0.001
    assert report["n"] == 30 * 5


def test_correlate_untrained_near_zero(tmp_path):
    data = gen(tmp_path / "d", captions=300, audio=600)
    out = tmp_path / "runs"
    assert main(["train", *paths(data, out), "--loss", "listnet", "--repeat", "3", "--max-epochs", "0"]) == 0
    assert main(["correlate", *paths(data, out), "--repeat", "3"]) == 0
    report = json.loads((out / "correlation_report.json").read_text())
    assert report["n"] == 100 * 5 and abs(report["spearman_rho"]) < 0.15


def test_correlate_constant_ratings(data, tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["train", *paths(data, out), "--loss", "infonce", "--repeat", "1", *FAST]) == 0
    flat = tmp_path / "flat.csv"
    rows = (data / "ratings.csv").read_text().splitlines()
    flat.write_text("\n".join([rows[0]] + [",".join(r.split(",")[:2] + ["50"]) for r in rows[1:]]) + "\n")
    assert main(["correlate", *paths(data, out), "--ratings", str(flat), "--repeat", "1"]) == 1
    assert "constant" in capsys.readouterr().err


# --------------------------------------------------------------------------- analyze


def analysis_inputs(tmp_path, with_apt=True):
    rng = np.random.default_rng(0)
    mats = tmp_path / "mats"
    mats.mkdir()
    for a in range(4):
        np.savetxt(mats / f"a{a}.csv", rng.uniform(size=(5 + a, 3)), delimiter=",")
    words = ["dog", "barks", "loud", "a", "the", "car", "passes", "by"]
    lines = ["pair_id,audio_id,HR,MR" + (",APT" if with_apt else "") + ",caption"]
    for i in range(30):
        hr = float(rng.uniform(0, 100))
        mr = float(np.clip(hr / 100 - 0.5 + 0.2 * rng.standard_normal(), -1, 1))
        cap = " ".join(rng.choice(words, size=int(rng.integers(2, 8))))
        apt = f",{rng.uniform(5, 30):.3f}" if with_apt else ""
        lines.append(f"p{i},a{i % 4},{hr:.4f},{mr:.4f}{apt},{cap}")
    (tmp_path / "table.csv").write_text("\n".join(lines) + "\n")
    (tmp_path / "freq.txt").write_text("a\nthe\ndog\ncar\n")
    (tmp_path / "content.txt").write_text("dog\nbarks\nloud\ncar\npasses\n")
    return ["--table", str(tmp_path / "table.csv"), "--matrices", str(mats), "--frame-hop", "0.32",
            "--freq-lexicon", str(tmp_path / "freq.txt"), "--content-lexicon", str(tmp_path / "content.txt"),
            "--out", str(tmp_path / "corr.csv")]


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_analyze_layout(tmp_path):
    assert main(["analyze", *analysis_inputs(tmp_path)]) == 0
    rows = read_table(tmp_path / "corr.csv")
    assert rows[0] == ["feature", "HR", "MR", "D(H,M)", "APT"]
    assert [r[0] for r in rows[1:]] == ["e_time", "e_class", "duration", "n_words", "n_c_words",
                                        "n_fr_words", "n_fr_c_words"]
    for r in rows[1:]:
        assert all(c.split(";")[1] in ("**", "*", "n.s.") for c in r[1:])


def test_analyze_perfect_relation_and_missing_apt(tmp_path, caplog):
    args = analysis_inputs(tmp_path, with_apt=False)
    table = tmp_path / "table.csv"
    lines = table.read_text().splitlines()
    hr = [float(line.split(",")[2]) for line in lines[1:]]
    table.write_text("\n".join([lines[0] + ",votes"] + [f"{line},{h * 3 + 1}" for line, h in zip(lines[1:], hr)]) + "\n")
    with caplog.at_level("WARNING"):
        assert main(["analyze", *args]) == 0
    assert "APT" in caplog.text
    rows = read_table(tmp_path / "corr.csv")
    assert rows[0] == ["feature", "HR", "MR", "D(H,M)"]
    votes = next(r for r in rows if r[0] == "votes")
    assert votes[1] == "1;**"


def test_analyze_malformed_matrix(tmp_path, capsys):
    args = analysis_inputs(tmp_path)
    (tmp_path / "mats" / "a2.csv").write_text("0.1,oops\n")
    assert main(["analyze", *args]) == 1
    assert "a2.csv" in capsys.readouterr().err
