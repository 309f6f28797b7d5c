import pytest

from qeadapt.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Corpus, language models and a baseline built through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    c = str(d / "corpus")
    steps = [
        ["gen", "--out", c, "--seed", "2", "--n-train", "80", "--n-dev", "32", "--n-test", "24"],
        ["train-lm", "--corpus", c, "--out", str(d / "bigram.lm")],
        ["train-lm", "--corpus", c, "--order", "3", "--out", str(d / "trigram.lm")],
        ["train-lm", "--corpus", c, "--split", "dev", "--order", "3", "--out", str(d / "out.lm")],
        ["train-lm", "--corpus", c, "--classes", "--out", str(d / "class.lm")],
        ["train-am", "--corpus", c, "--hidden", "24", "--max-epochs", "8", "--out",
         str(d / "base.mdl"), "--priors", str(d / "priors.txt"), "--log", str(d / "train.tsv")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return d


def dec(d, split="test"):
    return ["--corpus", str(d / "corpus"), "--split", split, "--model", str(d / "base.mdl"),
            "--priors", str(d / "priors.txt"), "--lm", str(d / "bigram.lm")]


def qe_lms(d):
    return ["--lm-in", str(d / "trigram.lm"), "--lm-out", str(d / "out.lm"),
            "--class-lm", str(d / "class.lm")]


def test_gen_layout(workdir):
    c = workdir / "corpus"
    assert (c / "lexicon.tsv").exists()
    for split in ("train", "dev", "test"):
        assert (c / split / "manifest.tsv").exists()
    assert (workdir / "train.tsv").read_text().startswith("epoch\tlr\tcv-frame-acc\ttrain-loss")


def test_decode_and_eval(workdir, capsys):
    out = workdir / "dec"
    assert main(["decode", *dec(workdir), "--nbest", "3", "--out", str(out)]) == 0
    for name in ("hyp.txt", "nbest.txt", "cn.txt", "wer.tsv"):
        assert (out / name).exists()
    total = (out / "wer.tsv").read_text().splitlines()[-1]
    assert main(["eval", "--corpus", str(workdir / "corpus"), "--hyp", str(out / "hyp.txt")]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == total


def test_decode_with_features(workdir):
    out = workdir / "decf"
    assert main(["decode", *dec(workdir), *qe_lms(workdir), "--nbest", "3", "--features",
                 "--out", str(out)]) == 0
    rows = (out / "features.tsv").read_text().splitlines()
    assert len(rows) == 24 and all(len(r.split("\t")) == 42 for r in rows)


def test_align(workdir):
    out = workdir / "ali.txt"
    assert main(["align", *dec(workdir), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 24


def test_qe_round_trip(workdir):
    d = workdir
    feats, targets = d / "dev.feats", d / "dev.wer"
    assert main(["qe-extract", *dec(d, "dev"), *qe_lms(d), "--out", str(feats),
                 "--targets", str(targets)]) == 0
    assert main(["qe-train", "--features", str(feats), "--targets", str(targets),
                 "--trees", "4", "--k-features", "8", "--n-min", "5,10", "--out",
                 str(d / "qe.xrt"), "--log", str(d / "qe.log")]) == 0
    assert len((d / "qe.log").read_text().splitlines()) == 2
    assert main(["qe-predict", "--model", str(d / "qe.xrt"), "--features", str(feats),
                 "--out", str(d / "dev.pwer")]) == 0
    preds = [float(line.split("\t")[1]) for line in (d / "dev.pwer").read_text().splitlines()]
    assert len(preds) == 32 and all(0.0 <= p <= 1.0 for p in preds)


@pytest.mark.parametrize("mode", ["kld-hard", "kld-soft", "odlr"])
def test_adapt_modes(workdir, mode):
    d = workdir
    dout = d / f"dec_{mode}"
    assert main(["decode", *dec(d), "--out", str(dout)]) == 0
    # per-utterance WER lines double as the sentence-WER file
    wer_file = d / f"wer_{mode}.tsv"
    assert main(["eval", "--corpus", str(d / "corpus"), "--hyp", str(dout / "hyp.txt"),
                 "--out", str(wer_file)]) == 0
    argv = ["adapt", *dec(d), "--supervision", str(dout / "hyp.txt"), "--mode", mode,
            "--max-epochs", "2", "--out", str(d / f"{mode}.mdl"), "--log", str(d / f"{mode}.log")]
    if mode == "kld-soft":
        argv += ["--wer", str(wer_file), "--threshold", "0.5"]
    assert main(argv) == 0
    assert (d / f"{mode}.mdl").read_bytes().startswith(b"MLP ")


def test_rescore(workdir, capsys):
    d = workdir
    out = d / "dec_nb"
    assert main(["decode", *dec(d), "--nbest", "4", "--out", str(out)]) == 0
    assert main(["rescore", "--corpus", str(d / "corpus"), "--split", "test", "--nbest",
                 str(out / "nbest.txt"), "--lm", str(d / "bigram.lm"), "--rescore-lm",
                 str(d / "trigram.lm"), "--weight", "0", "--out", str(d / "resc.txt")]) == 0
    lines = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert lines["wer_before"] == lines["wer_after"]
    assert (d / "resc.txt").read_text() == (out / "hyp.txt").read_text()


def test_two_pass_and_grid(tmp_path, capsys):
    small = ["--n-train", "80", "--n-dev", "30", "--n-test", "30", "--hidden", "16",
             "--lm-extra-sentences", "100", "--adapt-epochs", "2"]
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("alpha = 0.5\nseed = 1\n")
    assert main(["two-pass", "--config", str(cfg), *small, "--alpha", "0.3",
                 "--output-dir", str(tmp_path / "tp")]) == 0
    report = dict(line.split("\t") for line in (tmp_path / "tp" / "report.tsv").read_text().splitlines())
    assert report["alpha"] == "0.30"
    assert "seed = 1" in (tmp_path / "tp" / "config.txt").read_text()
    assert main(["grid", *small, "--grid-sizes", "10,20", "--grid-alphas", "0.0,0.9"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "\t0.0\t0.9" and out[3].startswith("# argmin\t")


def test_preset_two_pass(capsys):
    assert main(["two-pass", "--preset", "DT05+man+raw+ET05", "--n-train", "60", "--n-dev", "20",
                 "--n-test", "20", "--hidden", "16", "--lm-extra-sentences", "50",
                 "--adapt-epochs", "1"]) == 0
    report = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert report["adaptation_candidates"] == "20"


def test_runtime_error_is_one_line(tmp_path, capsys):
    assert main(["eval", "--corpus", str(tmp_path), "--hyp", "missing.txt"]) == 1
    err = capsys.readouterr().err.splitlines()
    assert len(err) == 1
    assert err[0].split("\t")[:3] == ["error", "eval", "FileNotFoundError"]


def test_usage_error_is_one_line(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["decode", "--corpus", "x"])
    assert exc.value.code == 2
    err = capsys.readouterr().err.splitlines()
    assert len(err) == 1 and err[0].startswith("error\tdecode\tUsageError\t")
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_bad_config_value(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = red\n")
    assert main(["two-pass", "--config", str(cfg)]) == 1
    assert "unknown key" in capsys.readouterr().err
