import os

import numpy as np
import pytest

from e2bows.bowl import read_words
from e2bows.cli import main, read_ranks
from e2bows.index import load_index


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_usage_errors_exit_two(capsys):
    assert main(["query"]) == 2
    assert main(["stats", "--index", "x", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_domain_error_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.e2ix"
    bad.write_bytes(b"junk")
    assert main(["stats", "--index", str(bad)]) == 1
    assert "error" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    p = lambda name: str(d / name)
    assert main(["gen-data", "--out", p("data"), "--classes", "3", "--per-class", "8", "--size", "16",
                 "--queries-per-class", "2", "--seed", "3"]) == 0
    assert main(["train", "--data", p("data"), "--out", p("m.e2bw"), "--epochs", "2", "--batch", "6",
                 "--m", "4", "--seed", "1"]) == 0
    assert main(["extract", "--ckpt", p("m.e2bw"), "--data", p("data"), "--subset", "db",
                 "--out", p("db.txt")]) == 0
    assert main(["extract", "--ckpt", p("m.e2bw"), "--data", p("data"), "--subset", "query",
                 "--out", p("q.txt")]) == 0
    assert main(["build-index", "--words", p("db.txt"), "--dim", "12", "--out", p("idx")]) == 0
    assert main(["query", "--index", p("idx"), "--words", p("q.txt"), "--k", "5", "--out", p("ranks.txt")]) == 0
    assert main(["eval", "--ranks", p("ranks.txt"), "--labels", p("data"), "--ndcg-k", "10",
                 "--out", p("report.txt")]) == 0
    return p


def test_pipeline_outputs(pipeline):
    p = pipeline
    assert len(read_words(p("db.txt"), 12)) == 18
    assert load_index(p("idx")).image_count == 18
    header, rows = read_ranks(p("ranks.txt"))
    assert int(header["k"]) == 5 and len(rows) == 6
    lines = open(p("report.txt")).read().splitlines()
    assert len(lines) == 7
    assert lines[-1].startswith("mAP=") and "NDCG@10=" in lines[-1] and "ANO=" in lines[-1]
    for line in lines[:-1]:
        qid, ap, nd, touched = line.split()
        assert 0 <= float(ap) <= 1 and 0 <= float(nd) <= 1 and int(touched) >= 0


def test_outputs_are_reproducible(pipeline, tmp_path):
    p = pipeline
    assert main(["train", "--data", p("data"), "--out", str(tmp_path / "m2.e2bw"), "--epochs", "2",
                 "--batch", "6", "--m", "4", "--seed", "1"]) == 0
    with open(p("m.e2bw"), "rb") as a, open(tmp_path / "m2.e2bw", "rb") as b:
        assert a.read() == b.read()


def test_extract_variants(pipeline, tmp_path):
    p = pipeline
    out = str(tmp_path / "b.txt")
    assert main(["extract", "--ckpt", p("m.e2bw"), "--data", p("data"), "--binarize",
                 "--beta-override", "0.2", "--out", out]) == 0
    recs = read_words(out, 12)
    assert len(recs) == 24
    assert all(v.binary or len(v) == 0 for _, v in recs)
    assert main(["extract", "--ckpt", p("m.e2bw"), "--out", out]) == 2
    assert main(["extract", "--ckpt", p("m.e2bw"), "--data", p("data"), "--beta-override", "-1",
                 "--out", out]) == 1


def test_stats_and_export_sfm(pipeline, tmp_path, capsys):
    p = pipeline
    assert main(["stats", "--index", p("idx")]) == 0
    assert "ANV=" in capsys.readouterr().out
    out = tmp_path / "sfm"
    assert main(["export-sfm", "--ckpt", p("m.e2bw"), "--data", p("data"), "--image", "4",
                 "--out", str(out)]) == 0
    pgm = (out / "sfm_000.pgm").read_bytes()
    assert pgm.startswith(b"P5\n2 2\n255\n") and len(pgm) == len(b"P5\n2 2\n255\n") + 4
    assert len([f for f in os.listdir(out) if f.endswith(".pgm")]) == 3
    assert main(["export-sfm", "--ckpt", p("m.e2bw"), "--data", p("data"), "--image", "999",
                 "--out", str(out)]) == 1


def test_sweep_report(pipeline, tmp_path):
    p = pipeline
    prefix = str(tmp_path / "sweep")
    assert main(["sweep", "--ckpt", p("m.e2bw"), "--data", p("data"), "--betas", "0,0.1,0.3",
                 "--ndcg-k", "10", "--out", prefix]) == 0
    rows = open(prefix + ".tsv").read().splitlines()
    assert rows[0].split("\t")[0] == "beta" and len(rows) >= 4
    anv = [float(r.split("\t")[3]) for r in rows[1:]]
    assert anv == sorted(anv, reverse=True)
    with open(prefix + ".png", "rb") as fh:
        assert fh.read(8) == b"\x89PNG\r\n\x1a\n"
