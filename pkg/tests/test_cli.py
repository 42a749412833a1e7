import json
from pathlib import Path

import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from malpipe import cli, pipeline
from malpipe.cli import EXIT_LAYOUT, EXIT_NO_OUTPUT, EXIT_OK, EXIT_OTHER, EXIT_TRAINING, EXIT_USAGE, main
from malpipe.metrics import read_report_csv
from malpipe.pebuilder import CODE, RDATA, PESpec, SectionSpec, build_pe
from malpipe.vectorizer import FeatureLayout, write_fvec

DATA = Path(__file__).parent / "data"
FAST = ["--iterations", "20", "--min-stage-samples", "50", "--min-samples-leaf", "5", "--max-leaves", "15"]


def small_pe(tag: bytes = b"x") -> bytes:
    spec = PESpec(
        sections=[SectionSpec(".text", b"\x90" * 300 + tag, characteristics=CODE),
                  SectionSpec(".rdata", b"hello world strings " * 4, characteristics=RDATA)],
        imports={"kernel32.dll": ["CreateFileA", "ExitProcess"]},
    )
    return build_pe(spec)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "-o", str(d / "c.jsonl"), "--sidecar", str(d / "c.tsv"),
                 "--samples", "2000", "--seed", "2", "--tail-families", "5"]) == 0
    assert main(["train", str(d / "c.jsonl"), "--sidecar", str(d / "c.tsv"), "-o", str(d / "m.plne"), *FAST]) == 0
    return d


# -- extract ---------------------------------------------------------------------

def test_extract_one_file(tmp_path, capsys):
    pe = tmp_path / "a.exe"
    pe.write_bytes(small_pe())
    assert main(["extract", str(pe), "--label", "1"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    assert rec["label"] == 1 and len(rec["sha256"]) == 64
    assert [s["name"] for s in rec["sections"]["sections"]] == [".text", ".rdata", ".idata"]


def test_extract_without_files_is_usage_error():
    assert main(["extract"]) == EXIT_USAGE


def test_extract_mixed_inputs(tmp_path, capsys):
    good = [tmp_path / f"g{i}.exe" for i in range(2)]
    for i, p in enumerate(good):
        p.write_bytes(small_pe(bytes([i])))
    bad = tmp_path / "bad.exe"
    bad.write_bytes(b"not a pe at all")
    out = tmp_path / "o.jsonl"
    code = main(["extract", str(good[0]), str(bad), str(tmp_path / "missing.exe"), str(good[1]), "-o", str(out)])
    assert code == EXIT_OK
    assert len(out.read_text().splitlines()) == 2
    err = capsys.readouterr().err
    assert "bad.exe" in err and "missing.exe" in err


def test_extract_nothing_parsed(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 10)
    assert main(["extract", str(bad)]) == EXIT_NO_OUTPUT


# -- train ------------------------------------------------------------------------

def test_train_writes_model_and_report(work):
    raw = (work / "m.plne").read_bytes()
    assert raw[:4] == b"PLNE"
    rep = read_report_csv(work / "m.plne.report.csv")
    assert list(rep) == list(pipeline.STAGES)
    assert set(rep[pipeline.DETECTION]) == {"Inputs", "Samples", "Accuracy", "AUC", "False positives",
                                             "False negatives"}
    assert float(rep[pipeline.DETECTION]["Accuracy"]) > 0.9


def test_train_same_seed_is_byte_identical(work, tmp_path):
    out = tmp_path / "again.plne"
    assert main(["train", str(work / "c.jsonl"), "--sidecar", str(work / "c.tsv"), "-o", str(out), *FAST]) == 0
    assert out.read_bytes() == (work / "m.plne").read_bytes()


def test_train_without_behavior_marks_stage_skipped(work, tmp_path):
    side = tmp_path / "nobeh.tsv"
    lines = (work / "c.tsv").read_text().splitlines()
    side.write_text("\n".join("\t".join(line.split("\t")[:3]) for line in lines) + "\n")
    out = tmp_path / "m.plne"
    assert main(["train", str(work / "c.jsonl"), "--sidecar", str(side), "-o", str(out), *FAST]) == 0
    rep = read_report_csv(tmp_path / "m.plne.report.csv")
    assert set(rep[pipeline.BEHAVIOR].values()) == {"skipped"}
    assert float(rep[pipeline.FAMILY]["Samples"]) > 0


def test_train_errors(work, tmp_path):
    assert main(["train"]) == EXIT_USAGE
    bad = tmp_path / "c.toml"
    bad.write_text("[nonsense]\n")
    assert main(["train", str(work / "c.jsonl"), "-o", str(tmp_path / "m"), "--config", str(bad)]) == EXIT_USAGE
    benign = tmp_path / "benign.jsonl"
    benign.write_text("".join(line + "\n" for line in (work / "c.jsonl").read_text().splitlines()
                              if '"label": 0' in line or '"label":0' in line))
    assert main(["train", str(benign), "-o", str(tmp_path / "m"), *FAST]) == EXIT_TRAINING
    assert main(["train", str(tmp_path / "absent.jsonl"), "-o", str(tmp_path / "m")]) == EXIT_OTHER


# -- classify ---------------------------------------------------------------------

def test_classify_pe_and_jsonl_agree(work, tmp_path):
    pes = []
    for i in range(3):
        p = tmp_path / f"s{i}.exe"
        p.write_bytes(small_pe(bytes([i]) * 50))
        pes.append(str(p))
    jsonl = tmp_path / "r.jsonl"
    assert main(["extract", *pes, "-o", str(jsonl)]) == 0
    a, b = tmp_path / "a.out", tmp_path / "b.out"
    assert main(["classify", str(work / "m.plne"), *pes, "-o", str(a)]) == 0
    assert main(["classify", str(work / "m.plne"), str(jsonl), "-o", str(b)]) == 0
    va, vb = a.read_text().splitlines(), b.read_text().splitlines()
    assert len(va) == 3 and va == vb


def test_classify_empty_input(work, tmp_path, capsys):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert main(["classify", str(work / "m.plne"), str(empty)]) == EXIT_OK
    assert capsys.readouterr().out == ""


def test_classify_layout_mismatch(work, tmp_path):
    p = tmp_path / "x.fvec"
    write_fvec(p, np.zeros((2, 17)))
    assert main(["classify", str(work / "m.plne"), str(p)]) == EXIT_LAYOUT


def test_classify_fvec_and_quarantine_report(work, tmp_path, capsys):
    model = pipeline.load_pipeline(work / "m.plne")
    p = tmp_path / "x.fvec"
    write_fvec(p, np.zeros((2, model.layout.total_length)))
    assert main(["classify", str(work / "m.plne"), str(p)]) == EXIT_OK
    assert len(capsys.readouterr().out.splitlines()) == 2
    assert main(["classify", str(work / "m.plne"), str(work / "c.jsonl"), "--quarantine-report"]) == EXIT_OK
    last = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert last["quarantine_report"]["samples"] == 2000


def test_classify_missing_model(tmp_path):
    assert main(["classify", str(tmp_path / "nope.plne")]) == EXIT_OTHER


# -- eval -------------------------------------------------------------------------

def test_eval_matches_golden_report(work, tmp_path):
    test = tmp_path / "t.jsonl"
    side = tmp_path / "t.tsv"
    assert main(["synth", "-o", str(test), "--sidecar", str(side), "--samples", "600", "--seed", "40",
                 "--tail-families", "5"]) == 0
    out = tmp_path / "ev"
    assert main(["eval", str(work / "m.plne"), str(test), "--sidecar", str(side), "-o", str(out)]) == 0
    assert (out / "report.csv").read_text() == (DATA / "eval_report_golden.csv").read_text()
    for stage in pipeline.STAGES[:4]:
        rows = (out / f"confusion_{stage}.csv").read_text().splitlines()
        assert sum(int(x) for r in rows[1:] for x in r.split(",")[1:]) > 0
    q = json.loads((out / "quarantine.json").read_text())
    assert q["samples"] == 600


def test_eval_without_labels(work, tmp_path):
    p = tmp_path / "u.jsonl"
    p.write_text("")
    assert main(["eval", str(work / "m.plne"), str(p), "-o", str(tmp_path / "ev")]) == EXIT_NO_OUTPUT


# -- importance, embed, manifest --------------------------------------------------

def test_importance_tables(work, tmp_path, capsys):
    csv = tmp_path / "i.csv"
    assert main(["importance", str(work / "m.plne"), "--csv", str(csv)]) == EXIT_OK
    text = capsys.readouterr().out
    assert all(s in text for s in pipeline.STAGES)
    assert csv.read_text().startswith("stage,rank,block,gain,share,splits\n")
    assert main(["importance", str(work / "m.plne"), "--level", "group"]) == EXIT_OK


def test_embed_separates_families(work, tmp_path):
    src = tmp_path / "f.jsonl"
    assert main(["synth", "-o", str(src), "--embed-labels", "--samples", "1500", "--families", "5",
                 "--tail-families", "0", "--seed", "5"]) == 0
    lines = src.read_text().splitlines()
    malware = [line for line in lines if json.loads(line)["label"] == 1]
    mal = tmp_path / "mal.jsonl"
    mal.write_text("\n".join(malware) + "\n")
    out = tmp_path / "e.csv"
    assert main(["embed", str(work / "m.plne"), str(mal), "-o", str(out)]) == EXIT_OK
    rows = [r.split(",") for r in out.read_text().splitlines()[1:]]
    xyz = np.array([[float(v) for v in r[1:4]] for r in rows])
    labels = [r[4] for r in rows]
    assert len(set(labels)) == 5
    assert silhouette_score(xyz, labels) > 0.5


def test_embed_too_few_records(work, tmp_path):
    p = tmp_path / "one.jsonl"
    p.write_text((work / "c.jsonl").read_text().splitlines()[0] + "\n")
    assert main(["embed", str(work / "m.plne"), str(p), "-o", str(tmp_path / "e.csv")]) == EXIT_NO_OUTPUT


def test_manifest(capsys, work):
    assert main(["manifest"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "index,name" and len(lines) == FeatureLayout.build().total_length + 1
    assert main(["manifest", "--model", str(work / "m.plne")]) == EXIT_OK


# -- usage ------------------------------------------------------------------------

def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as err:
        main(["eval", "m"])
    assert err.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as err:
        main(["--version"])
    assert err.value.code == 0
    assert cli.FORMATS_HELP
