"""Command-line interface.

Exit codes: 0 success, 64 usage error, 2 nothing written, 3 training
degeneracy (a stage without enough samples or classes), 4 layout mismatch,
1 anything else. Data goes to stdout or the named output file; diagnostics
go to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import __version__, config as config_mod
from . import dataset, interpret, pipeline, synth
from .dataset import NoFamilies
from .gbdt import MODEL_FORMAT_VERSION, DegenerateLabels
from .metrics import confusion, write_report_csv
from .pe_parser import NotPE, extract_record, parse_pe
from .pipeline import PIPELINE_FORMAT_VERSION, TrainingError
from .record import RawFeatureRecord
from .vectorizer import FVEC_VERSION, LAYOUT_VERSION, FeatureLayout, LayoutMismatch, layout_manifest, read_fvec
from .vectorizer import vectorize

log = logging.getLogger("malpipe")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_NO_OUTPUT = 2
EXIT_TRAINING = 3
EXIT_LAYOUT = 4
EXIT_USAGE = 64

FORMATS_HELP = f"""\
file formats:
  records     JSONL, one raw feature record per line (EMBER field names;
              "section"/"avclass" spellings accepted on input)
  sidecar     TSV: sha256, threat type, family, behavior; '#' comments
  features    FVEC v{FVEC_VERSION}: b"FVEC", <u32 version, u64 rows, u64 cols>,
              row-major little-endian float32
  model       PLNE v{PIPELINE_FORMAT_VERSION}: b"PLNE", <u32 version, u32 layout version>,
              JSON metadata (layout, manifest, vocabularies, reports), five
              length-prefixed GBDT v{MODEL_FORMAT_VERSION} blobs
  layout      version {LAYOUT_VERSION}; `malpipe manifest` lists every index
  verdicts    JSONL: sha256, stages, quarantined, final
  config      TOML: [split] [family] [pipeline] [stage.<name>] [grid] [paths]

exit codes: 0 ok, 64 usage, 2 no output, 3 training degeneracy,
            4 layout mismatch, 1 other
"""


class UsageError(Exception):
    pass


class NoOutput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@contextmanager
def _output(path: Optional[str]) -> Iterator:
    if path is None or path == "-":
        yield sys.stdout
        sys.stdout.flush()
    else:
        with open(path, "w", encoding="utf-8") as fh:
            yield fh


# -- input helpers -------------------------------------------------------------

def _sniff(path: str) -> str:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head[:2] == b"MZ":
        return "pe"
    if head == b"FVEC":
        return "fvec"
    return "jsonl"


def _read_records(path: str) -> list[RawFeatureRecord]:
    stream = dataset.read_jsonl(path)
    records = list(stream)
    if stream.skipped:
        log.warning("%s: %d malformed line(s) skipped", path, stream.skipped)
    return records


def _pe_record(path: str, label: int = -1) -> RawFeatureRecord:
    data = Path(path).read_bytes()
    rec = extract_record(parse_pe(data), data)
    rec.label = label
    return rec


def _labeled(jsonl: str, sidecar: Optional[str]) -> list[dataset.LabeledSample]:
    rows = dataset.read_sidecar(sidecar) if sidecar else None
    stats = dataset.AttachStats()
    samples = list(dataset.attach_taxonomy(_read_records(jsonl), rows, stats))
    if stats.dropped_unlabeled:
        log.info("%d unlabeled record(s) dropped", stats.dropped_unlabeled)
    if stats.missing_taxonomy:
        log.info("%d malicious record(s) without taxonomy", stats.missing_taxonomy)
    return samples


# -- commands ------------------------------------------------------------------

def cmd_extract(args) -> int:
    if not args.files:
        raise UsageError("extract needs at least one PE file")
    written = 0
    with _output(args.output) as out:
        for path in args.files:
            try:
                rec = _pe_record(path, args.label)
            except NotPE as exc:
                print(f"{path}: not a PE file ({exc})", file=sys.stderr)
                continue
            except OSError as exc:
                print(f"{path}: {exc.strerror or exc}", file=sys.stderr)
                continue
            out.write(rec.to_json() + "\n")
            written += 1
    if not written:
        raise NoOutput("no file could be parsed")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed,
        "validation_fraction": args.validation_fraction,
        "family_top_k": args.family_top_k,
        "min_stage_samples": args.min_stage_samples,
        "iterations": args.iterations,
        "learning_rate": args.learning_rate,
        "max_leaves": args.max_leaves,
        "min_samples_leaf": args.min_samples_leaf,
        "early_stopping_rounds": args.early_stopping_rounds,
    }
    cfg = config_mod.load(args.config, overrides)
    jsonl = args.jsonl or cfg.paths.get("jsonl")
    model_path = args.output or cfg.paths.get("model")
    if not jsonl or not model_path:
        raise UsageError("train needs a records file and an output model path (arguments or [paths])")
    sidecar = args.sidecar or cfg.paths.get("sidecar")
    if not args.grid:
        cfg.pipeline.grid = {}
    samples = _labeled(jsonl, sidecar)
    model = pipeline.train_pipeline(samples, cfg.pipeline)
    pipeline.save_pipeline(model, model_path)
    report_path = args.report or cfg.paths.get("report") or f"{model_path}.report.csv"
    write_report_csv(pipeline.stage_reports(model), report_path)
    for note in model.metadata.get("notes", []):
        print(f"note: {note}", file=sys.stderr)
    print(f"model written to {model_path}; report in {report_path}", file=sys.stderr)
    return EXIT_OK


def _classify_inputs(model: pipeline.PipelineModel, paths: list[str], fmt: str):
    """Yield (sha256s, matrix, truth) per input file, in input order."""
    for path in paths:
        kind = _sniff(path) if fmt == "auto" else fmt
        if kind == "fvec":
            X = read_fvec(path)
            yield [f"{Path(path).name}:{i}" for i in range(len(X))], X, {}
        elif kind == "pe":
            try:
                rec = _pe_record(path)
            except NotPE as exc:
                print(f"{path}: not a PE file ({exc})", file=sys.stderr)
                continue
            yield [rec.sha256], vectorize(rec, model.layout).values[None, :], {}
        else:
            records = _read_records(path)
            X = np.zeros((len(records), model.layout.total_length))
            for i, rec in enumerate(records):
                X[i] = vectorize(rec, model.layout).values
            truth = {r.sha256: r.label for r in records if r.label in (0, 1)}
            yield [r.sha256 for r in records], X, truth


def cmd_classify(args) -> int:
    model = pipeline.load_pipeline(args.model)
    verdicts, truth = [], {}
    with _output(args.output) as out:
        for shas, X, t in _classify_inputs(model, args.inputs, args.format):
            batch = pipeline.classify_many(model, X, shas)
            for v in batch:
                out.write(v.to_json() + "\n")
            verdicts += batch
            truth.update(t)
        if args.quarantine_report:
            if not truth:
                print("quarantine report needs labeled JSONL input; none found", file=sys.stderr)
            else:
                known = [v for v in verdicts if v.sha256 in truth]
                report = pipeline.quarantine_report(known, truth)
                out.write(json.dumps({"quarantine_report": report}, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = pipeline.load_pipeline(args.model)
    samples = _labeled(args.jsonl, args.sidecar)
    if not samples:
        raise NoOutput("no labeled records to evaluate")
    reports, pairs, verdicts = pipeline.evaluate(model, samples)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(reports, out / "report.csv")
    for stage, (pred, truth) in pairs.items():
        vocab = pipeline.BINARY_VOCAB if stage in (pipeline.DETECTION, pipeline.QUARANTINE) else model.vocabularies[stage]
        cm = confusion(pred, truth, vocab)
        cm.write_csv(out / f"confusion_{stage}.csv")
        cm.write_csv(out / f"confusion_{stage}_normalized.csv", normalized=True)
    truth_map = {s.sha256: s.labels.malware for s in samples}
    q = pipeline.quarantine_report(verdicts, truth_map)
    (out / "quarantine.json").write_text(json.dumps(q, sort_keys=True, indent=2) + "\n")
    print(f"evaluation written to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_importance(args) -> int:
    model = pipeline.load_pipeline(args.model)
    tables = interpret.importance_tables(model, level=args.level)
    with _output(args.output) as out:
        out.write(interpret.format_tables(tables, args.top))
    if args.csv:
        interpret.write_tables_csv(tables, args.csv, args.top)
    return EXIT_OK


def _embed_label(rec: RawFeatureRecord, rows: Optional[dict], field: str) -> str:
    if field == "malware":
        return {0: "benign", 1: "malicious"}.get(rec.label, "unlabeled")
    if rec.label == 0:
        return "benign"
    if rows is not None:
        tt, fam, beh = rows.get(rec.sha256, ("", "", ""))
        value = {"threat_type": tt, "family": fam, "behavior": beh}[field]
    else:
        value = {"threat_type": rec.threat_type, "family": rec.avclass_family, "behavior": rec.behavior}[field]
    return value or "unknown"


def cmd_embed(args) -> int:
    model = pipeline.load_pipeline(args.model)
    records = _read_records(args.jsonl)
    if len(records) < args.components:
        raise NoOutput(f"need at least {args.components} records to embed")
    rows = dataset.read_sidecar(args.sidecar) if args.sidecar else None
    X = np.vstack([vectorize(r, model.layout).values for r in records])
    result = interpret.embed(X, args.components, seed=args.seed)
    labels = [_embed_label(r, rows, args.label_field) for r in records]
    interpret.embedding_export(result, [r.sha256 for r in records], labels, args.output)
    ev = ", ".join(f"{v:.6g}" for v in result.explained_variance)
    print(f"explained variance: {ev} of {result.total_variance:.6g}", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = synth.SynthConfig(samples=args.samples, seed=args.seed, families=args.families,
                            tail_families=args.tail_families)
    corpus = synth.generate(cfg)
    records = corpus.embedded() if args.embed_labels else corpus.records
    dataset.write_jsonl(records, args.output)
    if args.sidecar:
        dataset.write_sidecar(corpus.taxonomy, args.sidecar)
    return EXIT_OK


def cmd_manifest(args) -> int:
    if args.model:
        layout = pipeline.load_pipeline(args.model).layout
    else:
        layout = FeatureLayout.build()
    with _output(args.output) as out:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["index", "name"])
        w.writerows(layout_manifest(layout))
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="malpipe", description="Static PE analysis and hierarchical malware classification.",
                epilog=FORMATS_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more diagnostics on stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("extract", help="PE files -> raw feature records (JSONL)")
    s.add_argument("files", nargs="*")
    s.add_argument("-o", "--output", help="output JSONL (default stdout)")
    s.add_argument("--label", type=int, choices=(-1, 0, 1), default=-1, help="label stored in every record")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train the pipeline and write a validation report")
    s.add_argument("jsonl", nargs="?", help="labeled records")
    s.add_argument("--sidecar", help="taxonomy TSV; without it, labels embedded in the records are used")
    s.add_argument("--config", help="TOML configuration")
    s.add_argument("-o", "--output", help="model file")
    s.add_argument("--report", help="report CSV (default <model>.report.csv)")
    s.add_argument("--grid", action="store_true", help="grid-search parameters listed under [grid]")
    s.add_argument("--seed", type=int)
    s.add_argument("--validation-fraction", type=float)
    s.add_argument("--family-top-k", type=int)
    s.add_argument("--min-stage-samples", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--max-leaves", type=int)
    s.add_argument("--min-samples-leaf", type=int)
    s.add_argument("--early-stopping-rounds", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("classify", help="verdicts for PE, JSONL or FVEC inputs")
    s.add_argument("model")
    s.add_argument("inputs", nargs="*")
    s.add_argument("--format", choices=("auto", "pe", "jsonl", "fvec"), default="auto")
    s.add_argument("-o", "--output", help="verdict JSONL (default stdout)")
    s.add_argument("--quarantine-report", action="store_true",
                   help="append quarantine counters, using labels found in JSONL inputs")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("eval", help="test-phase report and confusion matrices")
    s.add_argument("model")
    s.add_argument("jsonl")
    s.add_argument("--sidecar")
    s.add_argument("-o", "--out-dir", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("importance", help="top feature blocks per stage")
    s.add_argument("model")
    s.add_argument("--level", choices=(interpret.BLOCK, interpret.GROUP), default=interpret.BLOCK)
    s.add_argument("--top", type=int, default=interpret.TOP_BLOCKS)
    s.add_argument("--csv", help="also write the tables as CSV")
    s.add_argument("-o", "--output", help="text tables (default stdout)")
    s.set_defaults(func=cmd_importance)

    s = sub.add_parser("embed", help="3-D principal-component embedding CSV")
    s.add_argument("model", help="model whose layout vectorizes the records")
    s.add_argument("jsonl")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--sidecar")
    s.add_argument("--label-field", choices=("family", "threat_type", "behavior", "malware"), default="family")
    s.add_argument("--components", type=int, default=3, choices=(1, 2, 3))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("synth", help="write a synthetic labeled corpus")
    s.add_argument("-o", "--output", required=True, help="records JSONL")
    s.add_argument("--sidecar", help="taxonomy TSV")
    s.add_argument("--embed-labels", action="store_true", help="store taxonomy inside the records")
    s.add_argument("--samples", type=int, default=20000)
    s.add_argument("--families", type=int, default=len(synth.FAMILIES))
    s.add_argument("--tail-families", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("manifest", help="index -> feature name CSV")
    s.add_argument("--model", help="use this model's layout (default: empty import vocabulary)")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_manifest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"malpipe {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except config_mod.ConfigError as exc:
        print(f"malpipe {args.command}: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NoOutput as exc:
        print(f"malpipe {args.command}: {exc}", file=sys.stderr)
        return EXIT_NO_OUTPUT
    except (TrainingError, DegenerateLabels, NoFamilies) as exc:
        print(f"malpipe {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except LayoutMismatch as exc:
        print(f"malpipe {args.command}: layout mismatch: {exc}", file=sys.stderr)
        return EXIT_LAYOUT
    except (OSError, ValueError) as exc:
        print(f"malpipe {args.command}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
