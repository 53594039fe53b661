"""Command-line pipeline: synth, build-vocab, fit-bins, pretrain, embed, probe, evaluate, report.

Every subcommand takes ``--config FILE`` (key=value lines) and repeated
``--set key=value`` overrides, writes its outputs plus ``<out>.manifest.json``
and exits 0, 2 on usage errors, 1 on runtime failures.  Errors are printed
as a single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import scipy

from . import __version__
from . import autodiff as ad
from .discretize import dumps_grids, fit_bins_from_records, loads_grids
from .events import dumps_event_stream, read_events
from .metrics import MetricReport, auroc, dumps_reports, loads_reports, mae, r2, rmse, td_concordance
from .model import PRESETS, BackboneConfig
from .objectives import ObjectiveKind
from .probe import Standardizer, extract_embeddings, fit_discrete_survival, fit_linear, fit_logistic
from .synth import TASK_KINDS, directional_config, dumps_task, generate_cohort, loads_task, task_labels
from .train import PretrainModel, TrainConfig, prepare_records, pretrain
from .vocab import Vocabulary, build_vocabulary, compute_code_stats, read_ontology

EXIT_USAGE = 2
EXIT_RUNTIME = 1


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes"):
        return True
    if low in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_BACKBONE_KEYS = {f.name: (int, getattr(BackboneConfig(), f.name)) for f in fields(BackboneConfig)}

# per subcommand: key -> (parser, default)
CONFIG_KEYS: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "synth": {"seed": (int, 0), "n_patients": (int, 200), "horizon": (float, 7.0),
              "prediction_fraction": (float, 0.5), "cls_code": (str, "DX01"),
              "tte_code": (str, "DX00"), "reg_code": (str, "LAB00")},
    "build-vocab": {"k": (int, 16), "use_ontology": (_bool, False), "numeric_threshold": (float, 0.5)},
    "fit-bins": {"time_bins": (int, 4), "value_bins": (int, 4), "min_count": (int, 50)},
    "pretrain": {"seed": (int, 0), "steps": (int, 300), "lr": (float, 1e-3),
                 "batch_positions": (int, 1024), "preset": (str, "desk"), **_BACKBONE_KEYS},
    "embed": {"batch_size": (int, 64)},
    "probe": {"seed": (int, 0), "train_fraction": (float, 0.5), "l2": (float, 1e-4),
              "time_bins": (int, 8), "max_iter": (int, 500)},
    "evaluate": {"seed": (int, 0), "bootstrap": (int, 200), "name": (str, "")},
    "report": {},
}


def derive_seed(root: int, name: str) -> int:
    """Child seed for a named consumer of randomness."""
    digest = hashlib.sha256(f"{root}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def parse_config_text(text: str) -> dict[str, str]:
    kv = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


def resolve_config(command: str, config_path: str | None, overrides: Sequence[str]
                   ) -> tuple[dict[str, Any], set[str]]:
    """Typed config with defaults filled in, plus the keys given explicitly."""
    raw: dict[str, str] = {}
    if config_path:
        p = Path(config_path)
        if not p.is_file():
            raise UsageError(f"config file not found: {config_path}")
        raw.update(parse_config_text(p.read_text(encoding="utf-8")))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    spec = CONFIG_KEYS[command]
    unknown = sorted(set(raw) - set(spec))
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    out = {}
    for key, (parse, default) in spec.items():
        try:
            out[key] = parse(raw[key]) if key in raw else default
        except ValueError as err:
            raise UsageError(f"config key {key}: {err}") from None
    return out, set(raw)


class Run:
    """Tracks inputs and outputs of one subcommand for its manifest."""

    def __init__(self, command: str, config: dict[str, Any], out: Path, explicit: set[str] = frozenset()):
        self.command = command
        self.config = config
        self.explicit = set(explicit)
        self.out = out
        self.inputs: dict[str, Path] = {}
        self.outputs: list[Path] = []

    def input(self, role: str, path: str | None, required: bool = True) -> Path | None:
        if path is None:
            if required:
                raise UsageError(f"{self.command}: missing --{role}")
            return None
        p = Path(path)
        if not p.exists():
            raise UsageError(f"{self.command}: input not found: {path}")
        self.inputs[role] = p
        return p

    def write_text(self, path: Path, text: str) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.outputs.append(path)

    def add_output(self, path: Path) -> None:
        self.outputs.append(path)

    def manifest(self) -> dict[str, Any]:
        base = self.out.parent if not self.out.is_dir() else self.out
        cfg_json = json.dumps(self.config, sort_keys=True)
        return {
            "command": self.command,
            "config": self.config,
            "config_hash": hashlib.sha256(cfg_json.encode()).hexdigest(),
            "seed": self.config.get("seed"),
            "versions": {"ora": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "inputs": {role: {"name": p.name, "path": os.path.relpath(p, base), "sha256": sha256_file(p)}
                       for role, p in sorted(self.inputs.items())},
            "outputs": {p.name: sha256_file(p) for p in sorted(self.outputs)},
        }

    def finish(self) -> Path:
        if self.out.is_dir():
            path = self.out / f"{self.command}.manifest.json"
        else:
            path = self.out.with_name(self.out.name + ".manifest.json")
        path.write_text(json.dumps(self.manifest(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(run: Run, args) -> None:
    c = run.config
    gen = directional_config(seed=derive_seed(c["seed"], "synth"), n_patients=c["n_patients"])
    records, truth = generate_cohort(gen)
    out = run.out
    out.mkdir(parents=True, exist_ok=True)
    run.write_text(out / "events.jsonl", dumps_event_stream(records))
    run.write_text(out / "latent.tsv", truth.dumps_latent())
    run.write_text(out / "parameters.tsv", truth.dumps_parameters())
    codes = {"classification": c["cls_code"], "time_to_event": c["tte_code"], "regression": c["reg_code"]}
    for kind in TASK_KINDS:
        if codes[kind] not in truth.code_names:
            raise UsageError(f"unknown target code {codes[kind]!r}")
        ex = task_labels(records, truth, kind, codes[kind], horizon=c["horizon"],
                         prediction_fraction=c["prediction_fraction"])
        run.write_text(out / f"task_{kind}.tsv", dumps_task(kind, ex))


def cmd_build_vocab(run: Run, args) -> None:
    c = run.config
    records = read_events(run.input("events", args.events))
    onto_path = run.input("ontology", args.ontology, required=False)
    onto = read_ontology(onto_path.read_text(encoding="utf-8")) if onto_path else None
    stats = compute_code_stats(records, onto, c["numeric_threshold"])
    vocab = build_vocabulary(stats, c["k"], c["use_ontology"])
    run.write_text(run.out, vocab.dumps())


def _load_vocab(run: Run, args) -> Vocabulary:
    return Vocabulary.loads(run.input("vocab", args.vocab).read_text(encoding="utf-8"))


def cmd_fit_bins(run: Run, args) -> None:
    c = run.config
    records = read_events(run.input("events", args.events))
    vocab = _load_vocab(run, args)
    grids = fit_bins_from_records(records, vocab, c["time_bins"], c["value_bins"], c["min_count"])
    run.write_text(run.out, dumps_grids(grids))


def _backbone_config(c: Mapping[str, Any], explicit: set[str], grids) -> BackboneConfig:
    if c["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {c['preset']!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[c["preset"]]
    overrides = {k: c[k] for k in _BACKBONE_KEYS if k in explicit}
    any_grid = next(iter(grids.values()))
    for key, have in (("time_bins", any_grid.T), ("value_bins", any_grid.V)):
        if key in overrides and overrides[key] != have:
            raise UsageError(f"{key}={overrides[key]} disagrees with the grid file ({have})")
        overrides[key] = have
    try:
        return BackboneConfig(**{**{f.name: getattr(base, f.name) for f in fields(base)}, **overrides})
    except ValueError as err:
        raise UsageError(str(err)) from None


def cmd_pretrain(run: Run, args) -> None:
    c = run.config
    if args.objective is None:
        raise UsageError("pretrain: missing --objective")
    records = read_events(run.input("events", args.events))
    vocab = _load_vocab(run, args)
    grids = loads_grids(run.input("grids", args.grids).read_text(encoding="utf-8"))
    bc = _backbone_config(c, run.explicit, grids)
    run.config = {**c, **{f.name: getattr(bc, f.name) for f in fields(bc)}, "objective": args.objective}
    model = PretrainModel(bc, vocab, grids, args.objective, seed=derive_seed(c["seed"], "init"))
    prepared = prepare_records(records, vocab, grids, bc.context_length)
    lines: list[str] = []
    pretrain(model, prepared, TrainConfig(c["steps"], c["lr"], c["batch_positions"], derive_seed(c["seed"], "batches")),
             on_step=lambda step, lb: lines.append(lb.log_line(step, args.objective)))
    run.out.parent.mkdir(parents=True, exist_ok=True)
    model.save(run.out)
    run.add_output(run.out)
    run.write_text(run.out.with_name(run.out.name + ".cfg"), bc.dumps() + f"objective={args.objective}\n")
    run.write_text(run.out.with_name(run.out.name + ".log"), "".join(line + "\n" for line in lines))


def load_pretrained(checkpoint: Path, vocab: Vocabulary, grids) -> PretrainModel:
    cfg_path = checkpoint.with_name(checkpoint.name + ".cfg")
    if not cfg_path.is_file():
        raise UsageError(f"checkpoint config not found: {cfg_path}")
    kv = parse_config_text(cfg_path.read_text(encoding="utf-8"))
    objective = kv.pop("objective")
    model = PretrainModel(BackboneConfig.from_mapping(kv), vocab, grids, objective)
    model.load_params(ad.read_checkpoint(checkpoint))
    return model


def dumps_features(examples, X: np.ndarray) -> str:
    lines = [f"#features d={X.shape[1]}\n"]
    for ex, row in zip(examples, X):
        lines.append(f"{ex.patient_id}\t{ex.prediction_time!r}\t{','.join(repr(float(x)) for x in row)}\n")
    return "".join(lines)


def loads_features(text: str) -> tuple[list[str], np.ndarray]:
    pids, rows = [], []
    for line in text.splitlines():
        if line and not line.startswith("#"):
            pid, _, vec = line.split("\t")
            pids.append(pid)
            rows.append([float(x) for x in vec.split(",")])
    return pids, np.array(rows, dtype=np.float64)


def cmd_embed(run: Run, args) -> None:
    records = {r.patient_id: r for r in read_events(run.input("events", args.events))}
    vocab = _load_vocab(run, args)
    grids = loads_grids(run.input("grids", args.grids).read_text(encoding="utf-8"))
    ckpt = run.input("checkpoint", args.checkpoint)
    run.input("checkpoint_config", str(ckpt) + ".cfg")
    model = load_pretrained(ckpt, vocab, grids)
    _, examples = loads_task(run.input("task", args.task).read_text(encoding="utf-8"))
    missing = [e.patient_id for e in examples if e.patient_id not in records]
    if missing:
        raise UsageError(f"task patients absent from the event file: {missing[:3]}")
    X = extract_embeddings(model.backbone, [records[e.patient_id] for e in examples],
                           [e.prediction_time for e in examples], run.config["batch_size"])
    run.write_text(run.out, dumps_features(examples, X))


def _fmt_floats(xs) -> str:
    return ",".join(repr(float(x)) for x in xs)


def cmd_probe(run: Run, args) -> None:
    c = run.config
    kind, examples = loads_task(run.input("task", args.task).read_text(encoding="utf-8"))
    pids, X = loads_features(run.input("features", args.features).read_text(encoding="utf-8"))
    if pids != [e.patient_id for e in examples]:
        raise UsageError("feature rows do not match the task file")
    rng = np.random.default_rng(derive_seed(c["seed"], "probe-split"))
    n_train = int(round(c["train_fraction"] * len(examples)))
    if not 0 < n_train < len(examples):
        raise UsageError("train_fraction leaves an empty train or test split")
    train = np.zeros(len(examples), dtype=bool)
    train[rng.permutation(len(examples))[:n_train]] = True
    scale = Standardizer.fit(X[train])
    X_tr, X_te = scale(X[train]), scale(X[~train])
    y = np.array([e.label for e in examples])
    header = [f"#task={kind}\n"]
    if kind == "regression":
        rows = [repr(float(v)) for v in fit_linear(X_tr, y[train, 0], c["l2"]).predict(X_te)]
    elif kind == "classification":
        model = fit_logistic(X_tr, y[train, 0], c["l2"])
        rows = [repr(float(v)) for v in model.predict_proba(X_te)]
    else:
        head = fit_discrete_survival(X_tr, y[train, 0], y[train, 1], c["time_bins"], c["l2"], c["max_iter"])
        header.append(f"#edges={_fmt_floats(head.edges)}\n")
        rows = [_fmt_floats(s) for s in head.survival(X_te)]
    test_ids = [e.patient_id for e, t in zip(examples, train) if not t]
    run.write_text(run.out, "".join(header) + "".join(f"{p}\t{r}\n" for p, r in zip(test_ids, rows)))


def loads_predictions(text: str) -> tuple[str, tuple[float, ...], dict[str, list[float]]]:
    kind, edges, preds = "", (), {}
    for line in text.splitlines():
        if line.startswith("#task="):
            kind = line[len("#task="):]
        elif line.startswith("#edges="):
            body = line[len("#edges="):]
            edges = tuple(float(x) for x in body.split(",")) if body else ()
        elif line:
            pid, vals = line.split("\t")
            preds[pid] = [float(x) for x in vals.split(",")]
    return kind, edges, preds


def evaluate_predictions(kind: str, examples, edges, preds, B: int, seed: int) -> list[MetricReport]:
    by_pid = {e.patient_id: e for e in examples}
    unknown = [p for p in preds if p not in by_pid]
    if unknown:
        raise UsageError(f"predictions for patients absent from the task file: {unknown[:3]}")
    ids = list(preds)
    labels = np.array([by_pid[p].label for p in ids])
    P = np.array([preds[p] for p in ids])
    if kind == "regression":
        return [r2(P[:, 0], labels[:, 0], B, seed), rmse(P[:, 0], labels[:, 0], B, seed),
                mae(P[:, 0], labels[:, 0], B, seed)]
    if kind == "classification":
        return [auroc(P[:, 0], labels[:, 0], B, seed)]
    return [td_concordance(P, labels[:, 0], labels[:, 1].astype(bool), edges, B, seed)]


def cmd_evaluate(run: Run, args) -> None:
    c = run.config
    kind, examples = loads_task(run.input("task", args.task).read_text(encoding="utf-8"))
    pkind, edges, preds = loads_predictions(run.input("predictions", args.predictions).read_text(encoding="utf-8"))
    if pkind and pkind != kind:
        raise UsageError(f"predictions are for task {pkind!r}, task file is {kind!r}")
    reports = evaluate_predictions(kind, examples, edges, preds, c["bootstrap"], derive_seed(c["seed"], "bootstrap"))
    run.write_text(run.out, dumps_reports(c["name"] or kind, reports))


LOWER_IS_BETTER = {"rmse", "mae"}


def relative_improvement(base: float, value: float, metric: str = "") -> float:
    """Percent improvement of ``value`` over ``base``; positive means better."""
    if base == 0:
        return float("nan")
    diff = base - value if metric in LOWER_IS_BETTER else value - base
    return 100.0 * diff / abs(base)


def compare_report(reports: Mapping[str, Sequence[tuple[str, MetricReport]]]) -> str:
    """Per (task, metric): each objective's estimate and its gain over NTP."""
    if "ntp" not in reports:
        raise UsageError("report needs the ntp metrics file as the baseline")
    others = [o for o in ("tpp", "ora") if o in reports]
    tables = {o: {(t, r.name): r for t, r in reps} for o, reps in reports.items()}
    keys = list(tables["ntp"])
    for o in others:
        if set(tables[o]) != set(keys):
            raise UsageError(f"task/metric mismatch between ntp and {o}")
    head = ["task", "metric", "ntp"] + others + [f"{o}_vs_ntp_pct" for o in others]
    lines = ["\t".join(head) + "\n"]
    for key in keys:
        base = tables["ntp"][key].estimate
        vals = [tables[o][key].estimate for o in others]
        gains = [relative_improvement(base, v, key[1]) for v in vals]
        cells = [key[0], key[1], f"{base:.4f}"] + [f"{v:.4f}" for v in vals] + [f"{g:+.2f}" for g in gains]
        lines.append("\t".join(cells) + "\n")
    return "".join(lines)


def cmd_report(run: Run, args) -> None:
    reports = {}
    for obj in ("ntp", "tpp", "ora"):
        path = run.input(obj, getattr(args, obj), required=obj == "ntp")
        if path is not None:
            reports[obj] = loads_reports(path.read_text(encoding="utf-8"))
    run.write_text(run.out, compare_report(reports))


COMMANDS: dict[str, tuple[Callable[[Run, argparse.Namespace], None], tuple[str, ...]]] = {
    "synth": (cmd_synth, ()),
    "build-vocab": (cmd_build_vocab, ("events", "ontology")),
    "fit-bins": (cmd_fit_bins, ("events", "vocab")),
    "pretrain": (cmd_pretrain, ("events", "vocab", "grids", "objective")),
    "embed": (cmd_embed, ("events", "vocab", "grids", "checkpoint", "task")),
    "probe": (cmd_probe, ("task", "features")),
    "evaluate": (cmd_evaluate, ("task", "predictions")),
    "report": (cmd_report, ("ntp", "tpp", "ora")),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, flags) in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="output file (directory for synth)")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        for flag in flags:
            if flag == "objective":
                p.add_argument("--objective", choices=[k.value for k in ObjectiveKind])
            else:
                p.add_argument(f"--{flag}")
    p = sub.add_parser("rerun", help="repeat the run recorded in a manifest")
    p.add_argument("manifest")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        if args.command == "rerun":
            return run(rerun_argv(args.manifest))
        fn, _ = COMMANDS[args.command]
        config, explicit = resolve_config(args.command, args.config, args.set)
        r = Run(args.command, config, Path(args.out), explicit)
        fn(r, args)
        r.finish()
        return 0
    except UsageError as err:
        _report_error("usage", str(err))
        return EXIT_USAGE
    except Exception as err:  # noqa: BLE001 -- surface any failure as one line
        _report_error("runtime", f"{type(err).__name__}: {err}")
        return EXIT_RUNTIME


def _report_error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message.splitlines()[0] if message else ""}), file=sys.stderr)


def rerun_argv(manifest_path) -> list[str]:
    """Arguments repeating the run a manifest describes; inputs resolve relative to it."""
    path = Path(manifest_path)
    if not path.is_file():
        raise UsageError(f"manifest not found: {manifest_path}")
    m = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent
    cmd = m["command"]
    out = base if cmd == "synth" else base / path.name[: -len(".manifest.json")]
    argv = [cmd, "--out", str(out)]
    cfg = dict(m["config"])
    objective = cfg.pop("objective", None)
    if objective:
        argv += ["--objective", objective]
    for role, info in m["inputs"].items():
        if role != "checkpoint_config":
            argv += [f"--{role}", str(base / info["path"])]
    for k, v in cfg.items():
        argv += ["--set", f"{k}={v}"]
    return argv


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
