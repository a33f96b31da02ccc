"""
Batch driver.

Every subcommand reads its settings from flags and/or one JSON config file
(flags win), writes JSON-lines records to ``<output>.jsonl`` with a single
header line holding the timestamp, and a summary table to ``<output>.csv``.
Without ``--output`` the JSON-lines go to stdout.

Exit status: 0 when every check passes, 2 when a bound is violated, 3 on
malformed input.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import SUITES, sweep
from .exceptions import ExtractionError, InputError
from .fidelity import MinimizerConfig, Subspace, min_subspace_fidelity
from .protocols import (Protocol, extract_isometric_encodings, flatten_one_way, rates, run_protocol,
                        strip_encodings, _sent_states)
from .sources import IIDSource, qaep_mass_curve
from .tensor_core import DensityOperator, PureState

EXIT_OK, EXIT_VIOLATION, EXIT_INPUT = 0, 2, 3
COMMANDS = ("verify-lemmas", "fidelity", "protocol-run", "transform", "typical")
RANDOMIZED = {"verify-lemmas"}


@dataclass
class RunConfig:
    command: str
    seed: int | None = None
    instances: int = 1000
    suites: list = field(default_factory=lambda: list(SUITES))
    protocol: str | None = None
    inputs: str | None = None
    output: str | None = None
    kind: str | None = None
    chain: bool = False
    threshold: float | None = None
    subspace_min: bool = False
    base: list | None = None
    epsilon: float = 0.1
    n_list: list = field(default_factory=lambda: list(range(1, 101)))
    deltas: list = field(default_factory=lambda: [0.01])
    restarts: int = 16

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise InputError(f"unknown command {self.command!r}")
        if self.command in RANDOMIZED and self.seed is None:
            raise InputError(f"{self.command} needs --seed")
        if self.seed is not None and not 0 <= int(self.seed) < 2 ** 64:
            raise InputError("seed must fit in 64 bits")
        if self.instances < 1:
            raise InputError("instances must be positive")
        unknown = [s for s in self.suites if s not in SUITES]
        if unknown:
            raise InputError(f"unknown suites {unknown}")
        if self.command in ("fidelity", "protocol-run", "transform") and not (self.protocol and self.inputs):
            raise InputError(f"{self.command} needs --protocol and --inputs")
        if self.command == "transform" and self.kind not in ("extract", "strip", "flatten"):
            raise InputError("transform needs --kind extract|strip|flatten")
        if self.command == "typical" and self.base is None:
            raise InputError("typical needs a base state (--base)")
        if self.epsilon < 0:
            raise InputError("epsilon must be non-negative")


def _parse_n_list(text: str) -> list[int]:
    """``"1:100"``, ``"1:100:5"`` or ``"4,8,16"``."""
    if ":" in text:
        parts = [int(x) for x in text.split(":")]
        start, stop = parts[0], parts[1]
        step = parts[2] if len(parts) > 2 else 1
        return list(range(start, stop + 1, step))
    return [int(x) for x in text.split(",") if x]


class _Parser(argparse.ArgumentParser):
    """Report usage errors as input errors so they map to exit status 3."""

    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="qnetcap", description=__doc__.strip().splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config; flags given on the command line override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--output", help="output prefix for .jsonl and .csv")

    p = sub.add_parser("verify-lemmas", help="seeded sweeps over every inequality suite")
    common(p)
    p.add_argument("--instances", type=int)
    p.add_argument("--suites", help="comma-separated subset of: " + ",".join(SUITES))

    for name, hlp in (("fidelity", "global and per-leg entanglement fidelity of a protocol"),
                      ("protocol-run", "run a protocol and report output, fidelities and rates")):
        p = sub.add_parser(name, help=hlp)
        common(p)
        p.add_argument("--protocol")
        p.add_argument("--inputs")
        p.add_argument("--threshold", type=float, help="exit 2 if the global fidelity is below this")
        if name == "fidelity":
            p.add_argument("--subspace-min", action="store_true",
                           help="also minimize the product pure-state fidelity over full leg spaces")
            p.add_argument("--restarts", type=int)

    p = sub.add_parser("transform", help="extract / strip / flatten a protocol")
    common(p)
    p.add_argument("--kind", choices=["extract", "strip", "flatten"])
    p.add_argument("--protocol")
    p.add_argument("--inputs")
    p.add_argument("--chain", action="store_true", help="flatten: follow with isometric extraction")

    p = sub.add_parser("typical", help="typical-subspace mass curve of an IID source")
    common(p)
    p.add_argument("--base", help='JSON: a list of eigenvalues or a density-operator document')
    p.add_argument("--epsilon", type=float)
    p.add_argument("--n", dest="n_list", help='"start:stop[:step]" or comma list')
    p.add_argument("--delta", dest="deltas", help="comma list of delta values")
    return ap


def config_from_args(argv) -> RunConfig:
    args = build_parser().parse_args(argv)
    values = {}
    if getattr(args, "config", None):
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        values.pop("command", None)
    for key, val in vars(args).items():
        if key in ("config", "command") or val is None or val is False:
            continue
        values[key] = val
    if isinstance(values.get("suites"), str):
        values["suites"] = [s for s in values["suites"].split(",") if s]
    if isinstance(values.get("n_list"), str):
        values["n_list"] = _parse_n_list(values["n_list"])
    if isinstance(values.get("deltas"), str):
        values["deltas"] = [float(x) for x in values["deltas"].split(",")]
    if isinstance(values.get("base"), str):
        try:
            values["base"] = json.loads(values["base"])
        except json.JSONDecodeError:
            values["base"] = json.loads(Path(values["base"]).read_text())
    known = set(RunConfig.__dataclass_fields__)
    extra = set(values) - known
    if extra:
        raise InputError(f"unknown config keys {sorted(extra)}")
    try:
        cfg = RunConfig(command=args.command, **values)
    except TypeError as exc:
        raise InputError(f"bad config: {exc}") from exc
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Loading documents
# ---------------------------------------------------------------------------


def _load_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def load_inputs(path: str) -> list:
    doc = _load_json(path)
    items = doc["inputs"] if isinstance(doc, dict) and "inputs" in doc else doc
    if not isinstance(items, list):
        raise InputError("inputs must be a list of state documents")
    out = []
    try:
        for it in items:
            if "matrix" in it or ("re" in it and np.ndim(it["re"]) == 2):
                out.append(DensityOperator.from_json(it))
            else:
                out.append(PureState.from_json(it))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed state document: {exc}") from exc
    return out


def load_base(doc) -> IIDSource:
    if isinstance(doc, list):
        return IIDSource.from_matrix(np.diag(np.asarray(doc, dtype=float)))
    if isinstance(doc, dict):
        return IIDSource(DensityOperator.from_json(doc))
    raise InputError("base must be a list of eigenvalues or a density-operator document")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_verify(cfg: RunConfig):
    records, rows, status = [], [], EXIT_OK
    for name in cfg.suites:
        summary, reports = sweep(name, cfg.instances, int(cfg.seed), keep_reports=True)
        for i, rep in enumerate(reports):
            rec = {"suite": name, "instance": i, **rep.to_json(with_witness=not rep.passed)}
            records.append(rec)
        rows.append(summary.csv_row())
        if summary.violations:
            status = EXIT_VIOLATION
    return records, ["suite", "instances", "min_margin", "violations", "seconds"], rows, status


def _fidelity_like(cfg: RunConfig, with_output: bool):
    p = Protocol.from_json(_load_json(cfg.protocol))
    inputs = load_inputs(cfg.inputs)
    if not all(isinstance(s, PureState) for s in inputs):
        raise InputError("fidelity commands need purified (pure) leg inputs")
    res = run_protocol(p, inputs)
    rec = {"kind": "fidelity", "regime": p.regime, "structure": p.structure, **res.to_json()}
    if with_output:
        rec["output_state"] = res.output.to_json()
        rec["rates"] = rates(p, _sent_states(inputs), 1).to_json()
    records = [rec]
    rows = [["global", "", f"{res.global_fidelity.value:.12f}"]]
    rows += [["local", i, f"{r.value:.12f}"] for i, r in enumerate(res.local_fidelities)]
    if getattr(cfg, "subspace_min", False) and not with_output:
        dims = [e.in_dim for e in p.encodings]
        mc = MinimizerConfig(restarts=cfg.restarts, seed=int(cfg.seed or 0))
        fs = min_subspace_fidelity([Subspace.full(d) for d in dims], p.end_to_end(), mc)
        records.append({"kind": "subspace-min", **fs.to_json()})
        rows.append(["subspace-min", "", f"{fs.value:.12f}"])
    status = EXIT_OK
    if cfg.threshold is not None and res.global_fidelity.value < cfg.threshold:
        status = EXIT_VIOLATION
    return records, ["quantity", "leg", "value"], rows, status


def _cmd_transform(cfg: RunConfig):
    p = Protocol.from_json(_load_json(cfg.protocol))
    inputs = load_inputs(cfg.inputs)
    prov = {"input_protocol": p.digest(), "seed": cfg.seed, "kind": cfg.kind}
    status = EXIT_OK
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if cfg.kind == "extract":
            try:
                res = extract_isometric_encodings(p, inputs)
            except ExtractionError as exc:
                rec = {"kind": "extract", "error": str(exc), "diagnostics": _jsonable(exc.diagnostics), **prov}
                return [rec], ["quantity", "value"], [["extract", "failed"]], EXIT_VIOLATION
            rec = {"kind": "extract", "fidelity": res.fidelity.value, "eta": res.eta, "bound": res.bound,
                   "protocol": res.protocol.to_json(), "diagnostics": _jsonable(res.diagnostics), **prov}
            rows = [["fidelity", f"{res.fidelity.value:.12f}"], ["bound", f"{res.bound:.12f}"]]
        elif cfg.kind == "strip":
            if not all(isinstance(s, PureState) for s in inputs):
                raise InputError("strip needs purified (pure) leg inputs")
            res = strip_encodings(p, inputs)
            rec = {"kind": "strip", **res.to_json(),
                   "inputs": [s.to_json() for s in res.inputs], **prov}
            rows = [["fidelity_original", f"{res.fidelity_original:.12f}"],
                    ["fidelity_new", f"{res.fidelity_new:.12f}"],
                    ["entropy_pass", res.entropy_report.passed]]
            if not res.entropy_report.passed:
                status = EXIT_VIOLATION
        else:
            res = flatten_one_way(p, inputs, chain=cfg.chain)
            rec = {"kind": "flatten", **res.to_json(), **prov}
            rows = [["branch", res.branch], ["conditional_fidelity", f"{res.fidelity.value:.12f}"],
                    ["ensemble_fidelity", f"{res.ensemble_fidelity:.12f}"]]
            if res.fidelity.value < res.ensemble_fidelity - 1e-12:
                status = EXIT_VIOLATION
    if caught:
        rec["warnings"] = [str(w.message) for w in caught]
    return [rec], ["quantity", "value"], rows, status


def _cmd_typical(cfg: RunConfig):
    src = load_base(cfg.base)
    reps = qaep_mass_curve(src, cfg.epsilon, cfg.n_list, cfg.deltas)
    records = [{"kind": "typical", **r.to_json()} for r in reps]
    rows = [r.csv_row() for r in reps]
    return records, ["n", "epsilon", "typical_dim", "mass"], rows, EXIT_OK


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    return x


def run(cfg: RunConfig, stdout=None) -> int:
    """Execute ``cfg``; write reports; return the exit status."""
    stdout = stdout or sys.stdout
    handlers = {
        "verify-lemmas": _cmd_verify,
        "fidelity": lambda c: _fidelity_like(c, False),
        "protocol-run": lambda c: _fidelity_like(c, True),
        "transform": _cmd_transform,
        "typical": _cmd_typical,
    }
    records, columns, rows, status = handlers[cfg.command](cfg)
    header = {"header": {"command": cfg.command, "seed": cfg.seed, "version": __version__,
                         "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat()}}
    lines = [json.dumps(header)] + [json.dumps(_jsonable(r), sort_keys=True) for r in records]
    if cfg.output:
        out = Path(cfg.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{out}.jsonl").write_text("\n".join(lines) + "\n")
        with open(f"{out}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            w.writerows(rows)
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(columns)
        w.writerows(rows)
        stdout.write(buf.getvalue())
    else:
        stdout.write("\n".join(lines) + "\n")
    return status


def main(argv=None) -> int:
    try:
        cfg = config_from_args(argv)
        return run(cfg)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
