"""Command-line front end: search, benchmark-reference, evaluate, export-plots.

Every command writes into ``--out-dir`` and leaves a ``manifest.json`` that
lists its artifacts.  CSV files have fixed headers and are replaced
atomically.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from mgevo.evolution import (BenchmarkRow, SearchConfig, final_evaluation, non_dominated_sort,
                             rank_by_product, run_search)
from mgevo.grammar import ComponentMenu, dumps, loads, make_grammar, translate
from mgevo.numerics import BENCHMARK_CAP, solve_instance
from mgevo.problem import build_instance
from mgevo.semantics import (build_reference_cycle, evaluate_semantics, render_structure,
                             structure)

log = logging.getLogger("mgevo")

CYCLES = ("V", "F", "W")
SMOOTHING = ((0, 1), (1, 1), (2, 1), (2, 2), (3, 3))
# relaxation factors tuned for the reference cycles (k = 320)
REFERENCE_OMEGA = {
    ("V", 0, 1): 1.25, ("V", 1, 1): 0.6, ("V", 2, 1): 0.6, ("V", 2, 2): 0.5, ("V", 3, 3): 0.4,
    ("F", 0, 1): 1.15, ("F", 1, 1): 0.75, ("F", 2, 1): 0.55, ("F", 2, 2): 0.65, ("F", 3, 3): 0.45,
    ("W", 0, 1): 0.75, ("W", 1, 1): 0.8, ("W", 2, 1): 0.6, ("W", 2, 2): 0.5, ("W", 3, 3): 0.45,
}

FRONT_HEADER = ("rank", "digest", "k", "iterations", "cost_per_iteration", "cost_unit", "product")
LONG_HEADER = ("name", "k", "iterations", "converged", "cost_per_iteration", "total_cost", "unit")
SWEEP_HEADER = ("cycle", "omega", "iterations", "converged")
SOLVE_COST_HEADER = ("run", "name", "k", "iterations", "total_cost", "cost_per_point", "unit")
SCATTER_HEADER = ("run", "iterations", "cost_per_iteration", "cost_unit", "digest")

WALL_CLOCK_WARNING = "wall-clock timings depend on the machine and load and are not reproducible"


class CliError(Exception):
    """A user-facing failure; reported on stderr with a nonzero exit."""


# -- files ---------------------------------------------------------------------------

def atomic_write(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    seed: Optional[int] = None
    instances: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    notes: list = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        return atomic_write(Path(out_dir) / "manifest.json",
                            json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise CliError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"manifest {path} is not valid JSON: {exc}") from None
        known = {f.name for f in fields(cls)}
        m = cls(**{k: v for k, v in data.items() if k in known})
        base = path.parent
        for name, rel in m.artifacts.items():
            if not (base / rel).exists():
                raise CliError(f"artifact {name!r} listed in {path} is missing: {base / rel}")
        m.artifacts = {name: str(base / rel) for name, rel in m.artifacts.items()}
        return m


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- config --------------------------------------------------------------------------

def parse_config(text: str, source: str = "<config>") -> SearchConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment.  Keys are SearchConfig fields."""
    types = {f.name: f.type for f in fields(SearchConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise CliError(f"{source}:{lineno}: unknown field {key!r} "
                           f"(known: {', '.join(sorted(types))})")
        values[key] = _convert(key, types[key], value, f"{source}:{lineno}")
    try:
        return SearchConfig(**values)
    except ValueError as exc:
        raise CliError(f"{source}: invalid config: {exc}") from None


def _convert(key: str, typ, value: str, where: str):
    typ = str(typ)
    try:
        if "int" in typ:
            if value.lower() == "none" and "Optional" in typ:
                return None
            return int(value)
        if "float" in typ:
            if "/" in value:
                num, den = value.split("/")
                return float(num) / float(den)
            return float(value)
    except ValueError:
        kind = "an integer" if "int" in typ else "a number"
        raise CliError(f"{where}: field {key!r} expects {kind}, got {value!r}") from None
    return value


def format_config(cfg: SearchConfig) -> str:
    return "".join(f"{name} = {getattr(cfg, name)}\n" for name in SearchConfig.field_names())


# -- tables --------------------------------------------------------------------------

def _unit(wall_clock: bool) -> str:
    return "ms" if wall_clock else "wu"


def table_rows(rows: Sequence[BenchmarkRow], ks: Sequence[float], wall_clock: bool,
               extra: Optional[Sequence[Sequence]] = None) -> tuple[list[str], list[list]]:
    """Wide table: iterations per k then total solve cost per k; dashes when not convergent."""
    unit = _unit(wall_clock)
    header = ["name"] + (["omega"] if extra is not None else [])
    header += [f"iterations_k{k:g}" for k in ks] + [f"solve_{unit}_k{k:g}" for k in ks]
    out = []
    for idx, row in enumerate(rows):
        its, cost = [], []
        for k in ks:
            rep = row.reports[k]
            if rep.converged:
                its.append(str(rep.iterations))
                total = (1e3 * rep.wall_time_total) if wall_clock else (
                    rep.iterations * rep.work_units_per_iteration)
                cost.append(f"{total:.6g}")
            else:
                its.append("-")
                cost.append("-")
        out.append([row.name] + (list(extra[idx]) if extra is not None else []) + its + cost)
    return header, out


def long_rows(rows: Sequence[BenchmarkRow], ks: Sequence[float], wall_clock: bool) -> list[list]:
    unit = _unit(wall_clock)
    out = []
    for row in rows:
        for k in ks:
            rep = row.reports[k]
            if wall_clock:
                per = 1e3 * rep.wall_time_per_iteration
                total = 1e3 * rep.wall_time_total
            else:
                per = rep.work_units_per_iteration
                total = rep.iterations * per
            out.append([row.name, f"{k:g}", rep.iterations, int(rep.converged),
                        f"{per:.10g}", f"{total:.10g}", unit])
    return out


def _check_ks(ks: Sequence[float]) -> list[float]:
    out = []
    for k in ks:
        try:
            build_instance(k)
        except ValueError as exc:
            raise CliError(f"wavenumber {k:g} rejected: {exc}") from None
        out.append(float(k))
    return out


# -- commands ------------------------------------------------------------------------

def cmd_search(args) -> RunManifest:
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise CliError(f"cannot read config: {exc}") from None
        cfg = parse_config(text, args.config)
    else:
        cfg = SearchConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.workers = args.workers
    if args.wall_clock:
        cfg.mode = "wall-clock"
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}") from None
    out = Path(args.out_dir)
    manifest = RunManifest("search", config={k: getattr(cfg, k) for k in cfg.field_names()},
                           seed=cfg.seed, started=_now())
    if cfg.mode == "wall-clock":
        manifest.notes.append(WALL_CLOCK_WARNING)
        log.warning(WALL_CLOCK_WARNING)

    def progress(snap):
        conv = sum(snap.convergent)
        log.info("generation %d k=%g convergent=%d/%d", snap.generation, snap.k, conv,
                 len(snap.convergent))

    record = run_search(cfg, progress=progress)
    unit = _unit(cfg.mode == "wall-clock")
    front = rank_by_product(record.front(convergent_only=True))
    rows = []
    for rank, ind in enumerate(front, 1):
        its, cost = ind.fitness
        shown = 1e3 * cost if cfg.mode == "wall-clock" else cost
        rows.append([rank, ind.digest, f"{record.final_k:g}", int(its), f"{shown:.10g}", unit,
                     f"{its * shown:.10g}"])
    atomic_write(out / "front.csv", csv_text(FRONT_HEADER, rows))
    atomic_write(out / "genotypes.txt", "".join(dumps(ind.genotype) + "\n" for ind in front))
    atomic_write(out / "snapshots.jsonl", "".join(s.to_json() + "\n" for s in record.snapshots))
    atomic_write(out / "config.txt", format_config(cfg))
    steps = [json.dumps({"from_k": k0, "to_k": k1, "before": [dumps(t) for t in before],
                         "after": [dumps(t) for t in after]}) + "\n"
             for k0, k1, before, after in record.adaptations]
    atomic_write(out / "adaptations.jsonl", "".join(steps))
    manifest.instances = list(record.instances)
    manifest.artifacts = {"front_csv": "front.csv", "genotypes": "genotypes.txt",
                          "snapshots_jsonl": "snapshots.jsonl", "config": "config.txt",
                          "adaptations_jsonl": "adaptations.jsonl"}
    if args.final_ks:
        ks = _check_ks(args.final_ks)
        bench = final_evaluation(front, ks, repeats=args.repeats, mode=cfg.mode)
        header, table = table_rows(bench, ks, cfg.mode == "wall-clock")
        atomic_write(out / "benchmark.csv", csv_text(header, table))
        atomic_write(out / "benchmark_long.csv",
                     csv_text(LONG_HEADER, long_rows(bench, ks, cfg.mode == "wall-clock")))
        manifest.artifacts.update(benchmark_csv="benchmark.csv",
                                  benchmark_long_csv="benchmark_long.csv")
    manifest.finished = _now()
    manifest.write(out)
    print(f"front: {len(front)} members at k={record.final_k:g}; artifacts in {out}")
    return manifest


def sweep_relaxation(kind: str, nu1: int, nu2: int, k: float, omegas: Sequence[float],
                     cap: int = BENCHMARK_CAP) -> tuple[Optional[float], list[list]]:
    """Iterations for every omega; the best is the convergent minimum (ties: smaller omega)."""
    p = build_instance(k)
    best, best_its, rows = None, None, []
    for w in omegas:
        rep = solve_instance(build_reference_cycle(kind, nu1, nu2, w, l_max=p.l_max), p, cap=cap)
        rows.append([f"{kind}({nu1},{nu2})", f"{w:g}", rep.iterations, int(rep.converged)])
        if rep.converged and (best_its is None or rep.iterations < best_its):
            best, best_its = w, rep.iterations
    return best, rows


def benchmark_reference(ks: Sequence[float], omega: Optional[dict] = None,
                        mode: str = "work-units", repeats: int = 1,
                        cap: int = BENCHMARK_CAP) -> list[tuple[BenchmarkRow, float]]:
    """Solve every reference cycle on every k; returns ``(row, omega)`` pairs in table order."""
    omega = dict(REFERENCE_OMEGA, **(omega or {}))
    out = []
    for kind in CYCLES:
        for nu1, nu2 in SMOOTHING:
            w = omega[(kind, nu1, nu2)]
            reports = {}
            for k in ks:
                p = build_instance(k)
                prog = build_reference_cycle(kind, nu1, nu2, w, l_max=p.l_max)
                reports[k] = solve_instance(prog, p, mode=mode, repeats=repeats, cap=cap)
            out.append((BenchmarkRow(f"{kind}({nu1},{nu2})", reports), w))
    return out


def cmd_benchmark_reference(args) -> RunManifest:
    ks = _check_ks(args.ks)
    mode = "wall-clock" if args.wall_clock else "work-units"
    out = Path(args.out_dir)
    manifest = RunManifest("benchmark-reference", config={"ks": ks, "mode": mode,
                                                          "repeats": args.repeats},
                           seed=args.seed, instances=ks, started=_now())
    if args.wall_clock:
        manifest.notes.append(WALL_CLOCK_WARNING)
        log.warning(WALL_CLOCK_WARNING)
    tuned = {}
    if args.sweep:
        sweep_k = _check_ks([args.sweep_k])[0]
        omegas = ComponentMenu().relaxation
        sweep_rows = []
        for kind in CYCLES:
            for nu1, nu2 in SMOOTHING:
                best, rows = sweep_relaxation(kind, nu1, nu2, sweep_k, omegas)
                sweep_rows.extend(rows)
                if best is not None:
                    tuned[(kind, nu1, nu2)] = best
        atomic_write(out / "sweep.csv", csv_text(SWEEP_HEADER, sweep_rows))
        manifest.artifacts["sweep_csv"] = "sweep.csv"
        manifest.config["sweep_k"] = sweep_k
    pairs = benchmark_reference(ks, tuned, mode=mode, repeats=args.repeats)
    rows = [r for r, _ in pairs]
    header, table = table_rows(rows, ks, args.wall_clock, extra=[[f"{w:g}"] for _, w in pairs])
    atomic_write(out / "reference.csv", csv_text(header, table))
    atomic_write(out / "reference_long.csv", csv_text(LONG_HEADER, long_rows(rows, ks, args.wall_clock)))
    manifest.artifacts.update(benchmark_csv="reference.csv", benchmark_long_csv="reference_long.csv")
    manifest.finished = _now()
    manifest.write(out)
    print(csv_text(header, table), end="")
    return manifest


def read_genotypes(path: Path) -> list:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read genotype file: {exc}") from None
    trees = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            trees.append(loads(line))
        except Exception as exc:  # any parse or validation failure is a user error
            raise CliError(f"{path}:{lineno}: malformed genotype: {exc}") from None
    if not trees:
        raise CliError(f"{path}: no genotypes found")
    return trees


def cmd_evaluate(args) -> RunManifest:
    ks = _check_ks(args.ks)
    trees = read_genotypes(args.genotype)[:args.top]
    mode = "wall-clock" if args.wall_clock else "work-units"
    out = Path(args.out_dir)
    manifest = RunManifest("evaluate", config={"genotype": str(args.genotype), "ks": ks,
                                               "mode": mode, "repeats": args.repeats},
                           seed=args.seed, instances=ks, started=_now())
    if args.wall_clock:
        manifest.notes.append(WALL_CLOCK_WARNING)
        log.warning(WALL_CLOCK_WARNING)
    rows, dumps_txt, dumps_json = [], [], []
    for idx, tree in enumerate(trees, 1):
        name = f"EP-{idx}"
        reports = {}
        for k in ks:
            p = build_instance(k, depth=tree.depth)
            t = translate(tree, make_grammar(p, tree.menu))
            reports[k] = solve_instance(t, p, mode=mode, repeats=args.repeats,
                                        cap=BENCHMARK_CAP)
        rows.append(BenchmarkRow(name, reports))
        p0 = build_instance(ks[0], depth=tree.depth)
        prog = evaluate_semantics(translate(tree, make_grammar(p0, tree.menu)), p0.l_max)
        dumps_txt.append(f"# {name}\n{render_structure(prog)}\n")
        dumps_json.append({"name": name, **structure(prog)})
    header, table = table_rows(rows, ks, args.wall_clock)
    atomic_write(out / "evaluation.csv", csv_text(header, table))
    atomic_write(out / "evaluation_long.csv", csv_text(LONG_HEADER, long_rows(rows, ks, args.wall_clock)))
    atomic_write(out / "structure.txt", "\n".join(dumps_txt))
    atomic_write(out / "structure.json", json.dumps(dumps_json, indent=1) + "\n")
    manifest.artifacts = {"benchmark_csv": "evaluation.csv",
                          "benchmark_long_csv": "evaluation_long.csv",
                          "structure_txt": "structure.txt", "structure_json": "structure.json"}
    manifest.finished = _now()
    manifest.write(out)
    print(csv_text(header, table), end="")
    print("".join(dumps_txt), end="")
    return manifest


def cmd_export_plots(args) -> RunManifest:
    manifests = [RunManifest.read(Path(m)) for m in args.manifests]
    solve_rows, points = [], []
    for run, m in enumerate(manifests):
        label = f"run{run}-{m.command}" + (f"-seed{m.seed}" if m.seed is not None else "")
        if "benchmark_long_csv" in m.artifacts:
            for r in read_csv(Path(m.artifacts["benchmark_long_csv"])):
                if r["converged"] != "1":
                    continue
                n = build_instance(float(r["k"])).finest.n
                total = float(r["total_cost"])
                solve_rows.append([label, r["name"], r["k"], r["iterations"], r["total_cost"],
                                   f"{total / (n + 1) ** 2:.10g}", r["unit"]])
        if "front_csv" in m.artifacts:
            for r in read_csv(Path(m.artifacts["front_csv"])):
                points.append((label, float(r["iterations"]), float(r["cost_per_iteration"]),
                               r["cost_unit"], r["digest"]))
    keep = non_dominated_sort([(p[1], p[2]) for p in points])[0] if points else []
    scatter = []
    seen = set()
    for i in keep:
        label, its, cost, unit, digest = points[i]
        if (its, cost, digest) in seen:
            continue
        seen.add((its, cost, digest))
        scatter.append([label, f"{its:g}", f"{cost:.10g}", unit, digest])
    scatter.sort(key=lambda r: (float(r[1]), float(r[2]), r[4], r[0]))
    out = Path(args.out_dir)
    atomic_write(out / "solve_cost.csv", csv_text(SOLVE_COST_HEADER, solve_rows))
    atomic_write(out / "front_scatter.csv", csv_text(SCATTER_HEADER, scatter))
    manifest = RunManifest("export-plots", config={"manifests": [str(m) for m in args.manifests]},
                           started=_now(),
                           artifacts={"solve_cost_csv": "solve_cost.csv",
                                      "front_scatter_csv": "front_scatter.csv"})
    manifest.finished = _now()
    manifest.write(out)
    print(f"wrote {len(solve_rows)} solve-cost rows and {len(scatter)} front points to {out}")
    return manifest


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed override")
    common.add_argument("--workers", type=int, default=1, help="evaluation processes")
    common.add_argument("--wall-clock", action="store_true",
                        help="report measured milliseconds instead of work units")
    common.add_argument("--repeats", type=int, default=1,
                        help="solves averaged per timing in wall-clock mode")
    common.add_argument("--out-dir", default="out", help="directory for artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mgevo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", parents=[common], help="run the evolutionary search")
    p.add_argument("--config", help="flat key = value file with SearchConfig fields")
    p.add_argument("--final-ks", type=float, nargs="*", default=None,
                   help="benchmark the best front members on these wavenumbers")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("benchmark-reference", parents=[common],
                       help="benchmark the V/F/W reference cycles")
    p.add_argument("--ks", type=float, nargs="+", default=[160.0, 320.0])
    p.add_argument("--sweep", action="store_true", help="scan omega for every cycle first")
    p.add_argument("--sweep-k", type=float, default=160.0)
    p.set_defaults(func=cmd_benchmark_reference)

    p = sub.add_parser("evaluate", parents=[common], help="benchmark serialized genotypes")
    p.add_argument("genotype", help="file with one serialized genotype per line")
    p.add_argument("--ks", type=float, nargs="+", required=True)
    p.add_argument("--top", type=int, default=10, help="evaluate at most this many genotypes")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-plots", parents=[common], help="export plot data from manifests")
    p.add_argument("manifests", nargs="+", help="manifest files or run directories")
    p.set_defaults(func=cmd_export_plots)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    if args.repeats < 1:
        parser.error("--repeats must be >= 1")
    try:
        args.func(args)
    except CliError as exc:
        print(f"mgevo {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
