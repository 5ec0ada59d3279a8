"""Command line: phantom, vectors, skeletonize, evaluate and sweep subcommands.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from tubeskel import config as cfgmod
from tubeskel.config import SECTIONS, ConfigError, ExperimentConfig, sub_seed
from tubeskel.evalkit import evaluate
from tubeskel.flowfield import (
    PerturbationSpec,
    generate_vectors,
    perturb_image,
    perturb_vectors,
    threshold_segment,
)
from tubeskel.phantom import generate
from tubeskel.skelgraph import read_swc, write_swc
from tubeskel.teasar import detect_roots, skeletonize
from tubeskel.volgrid import euclidean_distance_transform, read_volume, write_volume

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# short spellings for frequently used keys
ALIASES = {
    "phantom.dims": ["--dims"],
    "vectors.step_size": ["--step-size"],
    "match.strategy": ["--strategy"],
    "match.d_max": ["--d-max"],
    "match.step": ["--step"],
    "sweep.kind": ["--kind"],
    "sweep.levels": ["--levels"],
}
COMMAND_SECTIONS = {
    "phantom": ["phantom"],
    "vectors": ["vectors"],
    "skeletonize": ["penalty", "masking", "roots", "post"],
    "evaluate": ["match"],
    "sweep": list(SECTIONS),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser, sections):
    p.add_argument("--config", metavar="PATH", help="flat 'key = value' file")
    p.add_argument("--seed", dest="seed", metavar="INT")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    for section in sections:
        group = p.add_argument_group(f"{section} parameters")
        for f in fields(SECTIONS[section]):
            key = f"{section}.{f.name}"
            if key == "phantom.seed":
                continue
            flags = [f"--{section}-{f.name.replace('_', '-')}"] + ALIASES.get(key, [])
            group.add_argument(*flags, dest=key, metavar="VALUE", help=f"(default {cfgmod.format_value(f.default)})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tubeskel", description="Vector-guided skeletonization of tubular volumes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic vessel phantom")
    p.add_argument("--out-dir", required=True)
    _add_common(p, COMMAND_SECTIONS["phantom"])

    p = sub.add_parser("vectors", help="ground-truth direction vectors from a mask and graph")
    p.add_argument("--mask", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    _add_common(p, COMMAND_SECTIONS["vectors"])

    p = sub.add_parser("skeletonize", help="trace centre lines through a mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--vectors", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--roots", help="text file, one 'z y x' root per line")
    src.add_argument("--auto-roots", action="store_true", help="detect roots from the vector field")
    p.add_argument("--ablate-angle", action="store_true")
    p.add_argument("--ablate-vmf", action="store_true")
    p.add_argument("--ablate-dbf", action="store_true")
    p.add_argument("--out", required=True)
    _add_common(p, COMMAND_SECTIONS["skeletonize"])

    p = sub.add_parser("evaluate", help="compare a predicted skeleton against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--table", action="store_true", help="also print a human-readable table")
    p.add_argument("--count-unmatched", action="store_true",
                   help="judge every predicted edge, including those with unmatched endpoints")
    _add_common(p, COMMAND_SECTIONS["evaluate"])

    p = sub.add_parser("sweep", help="perturbation sweep on a generated phantom")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_common(p, COMMAND_SECTIONS["sweep"])
    return parser


def resolve(args) -> ExperimentConfig:
    values = cfgmod.read_config_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for key in cfgmod.known_keys():
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "out_dir", None):
        values["out_dir"] = args.out_dir
    return cfgmod.build(values)


def read_roots(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'z y x'")
        rows.append([float(x) for x in parts])
    if not rows:
        raise ValueError(f"{path}: no roots")
    return np.array(rows)


def write_roots(roots, path) -> None:
    Path(path).write_text("".join(f"{z:.6f} {y:.6f} {x:.6f}\n" for z, y, x in np.asarray(roots)))


def _out_dir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_phantom(args, cfg: ExperimentConfig):
    out = _out_dir(cfg.out_dir)
    graph, mask, image = generate(cfg.resolved_phantom())
    write_swc(graph, out / "gt.swc")
    write_volume(mask, out / "mask.vvol")
    write_volume(image, out / "image.vvol")
    write_roots(graph.pos[graph.roots], out / "roots.txt")
    cfgmod.write_resolved(cfg, out, "phantom")


def cmd_vectors(args, cfg: ExperimentConfig):
    mask = read_volume(args.mask)
    graph = read_swc(args.graph)
    field = generate_vectors(mask, graph, cfg.vectors)
    out = Path(args.out)
    _out_dir(out.parent)
    write_volume(field, out)
    cfgmod.write_resolved(cfg, out.parent, "vectors")


def _ablated(cfg: ExperimentConfig, args) -> ExperimentConfig:
    pen = cfg.penalty
    if args.ablate_angle:
        pen = replace(pen, use_angle=False)
    if args.ablate_vmf:
        pen = replace(pen, use_vmf=False)
    if args.ablate_dbf:
        pen = replace(pen, use_dbf=False)
    return replace(cfg, penalty=pen)


def cmd_skeletonize(args, cfg: ExperimentConfig):
    if not args.roots and not args.auto_roots:
        raise UsageError("skeletonize needs --roots FILE or --auto-roots")
    mask = read_volume(args.mask)
    field = read_volume(args.vectors)
    if field.kind != "vec3" or field.dims != mask.dims:
        raise ValueError("vector field must be a vec3 volume with the mask's dims")
    dbf = euclidean_distance_transform(mask)
    if args.auto_roots:
        roots = detect_roots(mask, field, dbf, cfg.roots)
        if len(roots) == 0:
            raise ValueError("root detection found no roots")
    else:
        roots = read_roots(args.roots)
    pred = skeletonize(mask, field, roots, cfg.penalty, cfg.masking, cfg.post, dbf=dbf)
    out = Path(args.out)
    _out_dir(out.parent)
    write_swc(pred, out)
    cfgmod.write_resolved(cfg, out.parent, "skeletonize")


def report_text(report, cfg: ExperimentConfig) -> str:
    head = f"strategy={cfg.match.strategy}\nstep={cfg.match.step:.6f}\nd_max={cfg.match.d_max:.6f}\n"
    return head + report.to_text()


def report_table(report) -> str:
    d = report.as_dict()
    width = max(len(k) for k in d)
    rows = [f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}" for k, v in d.items()]
    return "\n".join(rows) + "\n"


def cmd_evaluate(args, cfg: ExperimentConfig):
    gt = read_swc(args.gt)
    pred = read_swc(args.pred)
    report = evaluate(gt, pred, cfg.match, count_unmatched=args.count_unmatched)
    text = report_text(report, cfg)
    if args.out:
        out = Path(args.out)
        _out_dir(out.parent)
        out.write_text(text)
        cfgmod.write_resolved(cfg, out.parent, "evaluate")
    else:
        sys.stdout.write(text)
    if args.table:
        sys.stdout.write(report_table(report))


def _sweep_row(cfg: ExperimentConfig, level: float, gt, mask, image, field):
    kind = cfg.sweep.kind
    spec = PerturbationSpec(kind, level, sub_seed(cfg.seed, f"{kind}:{level:.6g}"))
    if kind == "vector_noise":
        m, f = mask, perturb_vectors(field, spec)
    else:
        m = threshold_segment(perturb_image(image, spec), cfg.sweep.threshold)
        f = generate_vectors(m, gt, cfg.vectors)
    pred = skeletonize(m, f, gt.pos[gt.roots], cfg.penalty, cfg.masking, cfg.post)
    return evaluate(gt, pred, cfg.match).as_dict()


def run_sweep(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    """One metrics row per perturbation level, ordered by level."""
    gt, mask, image = generate(cfg.resolved_phantom())
    field = generate_vectors(mask, gt, cfg.vectors)
    levels = sorted(cfg.sweep.levels)
    args = [(cfg, lv, gt, mask, image, field) for lv in levels]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_row, *zip(*args)))
    else:
        rows = [_sweep_row(*a) for a in args]
    return [{"level": lv, **row} for lv, row in zip(levels, rows)]


def sweep_table(rows: list[dict]) -> str:
    keys = list(rows[0]) if rows else ["level"]
    fmt = lambda v: f"{v:.6f}" if isinstance(v, float) else str(v)  # noqa: E731
    lines = ["\t".join(keys)] + ["\t".join(fmt(r[k]) for k in keys) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_sweep(args, cfg: ExperimentConfig):
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    out = _out_dir(cfg.out_dir)
    text = sweep_table(run_sweep(cfg, args.jobs))
    (out / "sweep.tsv").write_text(text)
    cfgmod.write_resolved(cfg, out, "sweep")
    sys.stdout.write(text)


COMMANDS = {
    "phantom": cmd_phantom,
    "vectors": cmd_vectors,
    "skeletonize": cmd_skeletonize,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        if args.command == "skeletonize":
            cfg = _ablated(cfg, args)
    except (ConfigError, OSError) as exc:
        print(f"tubeskel: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"tubeskel {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"tubeskel {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
