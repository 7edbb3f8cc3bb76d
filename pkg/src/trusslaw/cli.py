"""Command-line entry point: gen, homogenize, train, eval, simulate, export.

Everything a command writes lands in the output directory; files other than
the logs are pure functions of the configuration, inputs and seed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .dataset import (FormatError, HomogenizeConfig, build_dataset, load_split, plan_splits,
                      read_manifest)
from .design import ValidationError, generate_designs, read_designs, seed_cells, write_designs
from .homogenize import DivergenceError, SolverConfig
from .hypernet import CheckpointError, HypernetArch, load_checkpoint, save_checkpoint
from .kinematics import from_voigt, invariants, to_voigt
from .metrics import COMPONENTS, MetricsReport
from .training import (DesignData, TrainingError, evaluate, lambda_sweep, train, write_sweep)

log = logging.getLogger("trusslaw")

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4

DESIGNS_FILE = "designs.jsonl"
DATA_DIR = "data"
CHECKPOINT = "model.ckpt"


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.global_.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _designs(out: Path) -> dict:
    path = out / DESIGNS_FILE
    if not path.exists():
        raise FileNotFoundError(f"{path}: designs file missing (run gen first)")
    return {d.id: d for d in read_designs(path)}


def _homogenize_config(cfg: RunConfig) -> HomogenizeConfig:
    h = cfg.homogenize
    solver = SolverConfig(tol_rel=h.tol_rel, tol_abs=h.tol_abs, max_iter=h.max_iter,
                          subdivision=h.subdivision, seed=cfg.global_.seed, max_cutbacks=h.max_cutbacks)
    return HomogenizeConfig(h.rho, h.youngs_modulus, h.poisson_ratio, solver)


def _arch(cfg: RunConfig) -> HypernetArch:
    t = cfg.train
    return HypernetArch(trunk=t.trunk, head_hidden=t.head_hidden, icnn_hidden=t.icnn_hidden,
                        alpha=t.alpha, beta=t.beta)


def cmd_gen(cfg: RunConfig) -> int:
    out = _out(cfg)
    rng = np.random.default_rng(cfg.global_.seed)
    designs = generate_designs(cfg.gen.n_designs, seed_cells(), cfg.gen.perturb_params(), rng)
    write_designs(out / DESIGNS_FILE, designs)
    log.info("wrote %d designs to %s", len(designs), out / DESIGNS_FILE)
    return EXIT_OK


def cmd_homogenize(cfg: RunConfig) -> int:
    out = _out(cfg)
    designs = _designs(out)
    h = cfg.homogenize
    rng = np.random.default_rng(cfg.global_.seed)
    n_test_g = min(h.n_test_g, max(len(designs) - 1, 0))
    plan = plan_splits(sorted(designs), n_test_g, h.n_test_l, h.k_gl, h.steps, rng, h.k_l)
    counts = build_dataset(list(designs.values()), plan, out / DATA_DIR, _homogenize_config(cfg),
                           workers=cfg.global_.threads)
    for name, (n, bad) in counts.items():
        log.info("%s: %d records (%d unconverged)", name, n, bad)
    return EXIT_OK


def _load_data(out: Path, split: str):
    designs = _designs(out)
    graphs = {i: d.graph for i, d in designs.items()}
    rows = load_split(out / DATA_DIR, split)
    return rows, graphs


def cmd_train(cfg: RunConfig) -> int:
    out = _out(cfg)
    rows, graphs = _load_data(out, "train")
    data = DesignData.from_rows(rows, graphs)
    tc = cfg.train.train_config(cfg.global_.seed)
    arch = _arch(cfg)

    def checkpoint(epoch, model):
        save_checkpoint(out / f"model_epoch{epoch:05d}.ckpt", model)

    result = train(data, tc, arch, checkpoint=checkpoint)
    save_checkpoint(out / CHECKPOINT, result.model)
    result.write_log(out / "train_log.csv")
    result.write_epochs(out / "train_epochs.csv")
    log.info("final epoch loss %.6e, train NRMSE %.4e", result.epochs[-1][1], result.epochs[-1][2])
    if cfg.train.lambda_sweep:
        plan = read_manifest(out / DATA_DIR / "manifest.txt")
        sets = {}
        for name in ("test_G", "test_GL", "test_L"):
            r = load_split(out / DATA_DIR, name)
            if len(r):
                sets[name] = (r, graphs, plan.paths)
        table = lambda_sweep(data, tc, cfg.train.lambda_sweep, sets, arch)
        write_sweep(out / "lambda_sweep.csv", table)
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    out = _out(cfg)
    hn = load_checkpoint(out / CHECKPOINT)
    plan = read_manifest(out / DATA_DIR / "manifest.txt")
    designs = _designs(out)
    graphs = {i: d.graph for i, d in designs.items()}
    report = MetricsReport()
    for split in cfg.eval.splits:
        all_rows = load_split(out / DATA_DIR, split, converged_only=False)
        rows = load_split(out / DATA_DIR, split)
        report.excluded[split] = len(all_rows) - len(rows)
        if len(rows) == 0:
            log.warning("split %s has no converged records", split)
            continue
        evaluate(split, rows, graphs, plan.paths, hn, report)
        for comp in COMPONENTS[:3]:
            s = report.get(split, comp)
            log.info("%s %s: NRMSE %.4f R2 %.4f", split, comp, s.nrmse, s.r2)
    report.write_csv(out / "metrics.csv")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    from .macro import LearnedClosure, MacroMesh, MacroProblem, compare, fully_resolved, solve

    out = _out(cfg)
    s = cfg.simulate
    designs = _designs(out)
    if s.design not in designs:
        raise ValidationError(f"design {s.design} not in {out / DESIGNS_FILE}")
    graph = designs[s.design].graph
    ckpt = Path(s.checkpoint)
    hn = load_checkpoint(ckpt if ckpt.is_absolute() else out / ckpt)
    h = cfg.homogenize
    L = float(s.tiling)  # unit cells of side 1
    problem = MacroProblem(MacroMesh.box(L, s.mesh), LearnedClosure(hn.predict_model(graph)), L,
                           s.u_over_L * L, s.steps, h.youngs_modulus, loading=s.loading)
    sol = solve(problem)
    sol.curve.write_csv(out / "curve_nn.csv")
    if sol.curve.truncated:
        log.warning("continuum curve truncated: %s", sol.curve.note)
    if s.resolved and s.loading == "uniaxial":
        from .beam import BeamMaterial

        ref = fully_resolved(graph, s.tiling, s.u_over_L, s.steps,
                             BeamMaterial(h.youngs_modulus, h.poisson_ratio), h.rho,
                             config=_homogenize_config(cfg).solver, imperfection=s.imperfection,
                             seed=cfg.global_.seed)
        ref.write_csv(out / "curve_resolved.csv")
        err = compare(ref, sol.curve)
        with open(out / "simulate_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["design", "tiling", "nrmse"])
            w.writerow([s.design, s.tiling, repr(err)])
        log.info("continuum vs resolved force NRMSE %.4f", err)
    return EXIT_OK


def cmd_export(cfg: RunConfig) -> int:
    out = _out(cfg)
    exp = out / "export"
    exp.mkdir(exist_ok=True)
    rows_by_split = {s: load_split(out / DATA_DIR, s) for s in cfg.export.splits}
    ckpt = out / CHECKPOINT
    hn = load_checkpoint(ckpt) if ckpt.exists() else None
    graphs = {i: d.graph for i, d in _designs(out).items()} if hn is not None else {}
    for split, rows in rows_by_split.items():
        F = rows["F"].reshape(-1, 3, 3)
        inv = invariants(F) if len(rows) else np.zeros((0, 3))
        with open(exp / f"invariants_{split}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["design", "path", "t", "I1_minus_3", "I2_minus_3", "J_minus_1_sq"])
            for r, v in zip(rows, inv):
                w.writerow([int(r["design"]), int(r["path"]), int(r["t"])] + [repr(float(x)) for x in v])
        if hn is None:
            continue
        S_pred = np.zeros_like(rows["S"])
        for d in np.unique(rows["design"]):
            sel = rows["design"] == d
            S_pred[sel] = to_voigt(hn.predict_model(graphs[int(d)]).stress(from_voigt(rows["E"][sel])))
        with open(exp / f"stress_{split}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["design", "path", "t"] + [f"E{c[1:]}" for c in COMPONENTS]
                       + [f"{c}_true" for c in COMPONENTS] + [f"{c}_pred" for c in COMPONENTS])
            for r, p in zip(rows, S_pred):
                w.writerow([int(r["design"]), int(r["path"]), int(r["t"])]
                           + [repr(float(x)) for x in r["E"]] + [repr(float(x)) for x in r["S"]]
                           + [repr(float(x)) for x in p])
    metrics = out / "metrics.csv"
    if metrics.exists():
        rep = MetricsReport.read_csv(metrics)
        with open(exp / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split", "component", "r2", "nrmse"])
            for (split, comp, fam), st in sorted(rep.rows.items()):
                if fam == "all":
                    w.writerow([split, comp, repr(st.r2), repr(st.nrmse)])
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "homogenize": cmd_homogenize,
    "train": cmd_train,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trusslaw", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="overrides [global] seed")
    p.add_argument("--threads", type=int, help="worker processes for homogenization")
    p.add_argument("--out", help="output directory (overrides [global] out)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(seed=args.seed, threads=args.threads, out=args.out)
        if cfg.global_.seed < 0 or cfg.global_.threads < 1:
            raise ConfigError("seed must be non-negative and threads positive")
    except ConfigError as exc:
        print(f"trusslaw: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"trusslaw: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=getattr(logging, cfg.global_.log_level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.info("resolved configuration:\n%s", cfg.to_ini())
    try:
        out = _out(cfg)
        (out / f"{args.command}.resolved.ini").write_text(cfg.to_ini())
        return COMMANDS[args.command](cfg)
    except (DivergenceError, TrainingError) as exc:
        log.error("%s", exc)
        return EXIT_DIVERGENCE
    except (FormatError, CheckpointError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ValidationError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
