"""Command-line entry point: ``dlcm <command> [flags]``.

Every command writes its artifacts plus ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import torch

from . import __version__

log = logging.getLogger("dlcm")

COMMANDS = ("train", "segment", "report-loss-positions", "plan-mup", "coord-check", "fit-scaling", "fit-decay",
            "flops", "optimal-config", "bench-attn", "ablate-parser", "ablate-boundary")
MODE = {"rule": "rule_based", "learned": "learned_mlp"}
CAUSALITY = {"paper": "paper_faithful", "strict": "strict"}


class UsageError(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


# config ----------------------------------------------------------------------------


def _literal(v: str):
    try:
        return ast.literal_eval(v)
    except (ValueError, SyntaxError):
        return v


def read_config(path) -> dict[str, dict]:
    """INI file; each section maps to one module (model, train, mup, scaling, bench, data)."""
    if path is None:
        return {}
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise UsageError(f"cannot read config file {path}")
    return {s: {k: _literal(v) for k, v in cp[s].items()} for s in cp.sections()}


def _only(cls, d: dict, section: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise UsageError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    return d


def build_train_config(conf: dict, args):
    from .model import DLCMConfig
    from .training import TrainConfig

    m = dict(conf.get("model", {}))
    if args.target_r is not None:
        m["target_R"] = float(args.target_r)
    if args.mode:
        m["boundary_mode"] = MODE[args.mode]
    if args.causality:
        m["causality"] = CAUSALITY[args.causality]
    if args.d_base is not None:
        m["d_base"] = args.d_base
    model = DLCMConfig(**_only(DLCMConfig, m, "model"))
    t = {k: v for k, v in conf.get("train", {}).items()}
    if args.seed is not None:
        t["seed"] = args.seed
    if "betas" in t:
        t["betas"] = tuple(t["betas"])
    return TrainConfig(model=model, **_only(TrainConfig, t, "train"))


def load_corpus(args, conf: dict, n_tokens: int):
    from . import corpora
    from .tokens import read_corpus

    if args.inputs:
        return read_corpus(args.inputs)
    data = conf.get("data", {})
    kind = data.get("corpus", "template")
    seed = data.get("seed", args.seed or 0)
    tokens = data.get("tokens", n_tokens)
    if kind == "template":
        return corpora.template_corpus(tokens, seed=seed)
    if kind == "mixed":
        return corpora.mixed_density_corpus(tokens, seed=seed)
    if kind == "periodic":
        return corpora.periodic_corpus(max(2, tokens // 513), 512, seed=seed)
    if kind == "random":
        return corpora.random_corpus(max(2, tokens // 513), 512, seed=seed)
    raise UsageError(f"unknown synthetic corpus {kind!r}")


def _hash_inputs(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p and Path(p).is_file():
            h.update(Path(p).read_bytes())
        elif p and Path(p).is_dir():
            for f in sorted(Path(p).rglob("*")):
                if f.is_file():
                    h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, args, argv) -> None:
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": args.config,
        "seed": args.seed,
        "inputs": args.inputs or [],
        "input_hash": _hash_inputs([args.config, *(args.inputs or []), getattr(args, "model", None),
                                    getattr(args, "baseline", None)]),
        "out": str(out),
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))


# commands --------------------------------------------------------------------------


def cmd_train(args, conf, out: Path):
    from .training import save_checkpoint, train

    cfg = build_train_config(conf, args)
    corpus = load_corpus(args, conf, cfg.total_tokens)
    cfg.out_dir = str(out)
    model, traj = train(cfg, corpus, log_path=out / "log.jsonl")
    save_checkpoint(out / "final", model, train_cfg=cfg, step=len(traj), tokens_seen=traj[-1]["tokens"])
    summary = {k: traj[-1][k] for k in ("step", "tokens", "loss_ce", "loss_aux", "realized_R")}
    _dump(summary, out / "summary.json")
    print(json.dumps(summary))


def cmd_segment(args, conf, out: Path):
    from .experiments import segment_report, write_segment_report
    from .tokens import read_corpus
    from .training import load_checkpoint

    if not args.model or not args.inputs:
        raise UsageError("segment needs --model CKPT and --in FILE")
    model, _ = load_checkpoint(args.model)
    R = float(args.target_r) if args.target_r is not None else model.cfg.target_R
    if abs(R - model.cfg.target_R) > 1e-9:
        log.warning("labelling with target %g but the model was trained at %g", R, model.cfg.target_R)
    corpora = {Path(p).stem: read_corpus([p]) for p in args.inputs}
    rows, dumps = segment_report({R: model}, corpora, dump_docs=args.dump_docs)
    write_segment_report(rows, dumps, out)
    for (dom, _, i), text in sorted(dumps.items()):
        print(text)
    for r in rows:
        print(f"# {r['domain']}: {r['mean_tokens_per_concept']:.3f} tokens/concept (target {R:g})")


def cmd_report_loss_positions(args, conf, out: Path):
    from .tokens import pack_batches
    from .training import load_checkpoint, loss_by_concept_position

    if not args.model or not args.baseline:
        raise UsageError("report-loss-positions needs --model CKPT and --baseline CKPT")
    model, _ = load_checkpoint(args.model)
    base, _ = load_checkpoint(args.baseline)
    corpus = load_corpus(args, conf, 200_000)
    windows = list(pack_batches(corpus, conf.get("train", {}).get("seq_len", 256), seed=None))
    rep = loss_by_concept_position(model, windows, base)
    with open(out / "loss_positions.tsv", "w") as f:
        f.write("position\tcount\tdlcm\tbaseline\tdelta\n")
        for row in zip(rep["position"], rep["count"], rep["dlcm"], rep["baseline"], rep["delta"]):
            f.write("{}\t{}\t{:.6f}\t{:.6f}\t{:.6f}\n".format(*row))
    _dump(rep, out / "loss_positions.json")


def _widths(args, default):
    if not args.widths:
        return default
    try:
        return [int(w) for w in args.widths.split(",")]
    except ValueError:
        raise UsageError(f"--widths must be comma-separated integers, got {args.widths!r}") from None


def cmd_plan_mup(args, conf, out: Path):
    from .mup import make_mup_plan

    mc = conf.get("model", {})
    w = _widths(args, [mc.get("d_token", 64), mc.get("d_concept", 128)])
    if len(w) != 2:
        raise UsageError("plan-mup takes --widths d_token,d_concept")
    eta = conf.get("mup", {})
    plan = make_mup_plan(args.d_base or mc.get("d_base", 64), w[0], w[1], mc.get("sigma_base", 0.02), **eta)
    (out / "mup_plan.json").write_text(plan.to_json())
    print(plan.to_json())


def cmd_coord_check(args, conf, out: Path):
    from .mup import coordinate_check

    widths = _widths(args, [64, 128, 256, 512])
    d_base = args.d_base or 64
    kw = conf.get("mup", {})
    rows = []
    for scaled in (True, False):
        rep = coordinate_check(widths, d_base, seed=args.seed or 0, output_scaling=scaled, **kw)
        _dump(rep, out / f"coord_check_{'scaled' if scaled else 'unscaled'}.json")
        for w in widths:
            for phase in ("init", "trained"):
                for key, v in rep["per_width"][w][phase].items():
                    rows.append((scaled, w, phase, key, v))
        print(f"output_scaling={scaled}: init logit RMS ratio {rep['init_logit_ratio']:.3f}, "
              f"max trained activation ratio {rep['max_trained_activation_ratio']:.3f}")
    with open(out / "coord_check.tsv", "w") as f:
        f.write("output_scaling\twidth\tphase\tquantity\trms\n")
        for r in rows:
            f.write("{}\t{}\t{}\t{}\t{:.6g}\n".format(*r))


def cmd_fit_scaling(args, conf, out: Path):
    from .scaling import fit_full_law, read_points, write_prediction_grid

    if not args.inputs:
        raise UsageError("fit-scaling needs --in runs.jsonl|runs.csv")
    points = [p for path in args.inputs for p in read_points(path)]
    fit = fit_full_law(points, **conf.get("scaling", {}))
    (out / "fit.json").write_text(fit.to_json())
    write_prediction_grid(fit, points, out / "predictions.tsv")
    print(json.dumps({"r2": fit.r2, **fit.params()}))


def cmd_fit_decay(args, conf, out: Path):
    import csv as _csv

    from .scaling import fit_decay_law

    if not args.inputs:
        raise UsageError("fit-decay needs --in runs.csv (L_stable,R,N,delta)")
    runs = []
    for path in args.inputs:
        if str(path).endswith(".csv"):
            with open(path, newline="") as f:
                runs += [(float(r["L_stable"]), float(r["R"]), float(r["N"]), float(r["delta"]))
                         for r in _csv.DictReader(f)]
        else:
            for line in Path(path).read_text().splitlines():
                if line.strip():
                    r = json.loads(line)
                    runs.append((r["L_stable"], r["R"], r["N"], r["delta"]))
    fit = fit_decay_law(runs)
    _dump(asdict(fit) | {"reference_r2": 0.93}, out / "decay_fit.json")
    print(json.dumps(asdict(fit)))


def cmd_flops(args, conf, out: Path):
    from .scaling import flops_estimate, reference_archs

    R = float(args.target_r or 4)
    base, dlcm = reference_archs()
    D = float(conf.get("scaling", {}).get("D", 1e12))
    rep = {
        "baseline": flops_estimate(base, D, 1.0),
        "dlcm": flops_estimate(dlcm, D, R),
        "dlcm_P": dlcm.P,
        "R": R,
        "D": D,
    }
    rep["ratio_dlcm_over_baseline"] = rep["dlcm"]["total"] / rep["baseline"]["total"]
    _dump(rep, out / "flops.json")
    print(json.dumps(rep))


def _load_fit(path):
    from .scaling import LAW_PARAMS, ScalingFit

    d = json.loads(Path(path).read_text())
    return ScalingFit(**{k: d[k] for k in LAW_PARAMS}, r2=d.get("r2", float("nan")), offsets=d.get("offsets", {}))


def cmd_optimal_config(args, conf, out: Path):
    from .scaling import optimal_config

    if not args.inputs:
        raise UsageError("optimal-config needs --in fit.json")
    sc = conf.get("scaling", {})
    rep = optimal_config(_load_fit(args.inputs[0]), float(sc.get("N", 1e9)), float(sc.get("D", 1e11)),
                         tuple(sc.get("Ps", (0.3, 0.5, 0.7))), tuple(sc.get("Rs", (2, 4, 8))))
    with open(out / "optimal_config.tsv", "w") as f:
        f.write("P\tR\tD_equal_flops\tpred_loss\n")
        for r in rep["table"]:
            f.write(f"{r['P']:g}\t{r['R']:g}\t{r['D_equal_flops']:.6g}\t{r['pred_loss']:.6f}\n")
        f.write("# reference operating point: P=0.6 R=4\n")
    _dump(rep, out / "optimal_config.json")
    print(json.dumps(rep["best"]))


def cmd_bench_attn(args, conf, out: Path):
    from .bench import bench_cross_attention, write_csv

    bc = conf.get("bench", {})
    hiddens = _widths(args, list(bc.get("hiddens", [256])))
    rows = bench_cross_attention(tuple(bc.get("seq_lens", (512, 1024, 2048))), tuple(hiddens),
                                 reps=bc.get("reps", 5), seed=args.seed or 0)
    write_csv(rows, out / "bench_attn.csv")
    for r in rows:
        print("{seq_len},{hidden},{path},{median_ms},{speedup_vs_dense}".format(**r))


def cmd_ablate_parser(args, conf, out: Path):
    from .experiments import parser_ablation, write_table

    if args.r is not None and args.target_r is None:
        args.target_r = args.r
    if args.target_r is None:
        args.target_r = 4.0
    conf.setdefault("data", {}).setdefault("corpus", "mixed")
    cfg = build_train_config(conf, args)
    corpus = load_corpus(args, conf, cfg.total_tokens)
    rows = parser_ablation(cfg, corpus, log_dir=out)
    write_table(rows, out / "parser_ablation.tsv")
    for r in rows:
        print(r)


def cmd_ablate_boundary(args, conf, out: Path):
    from .experiments import boundary_ablation, write_table

    cfg = build_train_config(conf, args)
    corpus = load_corpus(args, conf, cfg.total_tokens)
    rows = boundary_ablation(cfg, corpus, log_dir=out)
    write_table(rows, out / "boundary_ablation.tsv")
    last = {r["mode"]: r for r in rows}
    for mode, r in last.items():
        print(f"{mode}: final realized tokens/concept {r['realized_R']:.3f}, loss {r['loss_ce']:.4f}")


HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in COMMANDS}


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dlcm", description="Dynamic concept language model toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI file with [model] [train] [mup] [scaling] [bench] [data] sections")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=f"runs/{name}")
        sp.add_argument("--target-r", dest="target_r", type=float)
        sp.add_argument("--mode", choices=sorted(MODE))
        sp.add_argument("--causality", choices=sorted(CAUSALITY))
        sp.add_argument("--d-base", dest="d_base", type=int)
        sp.add_argument("--widths")
        sp.add_argument("--in", dest="inputs", nargs="+")
        if name in ("segment", "report-loss-positions"):
            sp.add_argument("--model", help="checkpoint directory")
        if name == "segment":
            sp.add_argument("--dump-docs", dest="dump_docs", type=int, default=1)
        if name == "report-loss-positions":
            sp.add_argument("--baseline", help="baseline checkpoint directory")
        if name == "ablate-parser":
            sp.add_argument("--r", type=float, help="alias of --target-r")
    return ap


def main(argv=None) -> int:
    from .numerics import NonFiniteError
    from .scaling import FitError
    from .segmenter import ConfigError
    from .training import CheckpointError, TrainingDiverged

    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    threads = os.environ.get("DLCM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        conf = read_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args, argv)
        HANDLERS[args.command](args, conf, out)
    except (TrainingDiverged, NonFiniteError, FitError, NumericFailure) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (UsageError, ConfigError, CheckpointError, TypeError, ValueError, OSError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
