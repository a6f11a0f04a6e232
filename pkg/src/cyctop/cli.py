"""Command-line entry point: ``cyctop <subcommand> [flags]``.

Every subcommand writes its artifacts under ``--output-dir`` and prints a
one-line JSON summary. Exit status is 0 on success, 1 on usage errors and 2
on missing files, malformed configs or invalid data.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .errors import CycTopError, ValidationError

COMMANDS = ("topology", "epec", "simulate", "gen-data", "train", "eval", "saliency", "count-cycles")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cyctop", description="Cycle-aware graph attention on connectivity matrices.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--input", help="matrix file (.csv/.cycg), graph JSON or dataset directory")
    p.add_argument("--output-dir", default=".", help="where artifacts are written")
    p.add_argument("--config", help="key=value or JSON file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--quantile", type=float, help="fraction of node pairs kept as edges")
    p.add_argument("--k", type=int, help="number of positional-encoding eigenvectors")
    p.add_argument("--layers", type=int, help="convolution layers (model) or hops (simulate)")
    p.add_argument("--pulse", type=int, help="edge index receiving the unit pulse")
    p.add_argument("--no-epec", action="store_true", help="train without positional encodings")
    p.add_argument("--l1-lambda", type=float, help="L1 weight on the saliency map")
    p.add_argument("--threshold", type=float, help="share of total saliency mass kept when binarizing saliency")
    return p


# -- configuration ------------------------------------------------------------


def read_config(path) -> dict:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"malformed JSON config {path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ValidationError(f"config {path} must hold an object")
        return cfg
    cfg = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"malformed config line {lineno} in {path}: {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            cfg[key] = json.loads(value)
        except json.JSONDecodeError:
            cfg[key] = value
    return cfg


def _settings(args) -> dict:
    cfg = read_config(args.config) if args.config else {}
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    flags = {
        "seed": args.seed, "quantile": args.quantile, "k": args.k, "layers": args.layers,
        "pulse": args.pulse, "l1_lambda": args.l1_lambda, "threshold": args.threshold,
    }
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.no_epec:
        cfg["use_epec"] = False
    if "seed" not in cfg:
        cfg["seed"] = int(os.environ.get("CYCTOP_SEED", 0))
    return cfg


def _pick(cls, cfg, aliases=None, skip=()):
    names = {f.name for f in fields(cls)} - set(skip)
    out = {k: cfg[k] for k in names if k in cfg}
    for src, dst in (aliases or {}).items():
        if src in cfg:
            out[dst] = cfg[src]
    return out


KNOWN_KEYS = {
    "seed", "quantile", "k", "layers", "pulse", "l1_lambda", "threshold", "use_epec",
    "method", "checkpoint", "format",
}


def _check_keys(cfg):
    from .model import CycGATConfig
    from .synth import SynthSpec
    from .training import TrainConfig

    known = set(KNOWN_KEYS)
    for cls in (CycGATConfig, SynthSpec, TrainConfig):
        known |= {f.name for f in fields(cls)}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")


# -- helpers ----------------------------------------------------------------


def _require_input(args) -> Path:
    if not args.input:
        raise UsageError(f"{args.command} needs --input")
    path = Path(args.input)
    if not path.exists():
        raise ValidationError(f"input not found: {path}")
    return path


def _load_graph(path: Path, quantile: float):
    from .graph import load_connectivity, load_graph_json, threshold_graph

    if path.suffix == ".json":
        return load_graph_json(path)
    return threshold_graph(load_connectivity(path), quantile)


def _out(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _train_config(cfg):
    from .training import TrainConfig

    return TrainConfig(**_pick(TrainConfig, cfg))


def _model_config(cfg, n_nodes):
    from .model import CycGATConfig

    kw = _pick(CycGATConfig, cfg, {"layers": "n_layers", "k": "epec_k"}, skip=("use_epec",))
    kw["n_nodes"] = n_nodes
    return CycGATConfig(**kw)


def _dataset(path: Path):
    from .synth import load_dataset

    return load_dataset(path)


# -- subcommands --------------------------------------------------------------


def cmd_topology(args, cfg):
    from .cycles import export_incidence, save_coo_csv, topology
    from .graph import betti1, save_graph_json

    g = _load_graph(_require_input(args), cfg.get("quantile", 0.25))
    td, t, l1, a_e = topology(g, method=cfg.get("method", "nullspace"))
    out = _out(args)
    save_graph_json(g, out / "graph.json")
    export_incidence(t, out / "incidence.csv")
    save_coo_csv(a_e, out / "edge_adjacency.csv")
    return {"n": g.n_nodes, "e": g.n_edges, "q": t.q, "betti1": betti1(g), "components": g.components}


def cmd_epec(args, cfg):
    from .cycles import topology
    from .spectral import epec, export_epec

    g = _load_graph(_require_input(args), cfg.get("quantile", 0.25))
    k = int(cfg.get("k", 8))
    _, t, _, _ = topology(g, method=cfg.get("method", "nullspace"))
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        enc = epec(t, None, k)
    export_epec(enc, _out(args) / "epec.csv")
    return {"e": g.n_edges, "q": t.q, "k": k, "effective_k": enc.effective_k,
            "eigenvalues": enc.eigenvalues[:enc.effective_k].tolist()}


def cmd_simulate(args, cfg):
    from .cycles import topology
    from .model import simulate_localization

    g = _load_graph(_require_input(args), cfg.get("quantile", 0.25))
    _, t, _, a_e = topology(g, method=cfg.get("method", "nullspace"))
    pulse = int(cfg.get("pulse", 0))
    layers = int(cfg.get("layers", 4))
    supports, isolated = simulate_localization(a_e, pulse, layers)
    edges = g.edges.tolist()
    _write_json(_out(args) / "supports.json", {
        "pulse": pulse,
        "isolated": isolated,
        "supports": supports,
        "edges": edges,
        "incidence": [r.tolist() for r in t.rows()],
    })
    return {"pulse": pulse, "layers": layers, "isolated": isolated,
            "support_sizes": [len(s) for s in supports]}


def cmd_gen_data(args, cfg):
    from .synth import SynthSpec, export_dataset, generate

    spec = SynthSpec(**_pick(SynthSpec, cfg))
    out = _out(args)
    ds = generate(spec)
    export_dataset(ds, out)
    return {"n_samples": spec.n_samples, "n_nodes": spec.n_nodes, "label_rule": spec.label_rule,
            "seed": spec.seed, "checks": ds.checks}


def _write_saliency_csv(path, samples, sals):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "i", "j", "saliency"])
        for idx, s, sal in zip(samples, (s for s, _ in sals), (v for _, v in sals)):
            for (i, j), v in zip(s.graph.edges.tolist(), sal):
                w.writerow([idx, i, j, repr(float(v))])


def cmd_train(args, cfg):
    from .model import save_checkpoint
    from .training import train

    ds = _dataset(_require_input(args))
    tc = _train_config(cfg)
    mc = _model_config(cfg, ds.spec.n_nodes)
    use_epec = bool(cfg.get("use_epec", True))
    model, report, samples = train(ds.pairs(), mc, tc, use_epec=use_epec, groups=ds.groups)
    out = _out(args)
    (out / "report.json").write_text(report.to_json() + "\n")
    save_checkpoint(model, out / "model.ckpt", step=report.selected_epoch, seed=tc.resolved_seed())
    test = report.split["test"]
    _write_saliency_csv(out / "test_saliency.csv", test,
                        [(samples[i], report.test_saliency[n]) for n, i in enumerate(test)])
    return {"test_accuracy": report.test_accuracy, "selected_epoch": report.selected_epoch,
            "epochs": len(report.history), "use_epec": use_epec, "seed": tc.resolved_seed()}


def _restore(args, cfg):
    from .model import load_checkpoint
    from .training import _prepare

    ds = _dataset(_require_input(args))
    out = Path(args.output_dir)
    ckpt = Path(cfg.get("checkpoint", out / "model.ckpt"))
    if not ckpt.exists():
        raise ValidationError(f"checkpoint not found: {ckpt}")
    model, header = load_checkpoint(ckpt)
    report_path = ckpt.parent / "report.json"
    idx = None
    if report_path.exists():
        idx = json.loads(report_path.read_text())["split"]["test"]
    idx = list(range(len(ds.matrices))) if idx is None else idx
    tc = _train_config(cfg)
    samples = _prepare([(ds.matrices[i], int(ds.labels[i])) for i in idx], tc, model.config.epec_k)
    return ds, model, samples, idx, tc


def _run_model(model, samples, tc):
    from .pipeline import collate
    from .training import evaluate

    use = model.config.use_epec
    dt = model.config.torch_dtype
    batches = [collate(samples[s:s + tc.batch_size], use, dt) for s in range(0, len(samples), tc.batch_size)]
    return evaluate(model, batches, tc.l1_lambda)


def cmd_eval(args, cfg):
    ds, model, samples, idx, tc = _restore(args, cfg)
    loss, acc, _ = _run_model(model, samples, tc)
    _write_json(_out(args) / "eval.json", {"loss": loss, "accuracy": acc, "samples": idx})
    return {"n": len(samples), "accuracy": acc, "loss": loss}


def cmd_saliency(args, cfg):
    from .training import evaluate_saliency

    ds, model, samples, idx, tc = _restore(args, cfg)
    _, _, sals = _run_model(model, samples, tc)
    mass = float(cfg.get("threshold", 0.25))
    planted = [ds.backbones[i] for i in idx] if all(len(ds.backbones[i]) for i in idx) else None
    res = evaluate_saliency(samples, sals, mass, planted)
    out = _out(args)
    n = samples[0].graph.n_nodes
    iu, ju = np.triu_indices(n, 1)
    mean = np.zeros((n, n))
    mean[iu, ju] = res["mean_saliency"]
    mean += mean.T
    np.savetxt(out / "mean_saliency.csv", mean, delimiter=",", fmt="%.17g")
    keys = list(res["per_sample"][0])
    with open(out / "betti.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", *keys])
        for i, row in zip(idx, res["per_sample"]):
            w.writerow([i, *(row[k] for k in keys)])
    _write_json(out / "saliency_summary.json", res["summary"])
    return res["summary"]


def cmd_count_cycles(args, cfg):
    from .graph import betti1

    g = _load_graph(_require_input(args), cfg.get("quantile", 0.25))
    return {"betti1": betti1(g), "n": g.n_nodes, "e": g.n_edges, "components": g.components}


HANDLERS = {
    "topology": cmd_topology,
    "epec": cmd_epec,
    "simulate": cmd_simulate,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "saliency": cmd_saliency,
    "count-cycles": cmd_count_cycles,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"cyctop: usage error: {exc}", file=sys.stderr)
        return 1
    try:
        cfg = _settings(args)
        _check_keys(cfg)
        summary = HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"cyctop: usage error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"cyctop: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except (CycTopError, ValueError, TypeError, OSError, KeyError) as exc:
        print(f"cyctop: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return 0


def main():
    sys.exit(run())
