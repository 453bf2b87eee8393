"""Command-line front end: generate, merge, infer, eval, sweep, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (
    Checkpoint,
    Head,
    MTSVError,
    TopologyError,
    read_checkpoint,
    read_container,
    write_checkpoint,
)
from .config import FILTER_SCOPES, MERGE_MODES, ROUTER_CANDIDATES, SUBSPACE_SOURCES, MassConfig
from .engine import MassModel
from .harness import METHODS, SuiteParams, evaluate, finetuned_accuracies, gen_synthetic_suite, layer_sweep, load_suite
from .linalg import RankDeficientError
from .merge import RankBudgetError, fixed_merge
from .subspace import read_bundles, write_bundles

log = logging.getLogger("massmerge")

# flag name -> MassConfig field
_CFG_FLAGS = {
    "alpha": "alpha",
    "epsilon": "epsilon",
    "eta": "eta",
    "rank": "rank",
    "topk": "top_k",
    "temperature": "temperature",
    "layer": "layer",
    "mode": "merge_mode",
    "filter_scope": "filter_scope",
    "router_candidates": "router_candidates",
    "subspace": "subspace",
}


class CLIError(Exception):
    pass


def _config_args(p: argparse.ArgumentParser):
    g = p.add_argument_group("merge / routing hyperparameters")
    g.add_argument("--config", type=Path, help="JSON file of config values (flags take precedence)")
    g.add_argument("--alpha", type=float, help="merge scale (default 1.0)")
    g.add_argument("--epsilon", type=float, help="redundancy threshold (default 0.3)")
    g.add_argument("--eta", type=float, help="gate threshold on routing weights (default 0.2)")
    g.add_argument("--rank", type=int, help="per-task truncation rank (default min(m, n) / T)")
    g.add_argument("--topk", type=int, help="max tasks kept by the router (default 2)")
    g.add_argument("--temperature", type=float, help="softmax temperature (default 1.0)")
    g.add_argument("--layer", help="routing layer name")
    g.add_argument("--mode", choices=MERGE_MODES, help="adaptive merge mode (default tsv)")
    g.add_argument("--filter-scope", choices=FILTER_SCOPES)
    g.add_argument("--router-candidates", choices=ROUTER_CANDIDATES)
    g.add_argument("--subspace", choices=SUBSPACE_SOURCES, help="routing basis source (default raw)")
    g.add_argument("--strict", action="store_true", help="fail instead of shrinking ranks that overflow a layer")


def _build_config(args) -> MassConfig:
    d = MassConfig.from_json(args.config).to_dict() if getattr(args, "config", None) else {}
    for flag, name in _CFG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[name] = v
    if getattr(args, "strict", False):
        d["strict"] = True
    return MassConfig.from_dict(d)


def _suite_args(p: argparse.ArgumentParser):
    g = p.add_argument_group("suite")
    g.add_argument("--suite", default="synthetic", help="'synthetic' or a directory written by 'generate'")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tasks", type=int, default=SuiteParams.n_tasks, dest="n_tasks")
    g.add_argument("--widths", default=",".join(map(str, SuiteParams.widths)), help="comma-separated layer widths")
    g.add_argument("--suite-rank", type=int, default=SuiteParams.rank, help="planted rank per task")
    g.add_argument("--samples", type=int, default=SuiteParams.samples_per_task, help="samples per task")
    g.add_argument("--noise", type=float, default=SuiteParams.noise)
    g.add_argument("--overlap", type=float, default=SuiteParams.overlap)
    g.add_argument("--planted-layer", type=int, default=None)


def _suite(args):
    if args.suite != "synthetic":
        root = Path(args.suite)
        if not (root / "suite.json").is_file():
            raise CLIError(f"not a suite directory: {root}")
        return load_suite(root)
    widths = tuple(int(w) for w in args.widths.split(","))
    return gen_synthetic_suite(
        n_tasks=args.n_tasks, widths=widths, rank=args.suite_rank, samples_per_task=args.samples,
        noise=args.noise, overlap=args.overlap, seed=args.seed, planted_layer=args.planted_layer,
    )


def _read_ckpt(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CLIError(f"no such file: {p}")
    return read_checkpoint(p)


def _emit(text: str, out: Path | None):
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_generate(args) -> int:
    suite = _suite(args)
    root = suite.save(args.out)
    print(f"suite {suite.suite_hash()[:16]} written to {root}")
    print(f"tasks: {' '.join(suite.task_ids)}  planted layer: {suite.planted_layer}")
    return 0


def _task_checkpoints(paths) -> tuple[list[Checkpoint], list[str]]:
    cks, ids, seen = [], [], {}
    for path in paths:
        c = _read_ckpt(path)
        tid = c.meta.get("task_id") or Path(path).stem
        seen[tid] = seen.get(tid, 0) + 1
        if seen[tid] > 1:
            tid = f"{tid}#{seen[tid]}"
        # a single head is renamed after its task so the router can find it
        if len(c.heads) == 1 and c.heads[0].name != tid:
            h = c.heads[0]
            c = c.replace(heads=(Head(tid, h.weight, h.bias),))
        cks.append(c)
        ids.append(tid)
    return cks, ids


def cmd_merge(args) -> int:
    cfg = _build_config(args)
    pre = _read_ckpt(args.pre)
    fts, ids = _task_checkpoints(args.tasks)
    fm = fixed_merge(pre, fts, cfg, task_ids=ids)
    out = Path(args.out)
    stem = out.with_suffix("")
    bundles_path = stem.with_name(stem.name + ".bundles.mtsv")
    prov_path = stem.with_name(stem.name + ".provenance.json")
    merged = fm.merged.weights.replace(meta={"kind": "merged", "method": "tsv-m"})
    write_checkpoint(merged, out)
    write_bundles(fm.bundles, bundles_path)
    prov = dict(fm.merged.provenance)
    prov["config"] = cfg.to_dict()
    prov["task_files"] = [str(p) for p in args.tasks]
    prov["admitted_tasks"] = [ids[i] for i in fm.admitted]
    prov_path.write_text(json.dumps(prov, indent=2) + "\n")
    print(f"admitted: {', '.join(ids[i] for i in fm.admitted)} ({len(fm.admitted)} of {len(ids)})")
    for name in pre.layer_names:
        print(f"  {name}: k per admitted task {prov['rank_k'].get(name, [])}")
    print(f"wrote {out}, {bundles_path}, {prov_path}")
    return 0


def _read_inputs(path):
    p = Path(path)
    if not p.exists():
        raise CLIError(f"no such file: {p}")
    rows = []
    for n, line in enumerate(p.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            rows.append((r.get("id", n), np.asarray(r["x"], dtype=np.float64)))
        except (ValueError, KeyError, TypeError) as exc:
            raise CLIError(f"{p}:{n}: bad input line ({exc})") from None
    if not rows:
        raise CLIError(f"{p}: no inputs")
    return rows


def cmd_infer(args) -> int:
    cfg = _build_config(args)
    pre = _read_ckpt(args.pre)
    merged = _read_ckpt(args.merged)
    if not Path(args.bundles).exists():
        raise CLIError(f"no such file: {args.bundles}")
    bundles = read_bundles(args.bundles)
    layer = cfg.layer or merged.layer_names[len(merged.layer_names) // 2]
    mm = MassModel(pre, merged, bundles, cfg, layer=layer)
    rows = _read_inputs(args.input)
    for sid, x in rows:
        if x.shape[-1] != pre.input_dim:
            raise CLIError(f"sample {sid!r}: input dim {x.shape[-1]} != model input dim {pre.input_dim}")
    ids = mm.task_ids
    if args.batched:
        preds = mm.classify_batched([x for _, x in rows])
    else:
        preds = [mm.classify(x) for _, x in rows]
    lines = [json.dumps(p.to_json(sid, ids)) for (sid, _), p in zip(rows, preds)]
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_eval(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise CLIError(f"unknown method(s) {', '.join(bad)}; choose from {', '.join(METHODS)}")
    cfg = _build_config(args)
    suite = _suite(args)
    ft = finetuned_accuracies(suite)
    reports = [evaluate(suite, m, cfg, batch_size=args.batch_size, ft_acc=ft, threads=args.threads) for m in methods]
    for r in reports:
        print(r.to_text(), file=sys.stderr)
    payload = [r.to_json() for r in reports]
    _emit(json.dumps(payload if len(payload) > 1 else payload[0], indent=2) + "\n", args.out)
    return 0


def _parse_layers(arg: str | None, names: list[str]) -> list[str] | None:
    if not arg:
        return None
    out = []
    for tok in arg.split(","):
        tok = tok.strip()
        if tok.isdigit():
            k = int(tok)
            if k >= len(names):
                raise CLIError(f"layer index {k} out of range (model has {len(names)} layers)")
            out.append(names[k])
        elif tok in names:
            out.append(tok)
        else:
            raise CLIError(f"unknown layer {tok!r}; have {', '.join(names)}")
    return out


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    suite = _suite(args)
    fm = fixed_merge(suite.pre, suite.finetuned, cfg, task_ids=suite.task_ids)
    layers = _parse_layers(args.layers, suite.pre.layer_names)
    table = layer_sweep(suite, fm.merged.weights, fm.bundles, layers, cfg)
    _emit(table.to_csv(), args.out)
    return 0


def _inspect_file(path: Path, pre: Checkpoint | None) -> dict:
    cont = read_container(path)
    info = {"path": str(path), "bytes": path.stat().st_size, "kind": cont.meta.get("kind", "checkpoint"), "layers": []}
    if cont.by_role("tsv_s"):
        for b in read_bundles(path):
            for name in b.layer_order:
                f = b[name]
                info["layers"].append({"task": b.task_id, "layer": name, "shape": [f.U.shape[0], f.V.shape[0]],
                                       "k": f.rank, "spectrum": [float(s) for s in f.S]})
        info["kind"] = "tsv_bundle"
        return info
    ck = read_checkpoint(path)
    for l in ck.layers:
        row = {"layer": l.name, "shape": list(l.shape), "activation": l.activation, "bias": l.bias is not None}
        if pre is not None:
            d = l.weight.astype(np.float64) - pre.layer(l.name).weight.astype(np.float64)
            row["delta_spectrum"] = [float(s) for s in np.linalg.svd(d, compute_uv=False)]
        info["layers"].append(row)
    info["heads"] = [{"name": h.name, "classes": h.n_classes} for h in ck.heads]
    info["params"] = ck.n_params()
    return info


def _fmt_spec(s, n=6):
    head = " ".join(f"{v:.4g}" for v in s[:n])
    return head + (" ..." if len(s) > n else "")


def cmd_inspect(args) -> int:
    pre = _read_ckpt(args.pre) if args.pre else None
    infos = []
    for path in args.files:
        p = Path(path)
        if not p.exists():
            raise CLIError(f"no such file: {p}")
        infos.append(_inspect_file(p, pre))
    summary = {"files": infos}
    if args.pre:
        pre_bytes = Path(args.pre).stat().st_size
        bundle_bytes = sum(i["bytes"] for i in infos if i["kind"] == "tsv_bundle")
        summary["pre_bytes"] = pre_bytes
        summary["bundle_bytes"] = bundle_bytes
        if bundle_bytes:
            summary["storage_ratio"] = (pre_bytes + bundle_bytes) / pre_bytes
    if args.json:
        print(json.dumps(summary, indent=2))
        return 0
    for i in infos:
        print(f"{i['path']}: {i['kind']}, {i['bytes']} bytes")
        for row in i["layers"]:
            if "k" in row:
                print(f"  {row['task']}/{row['layer']}: {row['shape'][0]}x{row['shape'][1]} k={row['k']} S: {_fmt_spec(row['spectrum'])}")
            else:
                extra = f" delta S: {_fmt_spec(row['delta_spectrum'])}" if "delta_spectrum" in row else ""
                print(f"  {row['layer']}: {row['shape'][0]}x{row['shape'][1]} {row['activation']}{extra}")
        for h in i.get("heads", []):
            print(f"  head {h['name']}: {h['classes']} classes")
    if "storage_ratio" in summary:
        print(f"pretrained {summary['pre_bytes']} bytes + bundles {summary['bundle_bytes']} bytes "
              f"= {summary['storage_ratio']:.3f}x pretrained")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads for evaluation")
    p = argparse.ArgumentParser(prog="massmerge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic suite to a directory")
    _suite_args(g)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("merge", parents=[common], help="fixed merge of task checkpoints into a pretrained one")
    m.add_argument("--pre", required=True)
    m.add_argument("--tasks", nargs="+", required=True)
    m.add_argument("--out", required=True)
    _config_args(m)
    m.set_defaults(func=cmd_merge)

    i = sub.add_parser("infer", parents=[common], help="two-pass adaptive inference over JSON-lines inputs")
    i.add_argument("--pre", required=True)
    i.add_argument("--merged", required=True)
    i.add_argument("--bundles", required=True)
    i.add_argument("--input", required=True, help='JSON lines of {"id": ..., "x": [...]}')
    i.add_argument("--batched", action="store_true", help="route the whole file as one batch")
    i.add_argument("--out", type=Path)
    _config_args(i)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="evaluate methods on a suite")
    _suite_args(e)
    e.add_argument("--methods", default="mass,tsv-m", help=f"comma list from: {', '.join(METHODS)}")
    e.add_argument("--batch-size", type=int, default=25)
    e.add_argument("--out", type=Path)
    _config_args(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="routing accuracy per candidate layer (CSV)")
    _suite_args(s)
    s.add_argument("--layers", help="comma list of layer names or indices")
    s.add_argument("--out", type=Path)
    _config_args(s)
    s.set_defaults(func=cmd_sweep)

    n = sub.add_parser("inspect", parents=[common], help="shapes, spectra and storage totals of MTSV files")
    n.add_argument("files", nargs="+")
    n.add_argument("--pre", help="pretrained checkpoint for delta spectra and the storage ratio")
    n.add_argument("--json", action="store_true")
    n.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.INFO if args.verbose or getattr(args, "batched", False) else logging.WARNING
    logging.basicConfig(level=level, format="%(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (CLIError, MTSVError, TopologyError, RankBudgetError, RankDeficientError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"massmerge {args.command}: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
