"""Command-line entry point: ``mmea {synth,train,induce-pivots,evaluate,ablate}``.

Training hyperparameters live in the task manifest next to the file paths
(flat ``key = value``); flags override the few settings that change between
runs of one task. Every command refuses to overwrite an existing output file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from mmea import kgdata
from mmea.alignloss import FUSED, LossConfig, cosine_matrix
from mmea.encoders import MODALITY_ORDER, STRUCTURE
from mmea.inference import stratified_evaluate
from mmea.seeding import ILConfig, induce_visual_pivots, threshold_pivots
from mmea.synth import SynthConfig, make_task
from mmea.trainer import (
    TrainConfig, evaluate_state, fused_similarity, load_checkpoint, save_checkpoint, train,
)

log = logging.getLogger("mmea")

# Desk-scale training settings written into every synthetic manifest.
SYNTH_TRAINING = {
    "gcn_dims": "32,32,16",
    "out_dim": "16",
    "learning_rate": "0.0001",
    "structure_lr": "0.1",
    "relu_last": "false",
}


class CLIError(Exception):
    pass


# ------------------------------------------------------------ config

def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise CLIError(f"not a boolean: {s!r}")


def train_config(manifest, seed=0):
    """Map manifest keys onto a :class:`TrainConfig` (unknown keys are ignored)."""
    kw = {"rng_seed": int(seed)}
    floats = ("learning_rate", "structure_lr", "weight_decay", "adam_eps")
    ints = ("batch_size", "base_epochs", "il_epochs")
    for k in floats:
        if k in manifest and str(manifest[k]).lower() != "none":
            kw[k] = float(manifest[k])
    for k in ints:
        if k in manifest:
            kw[k] = int(manifest[k])
    if "relu_last" in manifest:
        kw["relu_last"] = _bool(manifest["relu_last"])
    if "proposal_csls" in manifest:
        kw["proposal_csls"] = _bool(manifest["proposal_csls"])
    if "gcn_dims" in manifest:
        kw["gcn_dims"] = tuple(int(x) for x in str(manifest["gcn_dims"]).split(","))
    out = {}
    for m in MODALITY_ORDER:
        key = f"out_dim_{m}"
        if key in manifest:
            out[m] = int(manifest[key])
        elif "out_dim" in manifest:
            out[m] = int(manifest["out_dim"])
    kw["out_dims"] = out
    kw["il"] = ILConfig(int(manifest.get("K_e", 5)), int(manifest.get("K_s", 10)))
    alpha = dict(LossConfig().alpha)
    for term in (STRUCTURE, *MODALITY_ORDER, FUSED):
        if f"alpha_{term}" in manifest:
            alpha[term] = float(manifest[f"alpha_{term}"])
    kw["loss"] = LossConfig(alpha, float(manifest.get("beta", 10.0)))
    if "disable" in manifest:
        kw["disabled"] = tuple(x.strip() for x in str(manifest["disable"]).split(",") if x.strip())
    return TrainConfig(**kw)


def _apply_flags(cfg, args):
    if getattr(args, "disable", None):
        cfg = replace(cfg, disabled=tuple(sorted(set(cfg.disabled) | set(args.disable))))
    if getattr(args, "no_il", False):
        cfg = replace(cfg, il_epochs=0)
    if getattr(args, "unsupervised", False):
        n = args.pivots[0] if args.pivots else None
        cfg = replace(cfg, unsupervised=True, visual_pivot_count=n,
                      visual_pivot_threshold=args.pivot_threshold)
    return cfg


def _load(args):
    if not args.config:
        raise CLIError("--config is required")
    path = Path(args.config)
    if not path.is_file():
        raise CLIError(f"config file not found: {path}")
    return kgdata.read_config(path), kgdata.load_task(path)


def _seeds(args, manifest):
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise CLIError(f"bad --seeds value: {args.seeds!r}") from None
    return [int(manifest.get("seed", 0))]


# ------------------------------------------------------------ output

class Output:
    """Output directory that never overwrites an existing file."""

    def __init__(self, root):
        if root is None:
            raise CLIError("--out is required")
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        p = self.root / name
        if p.exists():
            raise CLIError(f"refusing to overwrite existing output: {p}")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def text(self, name, content):
        self.path(name).write_text(content, encoding="utf-8")

    def json(self, name, obj):
        self.text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _summary(per_seed):
    h1 = np.array([r["h1"] for r in per_seed.values()])
    return {
        "per_seed": per_seed,
        "mean": {k: float(np.mean([r[k] for r in per_seed.values()])) for k in ("h1", "h10", "mrr")},
        "variance": {k: float(np.var([r[k] for r in per_seed.values()])) for k in ("h1", "h10", "mrr")},
        "n_seeds": len(h1),
    }


def _print_summary(label, summary):
    m, v = summary["mean"], summary["variance"]
    print(f"{label}: H@1 {m['h1']:.4f} ± {v['h1']:.2e}  H@10 {m['h10']:.4f}  "
          f"MRR {m['mrr']:.4f}  ({summary['n_seeds']} seed(s))")


def _eval_kw(args):
    return {"use_csls": not args.no_csls, "k": args.csls_k}


def _run_one(task, cfg, out, prefix, args):
    state = train(task, cfg)
    save_checkpoint(state, out.path(f"{prefix}checkpoint"))
    out.text(f"{prefix}history.csv", state.history_csv())
    report = stratified_evaluate(fused_similarity(state), task.test_pivots, task, **_eval_kw(args))
    out.text(f"{prefix}report.json", report.to_json() + "\n")
    out.text(f"{prefix}report.csv", report.to_csv())
    if state.induced:
        kgdata.write_pivots(out.path(f"{prefix}induced_pivots.tsv"),
                            [(s, t) for s, t, _ in state.induced],
                            [sc for _, _, sc in state.induced])
    return report


# ------------------------------------------------------------ commands

def cmd_synth(args):
    params = kgdata.read_config(args.config) if args.config else {}
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [int(params.get("seed", 0))]
    out = Output(args.out)
    for seed in seeds:
        try:
            cfg = SynthConfig.from_dict({**params, "seed": seed})
        except (TypeError, ValueError) as e:
            raise CLIError(f"invalid synthetic parameters: {e}") from None
        task, perm = make_task(cfg)
        sub = out.root / (f"seed_{seed}" if len(seeds) > 1 else "")
        for name in ("task.cfg", "gold_pivots.tsv"):
            if (sub / name).exists():
                raise CLIError(f"refusing to overwrite existing output: {sub / name}")
        extra = {**SYNTH_TRAINING, "seed": str(seed), "gold_pivots": "gold_pivots.tsv"}
        extra.update({k: v for k, v in params.items() if k not in ("seed",)})
        path = kgdata.save_task(task, sub, extra)
        kgdata.write_pivots(sub / "gold_pivots.tsv", np.column_stack([np.arange(len(perm)), perm]))
        print(f"wrote {path}")
    return 0


def cmd_train(args):
    manifest, task = _load(args)
    out = Output(args.out)
    seeds = _seeds(args, manifest)
    per_seed = {}
    for seed in seeds:
        cfg = _apply_flags(train_config(manifest, seed), args)
        prefix = f"seed_{seed}/" if len(seeds) > 1 else ""
        report = _run_one(task, cfg, out, prefix, args)
        per_seed[str(seed)] = report.to_dict()
        print(f"seed {seed}: H@1 {report.hits_at_1:.4f}  H@10 {report.hits_at_10:.4f}  MRR {report.mrr:.4f}")
    summary = _summary(per_seed)
    out.json("summary.json", summary)
    _print_summary("train", summary)
    return 0


def _gold(manifest, task, base):
    if "gold_pivots" in manifest:
        return kgdata.read_pivots(base / manifest["gold_pivots"])
    pairs = task.gold_pairs()
    return pairs if len(pairs) else None


def cmd_induce_pivots(args):
    manifest, task = _load(args)
    if "image" not in task.features:
        raise CLIError("induce-pivots needs image features on both graphs")
    out = Output(args.out)
    fs, ft = task.features["image"]
    rows, cols = np.flatnonzero(fs.present), np.flatnonzero(ft.present)
    S = cosine_matrix(fs.matrix[rows], ft.matrix[cols])
    gold = _gold(manifest, task, Path(args.config).resolve().parent)
    gold_set = set(map(tuple, gold.tolist())) if gold is not None else None
    counts = args.pivots or [min(S.shape)]
    lines = ["n\tthreshold\temitted\tprecision"]
    for n in counts:
        if n > min(S.shape):
            raise CLIError(f"--pivots {n} exceeds the {min(S.shape)} entities with images")
        piv = induce_visual_pivots(S, n)
        if args.pivot_threshold is not None:
            piv = threshold_pivots(piv, args.pivot_threshold)
        pairs = [(int(rows[i]), int(cols[j])) for i, j, _ in piv]
        name = f"pivots_n{n}.tsv" if args.pivot_threshold is None else f"pivots_n{n}_t{args.pivot_threshold}.tsv"
        kgdata.write_pivots(out.path(name), pairs, [s for _, _, s in piv])
        prec = float("nan")
        if gold_set and pairs:
            prec = float(np.mean([p in gold_set for p in pairs]))
        lines.append(f"{n}\t{args.pivot_threshold if args.pivot_threshold is not None else ''}\t"
                     f"{len(pairs)}\t{prec!r}")
        print(f"n={n}: {len(pairs)} pivots, precision {prec:.4f}")
    out.text("precision.tsv", "\n".join(lines) + "\n")
    return 0


def cmd_evaluate(args):
    manifest, task = _load(args)
    if not args.checkpoint:
        raise CLIError("evaluate needs --checkpoint DIR")
    ck = Path(args.checkpoint)
    if not (ck / "state.cfg").is_file():
        raise CLIError(f"no checkpoint at {ck}")
    out = Output(args.out)
    state = load_checkpoint(ck, task, train_config(manifest))
    report = stratified_evaluate(fused_similarity(state), task.test_pivots, task, **_eval_kw(args))
    out.text("report.json", report.to_json() + "\n")
    out.text("report.csv", report.to_csv())
    print(f"H@1 {report.hits_at_1:.4f}  H@10 {report.hits_at_10:.4f}  MRR {report.mrr:.4f}")
    return 0


def cmd_ablate(args):
    manifest, task = _load(args)
    out = Output(args.out)
    seeds = _seeds(args, manifest)
    variants = [("full", ())]
    if args.disable:
        variants.append(("-" + "-".join(args.disable), tuple(args.disable)))
    else:
        variants += [(f"-{m}", (m,)) for m in (STRUCTURE, *task.modalities)]
    base_args = argparse.Namespace(**{**vars(args), "disable": None})
    rows = ["variant\tseed\th1\th10\tmrr"]
    summaries = {}
    for label, disabled in variants:
        per_seed = {}
        for seed in seeds:
            cfg = _apply_flags(train_config(manifest, seed), base_args)
            cfg = replace(cfg, disabled=tuple(sorted(set(cfg.disabled) | set(disabled))))
            state = train(task, cfg)
            report = evaluate_state(state, task, **_eval_kw(args))
            per_seed[str(seed)] = report.to_dict()
            rows.append(f"{label}\t{seed}\t{report.hits_at_1!r}\t{report.hits_at_10!r}\t{report.mrr!r}")
        summaries[label] = _summary(per_seed)
        _print_summary(label, summaries[label])
    out.text("ablation.tsv", "\n".join(rows) + "\n")
    out.json("summary.json", summaries)
    return 0


COMMANDS = {
    "train": cmd_train,
    "induce-pivots": cmd_induce_pivots,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "synth": cmd_synth,
}


def _counts(s):
    try:
        values = [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or N1,N2,...: {s!r}") from None
    if not values or min(values) < 0:
        raise argparse.ArgumentTypeError("pivot counts must be non-negative")
    return values


def build_parser():
    p = argparse.ArgumentParser(prog="mmea", description="Multi-modal entity alignment.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="task manifest (synth: generator parameters)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", help='comma-separated seeds, e.g. "1,2,3"')
    p.add_argument("--disable", action="append", choices=[STRUCTURE, *MODALITY_ORDER],
                   help="drop a modality (repeatable)")
    p.add_argument("--unsupervised", action="store_true", help="seed training from visual pivots")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--pivots", type=_counts, help="number of visual pivots (induce-pivots: a list)")
    group.add_argument("--pivot-threshold", type=float, help="minimum visual similarity for a pivot")
    p.add_argument("--csls-k", type=int, default=3)
    p.add_argument("--no-csls", action="store_true")
    p.add_argument("--no-il", action="store_true", help="skip the iterative learning phase")
    p.add_argument("--checkpoint", help="checkpoint directory (evaluate)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _limit_threads():
    n = os.environ.get("MMEA_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _limit_threads()
        try:
            return COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (CLIError, kgdata.TaskError, FileNotFoundError, ValueError) as e:
        print(f"mmea {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
