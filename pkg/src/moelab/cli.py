"""Command-line front end.

Subcommands:
    train      run the joint training loop from a config file
    eval       score multiple-choice probes with a trained checkpoint
    diagnose   routing-confidence and expert-usage profile of a checkpoint
    gradcheck  finite-difference audit of the full objective's gradients
    aggregate  item-weighted pooling of benchmark subset scores

Every invocation writes a manifest (command, arguments, input digests,
package version, seeds) so a run can be reproduced from its artifacts.
Expected failures surface as a single diagnostic line on stderr and a
nonzero exit code.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import apply_checkpoint, gather_checkpoint, load_checkpoint, save_checkpoint
from .config_io import RunConfig, load_run_config
from .data import generate_synthetic_corpus, load_corpus, save_corpus
from .diagnostics import (
    BenchmarkScore,
    collect_expert_assignments,
    normalized_mutual_information,
    routing_confidence,
    toy_mc_eval,
    weighted_average,
)
from .errors import ConfigError, InputError, MoelabError
from .gradcheck import run_gradcheck
from .model import MoeLoraModel
from .training import train


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path: str, command: str, args: argparse.Namespace,
                    inputs: list[str], outputs: list[str],
                    extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "package_version": __version__,
        "inputs": {p: _sha256(p) for p in inputs if p and os.path.exists(p)},
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


# -- train -------------------------------------------------------------------


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    corpus = generate_synthetic_corpus(cfg.corpus)
    model = MoeLoraModel(cfg.model)

    start_step = 0
    opt_resume = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.configs != cfg.to_dicts():
            raise ConfigError(
                "checkpoint was produced under a different config; "
                "resume requires an identical config file"
            )
        apply_checkpoint(model, ckpt)
        opt_resume = (ckpt.opt_t, ckpt.opt_arrays)
        start_step = ckpt.step

    metrics_path = os.path.join(args.out, "metrics.jsonl")
    result = train(model, corpus, cfg.train, cfg.contrastive,
                   start_step=start_step, opt_resume=opt_resume,
                   stop_step=args.stop_step, metrics_path=metrics_path)

    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(
        gather_checkpoint(model, result.final_step, result.opt_state_t,
                          result.opt_arrays, cfg.to_dicts()),
        ckpt_path,
    )
    corpus_path = os.path.join(args.out, "corpus.npz")
    save_corpus(corpus, corpus_path)
    _write_manifest(
        os.path.join(args.out, "manifest.json"), "train", args,
        inputs=[args.config] + ([args.resume] if args.resume else []),
        outputs=[metrics_path, ckpt_path, corpus_path],
        extra={"seeds": {"train": cfg.train.seed, "model": cfg.model.seed,
                         "corpus": cfg.corpus.seed}},
    )
    last = result.records[-1] if result.records else {}
    print(f"trained to step {result.final_step}: "
          f"lm={last.get('lm', float('nan')):.4f} "
          f"total={last.get('total', float('nan')):.4f} -> {ckpt_path}")
    return 0


def _load_model(ckpt_path: str) -> tuple[MoeLoraModel, RunConfig]:
    ckpt = load_checkpoint(ckpt_path)
    cfg = RunConfig.from_dicts(ckpt.configs)
    model = MoeLoraModel(cfg.model)
    apply_checkpoint(model, ckpt)
    return model, cfg


# -- eval ---------------------------------------------------------------------


def _cmd_eval(args: argparse.Namespace) -> int:
    model, _cfg = _load_model(args.ckpt)
    corpus = load_corpus(args.data)
    result = toy_mc_eval(model, corpus, batch_size=args.batch_size)
    _write_manifest(args.manifest, "eval", args,
                    inputs=[args.ckpt, args.data], outputs=[])
    print(f"probe_accuracy={result.accuracy:.4f} "
          f"scored={result.num_scored} skipped={result.num_skipped}")
    return 0


# -- diagnose -------------------------------------------------------------------


def _cmd_diagnose(args: argparse.Namespace) -> int:
    model, _cfg = _load_model(args.ckpt)
    corpus = load_corpus(args.data)
    ids = np.arange(len(corpus))
    records = []
    for lo in range(0, len(ids), args.batch_size):
        batch = ids[lo:lo + args.batch_size]
        res = model.lm_forward(corpus.tokens[batch][:, :-1], collect=True)
        for li, cap in enumerate(res.layers):
            records.append((li, cap.router_out))
    report = routing_confidence(records)

    p_bar = {}
    for li, rout in records:
        gates = rout.gates.data.reshape(-1, rout.gates.shape[-1])
        cur, cnt = p_bar.get(li, (np.zeros(gates.shape[1]), 0))
        p_bar[li] = (cur + gates.sum(axis=0), cnt + gates.shape[0])

    lines = []
    for li, conf in enumerate(report.per_layer_conf):
        mass, count = p_bar[li]
        lines.append({
            "layer": li,
            "conf": conf,
            "tokens": report.per_layer_tokens[li],
            "p_bar": [float(x) for x in mass / count],
        })
    summary = {"global_conf": report.global_conf,
               "token_count": report.token_count}
    if len(np.unique(corpus.task_id)) > 1:
        experts, tasks = collect_expert_assignments(model, corpus,
                                                    batch_size=args.batch_size)
        summary["task_expert_nmi"] = normalized_mutual_information(experts, tasks)

    out_lines = [json.dumps(l) for l in lines] + [json.dumps(summary)]
    for line in out_lines:
        print(line)
    outputs = []
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("\n".join(out_lines) + "\n")
        outputs.append(args.out)
    _write_manifest(args.manifest, "diagnose", args,
                    inputs=[args.ckpt, args.data], outputs=outputs)
    return 0


# -- gradcheck ---------------------------------------------------------------------


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.config:
        cfg = load_run_config(args.config)
        model_cfg, co_cfg = cfg.model, cfg.contrastive
        weights = cfg.train.loss_weights
    else:
        model_cfg, co_cfg, weights = None, None, None
    result = run_gradcheck(model_cfg, co_cfg, weights, seed=args.seed)
    _write_manifest(args.manifest, "gradcheck", args,
                    inputs=[args.config] if args.config else [], outputs=[])
    print(f"max_rel_error={result.max_rel_error:.3e} "
          f"coordinates={result.num_coordinates} tol={args.tol:.1e}")
    if result.max_rel_error >= args.tol:
        print(f"error: gradient check failed ({result.max_rel_error:.3e} "
              f">= {args.tol:.1e})", file=sys.stderr)
        return 1
    return 0


# -- aggregate ------------------------------------------------------------------------


def parse_scores_file(path: str) -> list[BenchmarkScore]:
    """One subset per line: `name count accuracy`, `#` starts a comment."""
    scores = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for ln, line in enumerate(f, start=1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                parts = body.split()
                if len(parts) != 3:
                    raise InputError(
                        f"{path}:{ln}: expected `name count accuracy`, got {body!r}"
                    )
                try:
                    scores.append(BenchmarkScore(name=parts[0], count=int(parts[1]),
                                                 accuracy=float(parts[2])))
                except ValueError as e:
                    raise InputError(f"{path}:{ln}: {e}") from e
    except OSError as e:
        raise InputError(f"cannot read scores file {path}: {e}") from e
    if not scores:
        raise InputError(f"no scores in {path}")
    return scores


def _cmd_aggregate(args: argparse.Namespace) -> int:
    scores = parse_scores_file(args.scores)
    avg = weighted_average(scores)
    _write_manifest(args.manifest, "aggregate", args,
                    inputs=[args.scores], outputs=[])
    print(f"{avg:.2f}")
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="desk-scale contrastive-routed LoRA-expert lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a YAML run config")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-step", type=int, default=None,
                   help="pause after this step (schedule still spans total_steps)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score probes with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="corpus .npz file")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--manifest", default="moelab-manifest.json")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("diagnose", help="routing profile of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="corpus .npz file")
    p.add_argument("--out", help="write the profile records here as well")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--manifest", default="moelab-manifest.json")
    p.set_defaults(func=_cmd_diagnose)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--config", help="run config (model/contrastive sections)")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--manifest", default="moelab-manifest.json")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("aggregate", help="pool benchmark subset scores")
    p.add_argument("--scores", required=True,
                   help="text file: one `name count accuracy` line per subset")
    p.add_argument("--manifest", default="moelab-manifest.json")
    p.set_defaults(func=_cmd_aggregate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MoelabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
