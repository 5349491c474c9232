"""Command line for the MOF text and structure encoders.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import ConfigError, MoformerError
from .mofid import MAX_LEN, Vocabulary, encode, parse_mofid, tokenize_mofid

log = logging.getLogger("moformer")


def _deterministic(enabled: bool):
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="YAML run config (defaults when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. finetune.epochs=5")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: under output_dir)")


def _config(args, extra: dict[str, object] | None = None):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    for key, value in (extra or {}).items():
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    return load_config(args.config, overrides)


def run_build_vocab(args) -> int:
    vocab = pipeline.cmd_build_vocab(args.manifest, args.out_path)
    print(f"wrote {len(vocab)} tokens to {args.out_path}")
    return 0


def run_tokenize(args) -> int:
    m = parse_mofid(args.mofid)
    tokens = tokenize_mofid(m)
    print(f"smiles parts : {list(m.smiles_parts)}")
    print(f"topology     : {m.topology}   catenation: {m.catenation}   name: {m.name}")
    print(f"tokens ({len(tokens)}): {' '.join(tokens)}")
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
        seq = encode(m, vocab, args.max_len)
        n = seq.n_tokens
        print(f"ids ({n} non-PAD of {len(seq)}): {seq.ids[:n].tolist()}")
    return 0


def run_pretrain(args) -> int:
    cfg = _config(args, {"data.pretrain_manifest": args.manifest, "pretrain.max_steps": args.max_steps})
    with _deterministic(cfg.deterministic):
        res = pipeline.cmd_pretrain(cfg, args.out)
    print(f"{res['steps']} steps; checkpoints in {res['dir']}")
    return 0


def run_finetune(args) -> int:
    cfg = _config(args, {
        "data.finetune_manifest": args.manifest,
        "finetune.encoder": args.encoder,
        "finetune.init": args.init,
        "finetune.train_subset": args.train_subset,
        "finetune.epochs": args.epochs,
        "finetune.repeats": args.repeats,
    })
    with _deterministic(cfg.deterministic):
        results = pipeline.cmd_finetune(cfg, args.out)
    for r in results:
        print(f"seed {r['seed']}: train={r['n_train']} best_epoch={r['best_epoch']} "
              f"val_mae={r['val_mae']:.6g} test_mae={r['test_mae']:.6g} -> {r['dir']}")
    if len(results) > 1:
        import numpy as np

        maes = np.array([r["test_mae"] for r in results])
        print(f"test MAE over {len(maes)} runs: {maes.mean():.6g} ± {maes.std():.6g}")
    return 0


def run_evaluate(args) -> int:
    score = pipeline.cmd_evaluate(args.checkpoint, args.manifest, args.out_csv)
    print(f"MAE {score:.6g}")
    return 0


def run_embed(args) -> int:
    emb = pipeline.cmd_embed(args.checkpoint, args.manifest, args.out_csv)
    print(f"wrote {emb.shape[0]} embeddings of width {emb.shape[1]} to {args.out_csv}")
    return 0


def run_attn_export(args) -> int:
    data = pipeline.cmd_attn_export(args.checkpoint, args.mofid, args.out_path)
    print(f"wrote {len(data['records'])} attention maps over {len(data['tokens'])} tokens")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a token vocabulary from a manifest")
    p.add_argument("manifest")
    p.add_argument("out_path")
    p.set_defaults(func=run_build_vocab)

    p = sub.add_parser("tokenize", help="show how a MOFid is tokenized")
    p.add_argument("mofid")
    p.add_argument("--vocab")
    p.add_argument("--max-len", type=int, default=MAX_LEN)
    p.set_defaults(func=run_tokenize)

    p = sub.add_parser("pretrain", help="joint Barlow Twins pretraining")
    _add_config_args(p)
    p.add_argument("--manifest")
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=run_pretrain)

    p = sub.add_parser("finetune", help="fine-tune an encoder for regression")
    _add_config_args(p)
    p.add_argument("--manifest")
    p.add_argument("--encoder", choices=["moformer", "cgcnn"])
    p.add_argument("--init", help="pretrained encoder checkpoint")
    p.add_argument("--train-subset", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--repeats", type=int)
    p.set_defaults(func=run_finetune)

    p = sub.add_parser("evaluate", help="MAE and predictions of a fine-tuned checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("out_csv")
    p.set_defaults(func=run_evaluate)

    p = sub.add_parser("embed", help="export encoder representations as CSV")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("out_csv")
    p.set_defaults(func=run_embed)

    p = sub.add_parser("attn-export", help="export per-head attention maps for one MOFid")
    p.add_argument("checkpoint")
    p.add_argument("mofid")
    p.add_argument("out_path")
    p.set_defaults(func=run_attn_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else ConfigError.exit_code
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except MoformerError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
