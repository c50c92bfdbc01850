"""Command-line surface.

Subcommands: gen-data, train, eval, decode, align, gradcheck, bench.
Exit codes: 0 success, 1 usage error, 2 runtime/data error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path


from . import gradcheck, net, synthdata, train as train_mod
from .ctc import GlossVocab
from .synthdata import GenConfig
from .train import TrainConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; we reserve 2 for
    runtime failures and use 1 for usage."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise UsageError(message)


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _dataclass_from(cls, data: dict, label: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise UsageError(f"unknown {label} config keys: {sorted(unknown)}")
    return cls(**data)


def build_parser() -> _Parser:
    parser = _Parser(prog="svtc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--config", type=str, default=None, help="JSON config file")
    common.add_argument("--out", type=str, default=None, help="output directory")

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus")
    p.add_argument("--heatmaps", action="store_true", help="render keypoint heatmaps")

    p = sub.add_parser("train", parents=[common], help="train a model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--align-warmup", type=int, default=None)
    p.add_argument("--lambda-ctc", type=float, default=None)
    p.add_argument("--lambda-spn", type=float, default=None)
    p.add_argument("--lambda-g", type=float, default=None)
    p.add_argument("--lambda-s", type=float, default=None)
    p.add_argument("--fusion", choices=["mlp", "conv", "attn"], default=None)
    p.add_argument("--no-frame-rate-aug", action="store_true")

    for name, help_text in (
        ("eval", "score a split with a checkpoint"),
        ("decode", "write decoded gloss lines for a split"),
        ("align", "dump alignment paths and similarity matrices"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--corpus", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", default="dev", choices=["train", "dev", "test"])
        if name in ("eval", "decode"):
            p.add_argument("--head", default="avg", choices=["v", "k", "o", "c", "avg"])
            p.add_argument("--beam-width", type=int, default=5)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit")
    p.add_argument("--skip-model", action="store_true", help="primitives only")

    p = sub.add_parser("bench", parents=[common], help="time training and decoding")
    p.add_argument("--corpus", default=None)
    p.add_argument("--steps", type=int, default=20)

    return parser


def _train_config(args) -> TrainConfig:
    data = {}
    if args.config:
        raw = _load_json(args.config)
        data = raw.get("train", raw) if isinstance(raw, dict) else {}
    tcfg = _dataclass_from(TrainConfig, data, "train")
    override_map = {
        "epochs": args.epochs,
        "lr0": args.lr0,
        "weight_decay": args.weight_decay,
        "batch_size": args.batch_size,
        "align_warmup_epochs": args.align_warmup,
        "lambda_ctc": args.lambda_ctc,
        "lambda_spn": args.lambda_spn,
        "lambda_g": args.lambda_g,
        "lambda_s": args.lambda_s,
        "fusion": args.fusion,
        "seed": args.seed,
    }
    for key, value in override_map.items():
        if value is not None:
            setattr(tcfg, key, value)
    if args.no_frame_rate_aug:
        tcfg.frame_rate_aug = False
    tcfg.__post_init__()
    return tcfg


def cmd_gen_data(args) -> int:
    if not args.out:
        raise UsageError("gen-data requires --out")
    data = _load_json(args.config) if args.config else {}
    cfg = _dataclass_from(GenConfig, data, "generation")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.heatmaps:
        cfg.use_heatmaps = True
    records = synthdata.generate_corpus(cfg, args.out)
    print(f"wrote {len(records)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    if not args.out:
        raise UsageError("train requires --out")
    tcfg = _train_config(args)
    model_overrides = {}
    if args.config:
        raw = _load_json(args.config)
        if isinstance(raw, dict) and "model" in raw:
            model_overrides = dict(raw["model"])
    artifacts = train_mod.train(args.corpus, args.out, tcfg, model_overrides)
    print(
        f"best dev WER {artifacts.best_dev_wer:.4f}; "
        f"checkpoint at {artifacts.checkpoint_path}"
    )
    return 0


def cmd_eval(args) -> int:
    report, _ = train_mod.evaluate_corpus(
        args.checkpoint, args.corpus, split=args.split, width=args.beam_width, head=args.head
    )
    line = json.dumps(report.to_dict(), sort_keys=True)
    print(line)
    # deletion/insertion rates as percentages of the reference length
    print(
        f"wer {100 * report.wer:.1f}%  del/ins {100 * report.del_rate:.1f}/"
        f"{100 * report.ins_rate:.1f}%",
        file=sys.stderr,
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"wer_{args.split}.json").write_text(line + "\n")
    return 0


def cmd_decode(args) -> int:
    _, decodes = train_mod.evaluate_corpus(
        args.checkpoint, args.corpus, split=args.split, width=args.beam_width, head=args.head
    )
    lines = [f"{sid}\t{' '.join(glosses)}" for sid, glosses in decodes]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"decodes_{args.split}.tsv").write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_align(args) -> int:
    if not args.out:
        raise UsageError("align requires --out")
    summary = train_mod.dump_alignments(args.checkpoint, args.corpus, args.split, args.out)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = gradcheck.run_suite(seed=seed, include_model=not args.skip_model)
    for res in results:
        print(res.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 2


def cmd_bench(args) -> int:
    import tempfile

    seed = args.seed if args.seed is not None else 0
    corpus = args.corpus
    tmp = None
    if corpus is None:
        tmp = tempfile.TemporaryDirectory()
        cfg = GenConfig(n_train=32, n_dev=8, n_test=8, seed=seed)
        synthdata.generate_corpus(cfg, tmp.name)
        corpus = tmp.name
    try:
        meta = synthdata.load_meta(corpus)
        vocab = GlossVocab(tuple(meta["glosses"]))
        gen_cfg = meta.get("config", {})
        model = net.Model(
            net.ModelConfig(
                vocab_size=vocab.size,
                in_dim_v=gen_cfg.get("d_v_in", 16),
                in_dim_k=gen_cfg.get("d_k_in", 12),
                in_dim_o=gen_cfg.get("d_o_in", 16),
                seed=seed,
            ),
            vocab,
        )
        pairs = synthdata.load_split(corpus, "train")
        samples = [s for s, _ in pairs]
        optimizer = train_mod.Adam(model.parameters())
        weights = net.LossWeights()

        from . import ndgrad

        t0 = time.perf_counter()
        steps = 0
        while steps < args.steps:
            sample = samples[steps % len(samples)]
            optimizer.zero_grad()
            outputs = model.forward(sample)
            terms = net.compute_losses(outputs, vocab.ids(sample.glosses), weights, True)
            ndgrad.backward(terms.total)
            optimizer.step(1e-3, 1e-3)
            steps += 1
        train_time = time.perf_counter() - t0

        t0 = time.perf_counter()
        for sample in samples[: args.steps]:
            train_mod.decode_sample(model, sample)
        decode_time = time.perf_counter() - t0
        n_decoded = min(args.steps, len(samples))

        print(
            json.dumps(
                {
                    "train_steps_per_sec": steps / train_time,
                    "decode_samples_per_sec": n_decoded / decode_time,
                },
                sort_keys=True,
            )
        )
    finally:
        if tmp is not None:
            tmp.cleanup()
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "align": cmd_align,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
