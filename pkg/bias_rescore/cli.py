#!/usr/bin/env python3

# stdlib
import argparse
import logging
import sys
from pathlib import Path
from typing import Callable

# 3p
import torch
import yaml
from pydantic import ValidationError

# project
from bias_rescore.config import RunConfig, load_config, write_resolved_config
from bias_rescore.datagen import (
    AblationMode,
    Corpus,
    entity_pool,
    few_shot_pool,
    generate_corpus,
    ingest_annotated,
    read_corpus,
    split_ingested,
    write_corpus,
)
from bias_rescore.evaluation import (
    corpus_wer,
    evaluate,
    export_attention,
    oracle_wer,
    sweep_list_length,
    wer,
    write_report,
    write_sweep,
)
from bias_rescore.model import count_parameters, load_checkpoint, save_checkpoint
from bias_rescore.prompting import BiasingList, build_prompt, load_biasing_list
from bias_rescore.rescoring import RescoreMode
from bias_rescore.training import train


log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

MODEL_FILE = "model.pt"
VOCAB_FILE = "vocab.json"
TRAIN_LOG_FILE = "train_log.jsonl"
TRAIN_CORPUS = "train.jsonl"
TEST_CORPUS = "test.jsonl"


def _progress() -> bool:
    return sys.stderr.isatty()


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def gen_data_command(args: argparse.Namespace, config: RunConfig) -> None:
    """Generate (or ingest) train/test corpora."""
    gen = config.gen
    if args.ablation:
        gen = gen.model_copy(update={"ablation_mode": AblationMode(args.ablation)})
    out = _out_dir(config)

    corpus: Corpus
    if args.ingest:
        corpus = split_ingested(ingest_annotated(args.ingest), gen)
    else:
        corpus = generate_corpus(gen)
    write_corpus(out / TRAIN_CORPUS, corpus.train)
    write_corpus(out / TEST_CORPUS, corpus.test)
    write_resolved_config(config.model_copy(update={"gen": gen}), out)

    if corpus.test:
        baseline = corpus_wer(
            wer(u.nbest.reference, u.nbest.hypotheses[0].text) for u in corpus.test
        )
        oracle = corpus_wer(oracle_wer(u.nbest) for u in corpus.test)
        log.info(f"Test first-pass WER {baseline.wer:.4f}, oracle WER {oracle.wer:.4f}")
    log.info(f"Wrote {len(corpus.train)} train / {len(corpus.test)} test utterances to {out}")


def train_command(args: argparse.Namespace, config: RunConfig) -> None:
    """Train a model, or resume / fine-tune from a checkpoint."""
    out = _out_dir(config)
    corpus_path = Path(args.corpus or out / TRAIN_CORPUS)
    corpus = read_corpus(corpus_path)
    destination = out / MODEL_FILE

    model = vocab = optimizer_state = None
    start_step = start_epoch = 0
    mcfg = config.model
    if args.resume and args.init_from:
        raise ValueError("--resume and --init-from are mutually exclusive")
    if args.resume:
        if Path(args.resume).resolve() == destination.resolve():
            raise ValueError(f"--resume would overwrite {destination}; pass a different --out")
        ckpt = load_checkpoint(args.resume)
        model, vocab = ckpt.model, ckpt.vocab
        start_step, start_epoch = ckpt.step, ckpt.epoch
        optimizer_state = ckpt.optimizer_state
        mcfg = ckpt.model.config
        log.info(f"Resuming from {args.resume} at step {start_step}")
    elif args.init_from:
        ckpt = load_checkpoint(args.init_from)
        model, vocab = ckpt.model, ckpt.vocab
        mcfg = config.model.model_copy(update={"vocab_size": vocab.vocab_size})
        log.info(f"Fine-tuning from {args.init_from}")

    result = train(
        corpus,
        mcfg,
        config.train,
        vocab=vocab,
        model=model,
        log_path=out / TRAIN_LOG_FILE,
        start_step=start_step,
        start_epoch=start_epoch,
        optimizer_state=optimizer_state,
        progress=_progress(),
    )
    save_checkpoint(
        destination,
        result.model,
        result.vocab,
        step=result.step,
        epoch=result.epoch,
        optimizer_state=result.optimizer_state,
    )
    result.vocab.save(out / VOCAB_FILE)
    write_resolved_config(config, out)
    log.info(
        f"Trained {count_parameters(result.model)} parameters for {result.step} steps"
    )


def _modes(requested: list[str] | None, default: list[RescoreMode]) -> list[RescoreMode]:
    if requested is None:
        return list(default)
    return [RescoreMode(m) for m in requested]


def eval_command(args: argparse.Namespace, config: RunConfig) -> None:
    """Rescore a corpus under each mode and write the WER report."""
    out = _out_dir(config)
    ckpt = load_checkpoint(args.checkpoint or out / MODEL_FILE)
    corpus_path = Path(args.corpus or out / TEST_CORPUS)
    corpus = read_corpus(corpus_path)
    modes = _modes(args.modes, config.rescoring.modes)

    sibling_train = corpus_path.parent / TRAIN_CORPUS
    if args.few_shot_pool:
        pool = few_shot_pool(read_corpus(args.few_shot_pool))
    elif sibling_train.exists() and sibling_train.resolve() != corpus_path.resolve():
        pool = few_shot_pool(read_corpus(sibling_train))
    else:
        pool = few_shot_pool(corpus)

    report, outputs = evaluate(
        ckpt.model,
        ckpt.vocab,
        corpus,
        modes,
        beta=config.rescoring.beta,
        few_shot_pool=pool,
        few_shot_k=config.rescoring.few_shot_k,
        seed=config.seed,
        threads=args.threads,
        progress=_progress(),
    )
    report_dir = out / f"eval-{corpus_path.stem}"
    write_report(report, report_dir, outputs)
    write_resolved_config(config, report_dir)


def sweep_command(args: argparse.Namespace, config: RunConfig) -> None:
    """WER as a function of biasing-list length."""
    out = _out_dir(config)
    ckpt = load_checkpoint(args.checkpoint or out / MODEL_FILE)
    corpus_path = Path(args.corpus or out / TEST_CORPUS)
    corpus = read_corpus(corpus_path)
    pool_sources = list(corpus)
    sibling_train = corpus_path.parent / TRAIN_CORPUS
    if sibling_train.exists() and sibling_train.resolve() != corpus_path.resolve():
        pool_sources += read_corpus(sibling_train)

    rows = sweep_list_length(
        ckpt.model,
        ckpt.vocab,
        corpus,
        args.lengths or config.sweep.lengths,
        _modes(args.modes, config.sweep.modes),
        entity_pool(pool_sources),
        beta=config.rescoring.beta,
        seed=config.seed,
        threads=args.threads,
        progress=_progress(),
    )
    sweep_dir = out / "sweep"
    path = write_sweep(rows, sweep_dir)
    write_resolved_config(config, sweep_dir)
    log.info(f"Wrote sweep table to {path}")


def export_attention_command(args: argparse.Namespace, config: RunConfig) -> None:
    """Dump per-layer, per-head attention for one prompt."""
    out = _out_dir(config)
    ckpt = load_checkpoint(args.checkpoint or out / MODEL_FILE)
    biasing_list = BiasingList()
    if args.biasing_list:
        try:
            biasing_list = load_biasing_list(args.biasing_list)
        except ValidationError as e:
            raise ValueError(f"invalid biasing list {args.biasing_list}: {e}") from e
    prompt = build_prompt([], biasing_list, args.sentence, ckpt.vocab)
    layers = args.layers if args.layers is not None else range(ckpt.model.config.n_layers)
    attention_dir = out / "attention"
    export_attention(ckpt.model, ckpt.vocab, prompt, list(layers), attention_dir)
    write_resolved_config(config, attention_dir)


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig], None]] = {
    "gen-data": gen_data_command,
    "train": train_command,
    "eval": eval_command,
    "sweep": sweep_command,
    "export-attention": export_attention_command,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Path to a YAML or JSON run config", type=str)
    common.add_argument("--seed", type=int, help="Override every seed in the config")
    common.add_argument(
        "--threads", type=int, default=1, help="Worker threads for scoring (default 1)"
    )
    common.add_argument("--out", type=str, help="Output directory (overrides output_dir)")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(
        description="Contextual-biasing second-pass rescoring toolkit"
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    gen_parser = subparsers.add_parser(
        "gen-data", parents=[common], help="Generate or ingest corpora"
    )
    gen_parser.add_argument(
        "--ingest", type=str, help="Annotated JSON-lines corpus to convert instead"
    )
    gen_parser.add_argument(
        "--ablation",
        choices=[m.value for m in AblationMode],
        help="Ground truth in (GT) or absent from (NGT) test biasing lists",
    )

    train_parser = subparsers.add_parser("train", parents=[common], help="Train a model")
    train_parser.add_argument("--corpus", type=str, help="Training corpus (JSON lines)")
    train_parser.add_argument("--resume", type=str, help="Checkpoint to continue from")
    train_parser.add_argument(
        "--init-from", type=str, help="Base checkpoint for (LoRA) fine-tuning"
    )

    eval_parser = subparsers.add_parser("eval", parents=[common], help="Rescore and report WER")
    eval_parser.add_argument("--checkpoint", type=str, help="Model checkpoint")
    eval_parser.add_argument("--corpus", type=str, help="Corpus to evaluate")
    eval_parser.add_argument(
        "--modes",
        nargs="*",
        choices=[m.value for m in RescoreMode],
        help="Rescoring modes (default from config; empty for baseline/oracle only)",
    )
    eval_parser.add_argument(
        "--few-shot-pool", type=str, help="Corpus few-shot examples are drawn from"
    )

    sweep_parser = subparsers.add_parser(
        "sweep", parents=[common], help="Sweep biasing-list length"
    )
    sweep_parser.add_argument("--checkpoint", type=str, help="Model checkpoint")
    sweep_parser.add_argument("--corpus", type=str, help="Corpus to evaluate")
    sweep_parser.add_argument("--lengths", nargs="+", type=int, help="List lengths")
    sweep_parser.add_argument(
        "--modes", nargs="+", choices=[m.value for m in RescoreMode], help="Rescoring modes"
    )

    attention_parser = subparsers.add_parser(
        "export-attention", parents=[common], help="Export attention matrices"
    )
    attention_parser.add_argument("--checkpoint", type=str, help="Model checkpoint")
    attention_parser.add_argument("--sentence", required=True, type=str, help="Input sentence")
    attention_parser.add_argument(
        "--biasing-list", type=str, help='JSON file {"PER": [...], "LOC": [...], "ORG": [...]}'
    )
    attention_parser.add_argument("--layers", nargs="+", type=int, help="Layer indices")

    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.out:
        config = config.model_copy(update={"output_dir": args.out})
    return config


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    if args.threads < 1:
        log.error("--threads must be >= 1")
        return EXIT_USAGE

    try:
        config = _resolve_config(args)
        torch.set_num_threads(args.threads)
        COMMANDS[args.command](args, config)
    except (ValidationError, yaml.YAMLError) as e:
        log.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    except (ValueError, KeyError, FileNotFoundError) as e:
        log.error(f"{args.command} failed: {e}")
        return EXIT_DATA
    except Exception:
        log.exception(f"{args.command} failed unexpectedly")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
