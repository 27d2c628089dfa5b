"""Command-line pipeline: vocab, train, generate, evaluate, make-fixture.

Exit codes: 0 success, 2 usage or configuration error, 3 data or runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .data import EMBEDDING_DIM, load_dataset, load_references, save_dataset
from .errors import CamfError, DataError, InvalidConfigError
from .fixtures import synthetic_split
from .inference import Model, batch_generate, read_submission
from .metrics import LemmaMap, corpus_average, lemma_bleu, sentence_bleu
from .model import ModelConfig
from .tokenizer import Vocabulary, learn_vocab
from .training import TrainConfig, train

log = logging.getLogger("camf")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3

# Overrides applied on top of the full-scale defaults, which "paper" keeps
# as is. The desk profile is sized for laptop runs on synthetic fixtures.
PROFILES = {
    "paper": {"model": {}, "train": {}, "vocab_size": 10_000},
    "desk": {
        "model": {"d_model": 64, "d_ff": 256, "dropout": 0.0, "max_len": 128},
        "train": {"batch_size": 8, "max_epochs": 200, "patience": 200, "warmup_steps": 100,
                  "lr_max": 3e-3, "smoothing": 0.0},
        "vocab_size": 2000,
    },
}


class UsageError(CamfError):
    pass


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    if len(set(seeds)) != len(seeds):
        raise UsageError(f"--seeds contains duplicates: {text}")
    return seeds


def _require_paths(**paths) -> None:
    for flag, path in paths.items():
        if path is not None and not Path(path).exists():
            raise UsageError(f"--{flag.replace('_', '-')} path does not exist: {path}")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read --config {path}: {exc}") from exc
    if not isinstance(cfg, dict) or not set(cfg) <= {"model", "train", "vocab_size"}:
        raise UsageError("--config must be an object with optional 'model', 'train', 'vocab_size' keys")
    return cfg


def resolve_configs(args) -> tuple[dict, dict, int]:
    """Full-scale defaults < profile < config file < command-line flags."""
    profile = PROFILES[args.profile]
    file_cfg = _load_config_file(args.config)
    model_over = {**profile["model"], **file_cfg.get("model", {})}
    train_over = {**profile["train"], **file_cfg.get("train", {})}
    vocab_size = file_cfg.get("vocab_size", profile["vocab_size"])
    if args.vocab_size is not None:
        vocab_size = args.vocab_size
    if args.lam is not None:
        train_over["lam"] = args.lam
    if args.corruption_p is not None:
        train_over["corruption_p"] = args.corruption_p
    if args.max_epochs is not None:
        train_over["max_epochs"] = args.max_epochs
    return model_over, train_over, vocab_size


def _build_configs(model_over: dict, train_over: dict, vocab: Vocabulary, embed_dim: int,
                   longest: int) -> tuple[ModelConfig, TrainConfig]:
    model_kw = {"embed_dim": embed_dim, **model_over, "vocab_size": len(vocab)}
    d_model = model_kw.get("d_model", ModelConfig.__dataclass_fields__["d_model"].default)
    model_kw.setdefault("cross_attention", "literal" if d_model == embed_dim else "projected")
    model_kw["max_len"] = max(model_kw.get("max_len", 256), longest)
    try:
        return ModelConfig(**model_kw), TrainConfig(**train_over)
    except TypeError as exc:
        raise UsageError(f"unknown configuration field: {exc}") from exc


def cmd_vocab(args) -> int:
    _require_paths(train=args.train)
    split = load_dataset(args.train, dim=args.embed_dim)
    vocab = learn_vocab(split.glosses(), args.vocab_size or PROFILES[args.profile]["vocab_size"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    vocab.save(args.out)
    print(json.dumps({"vocab": str(args.out), "size": len(vocab), "merges": len(vocab.merges)}))
    return EXIT_OK


def cmd_train(args) -> int:
    _require_paths(train=args.train, dev=args.dev, vocab=args.vocab, config=args.config)
    seeds = _parse_seeds(args.seeds)
    model_over, train_over, vocab_size = resolve_configs(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_split = load_dataset(args.train, dim=args.embed_dim)
    dev_split = load_dataset(args.dev, dim=args.embed_dim)
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
        vocab_path = Path(args.vocab).resolve()
    else:
        vocab = learn_vocab(train_split.glosses(), vocab_size)
        vocab_path = out_dir / "vocab.json"
        vocab.save(vocab_path)
    longest = max(len(vocab.encode(g)) for g in train_split.glosses()) - 1
    model_cfg, base_train_cfg = _build_configs(model_over, train_over, vocab, args.embed_dim, longest)

    manifest = {
        "model": model_cfg.to_json(),
        "train": base_train_cfg.to_json(),
        "profile": args.profile,
        "train_path": str(Path(args.train).resolve()),
        "dev_path": str(Path(args.dev).resolve()),
        "vocab_path": str(vocab_path.resolve()),
        "seeds": seeds,
        "out_dir": str(out_dir.resolve()),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")

    results = []
    for seed in seeds:
        seed_dir = out_dir / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        ckpt = seed_dir / "model.json"
        rel_vocab = os.path.relpath(vocab_path.resolve(), seed_dir.resolve())
        res = train(train_split, dev_split, vocab, model_cfg, dataclasses.replace(base_train_cfg, seed=seed),
                    log_path=seed_dir / "log.jsonl", checkpoint_path=ckpt, vocab_path=rel_vocab)
        results.append({"seed": seed, "checkpoint": str(ckpt), "best_epoch": res.best_epoch,
                        "dev_bleu": res.best_bleu, "dev_nll": res.best_nll, "epochs_run": res.epochs_run})
    print(json.dumps(results, indent=1))
    return EXIT_OK


def _load_models(paths) -> list[Model]:
    models = []
    for path in paths:
        params, cfg, manifest = load_checkpoint(path)
        vocab_ref = manifest.get("vocab_path")
        if not vocab_ref:
            raise DataError(f"checkpoint {path} does not name a vocabulary")
        vocab_file = Path(path).parent / vocab_ref
        try:
            vocab = Vocabulary.load(vocab_file)
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {vocab_file}: {exc}") from exc
        models.append(Model(params, cfg, vocab, str(path)))
    first = models[0]
    for m in models[1:]:
        if m.vocab != first.vocab or m.cfg != first.cfg:
            raise DataError(f"checkpoint {m.name} does not share the vocabulary/config of {first.name}")
    return models


def cmd_generate(args) -> int:
    _require_paths(test=args.test, **{f"checkpoints[{i}]": p for i, p in enumerate(args.checkpoints)})
    models = _load_models(args.checkpoints)
    split = load_dataset(args.test, dim=models[0].cfg.embed_dim, require_gloss=False)
    batch_generate(models, split, args.max_len, args.beam, out_path=args.out)
    log.info("wrote %d glosses to %s (%d model(s))", len(split), args.out, len(models))
    return EXIT_OK


def evaluate_submission(submission: list[dict], references: list[tuple[str, str]],
                        lemmas: LemmaMap | None = None) -> dict:
    sub = {r["id"]: r["gloss"] for r in submission}
    ref_ids = [i for i, _ in references]
    for rid in ref_ids:
        if rid not in sub:
            raise DataError(f"reference id {rid!r} has no submission entry")
    extra = [i for i in sub if i not in set(ref_ids)]
    if extra:
        raise DataError(f"submission id {extra[0]!r} is not among the references")
    lemmas = lemmas or LemmaMap.identity()
    s_scores, l_scores = [], []
    for rid, ref in references:
        hyp, ref_words = sub[rid].split(), ref.split()
        s_scores.append(sentence_bleu(hyp, ref_words))
        l_scores.append(lemma_bleu(hyp, ref_words, lemmas))
    return {"count": len(references), "sentence_bleu": corpus_average(s_scores),
            "lemma_bleu": corpus_average(l_scores), "moverscore": "n/a"}


def cmd_evaluate(args) -> int:
    _require_paths(submission=args.submission, test=args.test, lemma_map=args.lemma_map)
    lemmas = LemmaMap.load(args.lemma_map) if args.lemma_map else None
    report = evaluate_submission(read_submission(args.submission), load_references(args.test), lemmas)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_make_fixture(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # dev/test reuse the training glosses and vectors under their own ids,
    # so a desk run can be checked end to end against what it memorised
    for role in ("train", "dev", "test"):
        save_dataset(synthetic_split(args.n, args.dim, args.seed, role=role), out / f"syn.{role}.json")
    print(json.dumps({"out_dir": str(out), "entries": args.n, "dim": args.dim}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--profile", choices=sorted(PROFILES), default="paper")
        p.add_argument("--embed-dim", type=int, default=EMBEDDING_DIM,
                       help="embedding width override for synthetic fixtures (real data: 256)")

    p = sub.add_parser("vocab", help="learn a subword vocabulary from training glosses")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("train", help="train one model per seed")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--vocab", help="existing vocabulary JSON (learned from --train when omitted)")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--seeds", default="0")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--corruption-p", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--config", help="JSON file with 'model'/'train'/'vocab_size' overrides")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode glosses; several checkpoints form an ensemble")
    p.add_argument("--test", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score a submission against reference glosses")
    p.add_argument("--submission", required=True)
    p.add_argument("--test", required=True, help="reference dataset file")
    p.add_argument("--lemma-map", help="TSV file: surface<TAB>lemma")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("make-fixture", help="write a synthetic train/dev/test dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def _limit_threads():
    threads = os.environ.get("CAMF_THREADS")
    if not threads:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(threads))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors (and --help) this way
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    limiter = _limit_threads()
    try:
        return args.func(args)
    except (UsageError, InvalidConfigError) as exc:
        print(f"camf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CamfError as exc:
        print(f"camf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
