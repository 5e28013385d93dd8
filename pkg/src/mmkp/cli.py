"""Command-line driver: synth, train, predict, evaluate, ablate, gradcheck.

Every command accepts ``--config PATH`` (flat ``key = value`` file), ``--out DIR``
and ``--set key=value`` overrides.  Relative data paths resolve against the
output directory.  Each run writes ``<out>/logs/<command>.log``; its first line
is the resolved configuration.
"""

import argparse
import json
import logging
import statistics
import sys
from pathlib import Path

import torch

from . import numerics as nx
from .classifier import LabelSet
from .config import VARIANTS, dump_config, load_config
from .data import build_vocabulary, load_dataset, load_matching, save_dataset, save_matching
from .errors import ConfigError, MKPError
from .evaluation import read_predictions, score_predictions, write_predictions
from .model import KeyphraseModel, triplet_batch, matching_batch
from .synthetic import generate_synthetic_corpus
from .training import (Checkpoint, LOSS_NAMES, f1_at_1, grad_check, predict_keyphrases, train_stage1,
                       train_stage2)

log = logging.getLogger("mmkp")


def _resolve(out, path):
    p = Path(path)
    return p if p.is_absolute() else Path(out) / p


def _open_log(out, name, cfg, command):
    path = Path(out) / "logs" / f"{name}.log"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"command": command, "config": cfg.to_dict()}) + "\n", encoding="utf-8")
    return path


def _split_matching(pairs):
    """Hold out the last fifth of the matching pairs for validation."""
    n_val = max(1, len(pairs) // 5) if len(pairs) > 1 else 0
    return pairs[: len(pairs) - n_val], pairs[len(pairs) - n_val:]


def _build_model(cfg, train):
    vocab = build_vocabulary(train, cfg.vocab_size)
    labels = LabelSet.from_samples(train)
    torch.manual_seed(cfg.seed)
    return KeyphraseModel(cfg.model_config(nx.precision_from_env()), vocab, labels)


def _run_stages(cfg, train, valid, matching, out=None, log_path=None):
    """Stage 1 then stage 2 from scratch; returns the trained model."""
    model = _build_model(cfg, train)
    fit, held = _split_matching(matching)
    train_stage1(model, model.triplets(train), model.matching(fit), cfg.train_config(1),
                 valid_triplets=model.triplets(valid) if valid else None,
                 valid_matching=model.matching(held) if held else None, log_file=log_path)
    train_stage2(model, model.triplets(train), cfg.train_config(2), valid_samples=valid or None, log_file=log_path)
    return model


# ------------------------------------------------------------------ commands


def cmd_synth(cfg, out, args):
    train, valid, test, matching = generate_synthetic_corpus(**cfg.synth_kwargs())
    feats = Path(out) / "features"
    for name, samples in (("train", train), ("valid", valid), ("test", test)):
        save_dataset(samples, _resolve(out, getattr(cfg, f"{name}_path")), feats / name)
    save_matching(matching, _resolve(out, cfg.matching_path), feats / "matching")
    print(f"wrote {len(train)}/{len(valid)}/{len(test)} samples and {len(matching)} matching pairs to {out}")


def cmd_train(cfg, out, args):
    stage = cfg.stage
    log_path = _open_log(out, f"train_stage{stage}", cfg, "train")
    train = load_dataset(_resolve(out, cfg.train_path))
    valid_path = _resolve(out, cfg.valid_path)
    valid = load_dataset(valid_path) if valid_path.exists() else []
    if stage == 1:
        model = _build_model(cfg, train)
        fit, held = _split_matching(load_matching(_resolve(out, cfg.matching_path)))
        ckpt = train_stage1(model, model.triplets(train), model.matching(fit), cfg.train_config(1),
                            valid_triplets=model.triplets(valid) if valid else None,
                            valid_matching=model.matching(held) if held else None, log_file=log_path)
    else:
        src = _resolve(out, cfg.checkpoint or "stage1.ckpt")
        model = Checkpoint.load(src).build_model()
        ckpt = train_stage2(model, model.triplets(train), cfg.train_config(2),
                            valid_samples=valid or None, log_file=log_path)
    dest = Path(out) / f"stage{stage}.ckpt"
    ckpt.save(dest)
    print(f"stage {stage} finished after {len(ckpt.history)} epochs; checkpoint {dest}")


def cmd_predict(cfg, out, args):
    model = Checkpoint.load(_resolve(out, cfg.checkpoint or "stage2.ckpt")).build_model()
    test = load_dataset(_resolve(out, cfg.test_path))
    ranked = predict_keyphrases(model, test, cfg.beam)
    dest = _resolve(out, cfg.predictions_path)
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(ranked, dest)
    if args.dump_correlation:
        model.eval()
        grids = []
        with torch.no_grad():
            for s in test:
                state = model.forward(model.single_batch(s)[0])
                grids.append(None if state.A is None else state.A[0].reshape(7, 7).tolist())
        (Path(out) / "correlation.json").write_text(json.dumps(grids) + "\n", encoding="utf-8")
    print(f"wrote predictions for {len(test)} samples to {dest}")


def cmd_evaluate(cfg, out, args):
    test = load_dataset(_resolve(out, cfg.test_path))
    preds = read_predictions(_resolve(out, cfg.predictions_path))
    report = score_predictions(preds, [[" ".join(k) for k in s.keyphrases] for s in test])
    report.write_json(Path(out) / "report.json")
    report.write_csv(Path(out) / "report.csv")
    print(json.dumps(report.to_dict()))


def cmd_ablate(cfg, out, args):
    variants = [args.variant] if args.variant else list(cfg.variants)
    if args.variant and "full" not in variants:
        variants.insert(0, "full")
    rows = []
    for seed in cfg.seeds:
        base = load_config(args.config, {**_overrides(args), "seed": seed})
        train_path = _resolve(out, base.train_path)
        if train_path.exists():
            train, valid = load_dataset(train_path), load_dataset(_resolve(out, base.valid_path))
            test = load_dataset(_resolve(out, base.test_path))
            matching = load_matching(_resolve(out, base.matching_path))
        else:
            train, valid, test, matching = generate_synthetic_corpus(**base.synth_kwargs())
        for name in variants:
            vcfg = base.with_variant(name)
            log_path = _open_log(out, f"ablate_{name}_seed{seed}", vcfg, "ablate")
            model = _run_stages(vcfg, train, valid, matching, log_path=log_path)
            report = score_predictions(
                [[k for k, _ in r] for r in predict_keyphrases(model, test, cfg.beam)],
                [[" ".join(k) for k in s.keyphrases] for s in test])
            rows.append({"variant": name, "seed": seed, "valid_f1@1": f1_at_1(model, valid, cfg.beam),
                         **{f"test_{k}": v for k, v in report.to_dict().items() if k != "n"}})
            print(json.dumps(rows[-1]), flush=True)
    table = ablation_table(rows)
    (Path(out) / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    (Path(out) / "ablation.md").write_text(table, encoding="utf-8")
    print(table)


def ablation_table(rows):
    """Markdown table of per-variant means over seeds."""
    keys = ["valid_f1@1", "test_f1@1", "test_f1@3", "test_map@5"]
    lines = ["| variant | seeds | " + " | ".join(keys) + " |", "|---|---|" + "---|" * len(keys)]
    for name in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == name]
        means = [statistics.fmean(r[k] for r in sel) for k in keys]
        lines.append(f"| {name} | {len(sel)} | " + " | ".join(f"{100 * m:.2f}" for m in means) + " |")
    return "\n".join(lines) + "\n"


def cmd_gradcheck(cfg, out, args):
    if nx.precision_from_env() != 64:
        raise ConfigError("gradcheck requires MKP_PRECISION=64")
    if cfg.checkpoint:
        model = Checkpoint.load(_resolve(out, cfg.checkpoint)).build_model()
        train = load_dataset(_resolve(out, cfg.train_path))
        matching = load_matching(_resolve(out, cfg.matching_path))
    else:
        train_path = _resolve(out, cfg.train_path)
        if train_path.exists():
            train, matching = load_dataset(train_path), load_matching(_resolve(out, cfg.matching_path))
        else:
            train, _, _, matching = generate_synthetic_corpus(**cfg.synth_kwargs())
        model = _build_model(cfg, train)
    batch = triplet_batch(model.triplets(train[:2]), model.vocab, model.labels, model.dtype)
    mbatch = matching_batch(model.matching(matching[:2]), model.vocab, model.dtype)
    report = grad_check(model, batch, LOSS_NAMES, match_batch=mbatch, seed=cfg.seed)
    dest = Path(out) / "gradcheck.json"
    dest.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    for name in LOSS_NAMES:
        print(f"{name}: max relative error {report[name]['max_rel_err']:.3e}")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def _overrides(args):
    values = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip()] = val
    for flag, key in (("seed", "seed"), ("stage", "stage"), ("beam", "beam")):
        val = getattr(args, flag, None)
        if val is not None:
            values[key] = val
    return values


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mmkp", description="Multimodal keyphrase generation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p = sub.add_parser("predict", parents=[common], help="beam-search keyphrases for the test set")
    p.add_argument("--beam", type=int, help="beam size (default 10)")
    p.add_argument("--dump-correlation", action="store_true", help="write 7x7 region scores per sample")
    sub.add_parser("evaluate", parents=[common], help="score predictions against the test set")
    p = sub.add_parser("ablate", parents=[common], help="train ablation variants over seeds")
    p.add_argument("--variant", choices=VARIANTS, help="run only this variant (plus the full model)")
    p.add_argument("--beam", type=int, help="beam size (default 10)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient report")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command not in ("train", "ablate"):
            _open_log(out, args.command, cfg, args.command)
        log.info("resolved config:\n%s", dump_config(cfg))
        COMMANDS[args.command](cfg, out, args)
    except (MKPError, OSError) as e:
        print(f"mmkp {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
