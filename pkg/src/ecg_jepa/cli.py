"""Command line: ``ecg-jepa {synth,convert,pretrain,eval,ablate}``.

Exit status is 0 on success, 1 when a configuration or input fails
validation, and 2 when a file cannot be read or written or is corrupt.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import downstream as ds
from . import experiments as ex
from .config import PROTOCOLS, RECIPES, ConfigError, ExperimentConfig, SynthRanges, load_config, load_recipe
from .convert import MANIFEST_NAME, convert_record, read_manifest
from .ecg import BASE_LEADS, CANONICAL_LEADS, EcgFormatError
from .training import CheckpointError, checkpoint_from_state, load_checkpoint, save_checkpoint

log = logging.getLogger("ecg_jepa")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def _add_global(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default,
                        help=f"experiment JSON file or a shipped recipe name ({', '.join(RECIPES)}); default: desk")
    parser.add_argument("--seed", type=int, default=default, help="overrides train.seed")
    parser.add_argument("--out", default=default, help="output directory; overrides output_dir")


def _range(text_pair):
    return [float(v) for v in text_pair]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecg-jepa", description=__doc__.splitlines()[0])
    _add_global(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic ECGB corpus with a label sidecar")
    _add_global(p, suppress=True)
    p.add_argument("--count", type=int, help="number of records (default: data.synth_count)")
    for flag, field in [("--hr", "heart_rate_bpm"), ("--qrs", "qrs_duration_ms"), ("--jitter", "rr_jitter_frac"),
                        ("--noise", "noise_std_mv"), ("--wander", "baseline_wander_amp_mv")]:
        p.add_argument(flag, nargs=2, metavar=("LO", "HI"), dest=field, help=f"uniform range for {field}")
    p.add_argument("--balanced", action="store_true", help="alternate heart-rate draws between the two classes")
    p.add_argument("--leads", type=int, choices=(8, 12), default=8)

    p = sub.add_parser("convert", help="import CSV recordings listed in a manifest")
    _add_global(p, suppress=True)
    p.add_argument("--input", required=True, help=f"directory holding {MANIFEST_NAME} and the CSV files")
    p.add_argument("--keep12", action="store_true", help="write all 12 leads, deriving limb leads when needed")

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _add_global(p, suppress=True)

    p = sub.add_parser("eval", help="downstream evaluation of a checkpoint")
    _add_global(p, suppress=True)
    p.add_argument("--checkpoint", help="default: <out>/checkpoint.ejpa")
    p.add_argument("--data", help="ECGB corpus directory (default: data.eval_dir or a synthetic corpus)")
    p.add_argument("--protocol", choices=PROTOCOLS, help="default: task.protocol")
    p.add_argument("--leads", help="comma-separated lead subset, e.g. II or II,V1")
    p.add_argument("--fraction", type=float, help="low-shot training fraction")
    p.add_argument("--seeds", type=int, help="number of repetitions")
    p.add_argument("--task", choices=ds.TASKS)
    p.add_argument("--label", help="sidecar label key")

    p = sub.add_parser("ablate", help="paired desk-scale ablation runs")
    _add_global(p, suppress=True)
    p.add_argument("--suite", required=True, choices=("cropa", "maskratio", "leads"))
    p.add_argument("--seeds", type=int, default=1, help="number of shared seeds")
    return parser


# --------------------------------------------------------------------------
# configuration


def resolve_config(args) -> ExperimentConfig:
    source = args.config or "desk"
    if source in RECIPES and not Path(source).exists():
        config = load_recipe(source)
    else:
        config = load_config(source)
    if args.seed is not None:
        config = replace(config, train=replace(config.train, seed=args.seed))
    if args.out is not None:
        config = replace(config, output_dir=args.out)
    return config


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


def write_snapshot(out: Path, config: ExperimentConfig) -> str:
    """Write the resolved config and return its hash."""
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    digest = config.config_hash()
    (out / "config.sha256").write_text(digest + "\n", encoding="utf-8")
    return digest


def _timestamp(out: Path, message: str) -> None:
    # timestamps live here so that metric files stay byte-identical across reruns
    with open(out / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {message}\n")


# --------------------------------------------------------------------------
# verbs


def cmd_synth(args, config: ExperimentConfig) -> None:
    ranges = config.synth.__dict__.copy()
    for name in ranges:
        if getattr(args, name, None) is not None:
            ranges[name] = _range(getattr(args, name))
    synth = SynthRanges(**ranges)
    config = replace(config, synth=synth)
    count = args.count if args.count is not None else config.data.synth_count
    seed = config.train.seed
    out = _out_dir(config)
    records, truths = ex.synth_corpus(count, synth, seed, args.balanced, args.leads)
    ex.write_corpus(out, records, [t.to_dict() for t in truths])
    digest = write_snapshot(out, config)
    ex.write_json(out / "corpus.json", {"config_hash": digest, "count": count, "seed": seed,
                                        "balanced": args.balanced, "lead_count": args.leads})
    print(f"wrote {count} records to {out}")


def cmd_convert(args, config: ExperimentConfig) -> None:
    src = Path(args.input)
    entries = read_manifest(src / MANIFEST_NAME)
    records = [convert_record(src / e["file"], e["sample_rate_hz"], args.keep12) for e in entries]
    out = _out_dir(config)
    names = ex.write_corpus(out, records, [e["labels"] for e in entries])
    digest = write_snapshot(out, config)
    ex.write_json(out / "corpus.json", {"config_hash": digest, "count": len(names),
                                        "lead_count": 12 if args.keep12 else 8,
                                        "sources": [e["file"] for e in entries]})
    print(f"converted {len(names)} records to {out}")


def cmd_pretrain(args, config: ExperimentConfig) -> None:
    config.check_paths()
    out = _out_dir(config)
    digest = write_snapshot(out, config)
    _timestamp(out, "pretrain start")
    records = ex.training_corpus(config, config.train.seed)
    run = ex.pretrain_records(records, config.model, config.train)
    ckpt = checkpoint_from_state(run.state)
    ckpt.metadata["config_hash"] = digest
    ckpt.metadata["lead_ids"] = list(records[0].lead_ids)
    save_checkpoint(out / "checkpoint.ejpa", ckpt)
    ex.write_loss_log(out / "loss_log.csv", run.epoch_losses, digest)
    _timestamp(out, "pretrain done")
    print(f"final epoch loss {run.epoch_losses[-1]:.6f}; checkpoint {out / 'checkpoint.ejpa'}")


def _lead_subset(text):
    if text is None:
        return None
    leads = tuple(x.strip() for x in text.split(",") if x.strip())
    unknown = [x for x in leads if x not in CANONICAL_LEADS]
    if unknown or not leads:
        raise ConfigError([f"--leads: unknown lead names {list(unknown)}"])
    return leads


def cmd_eval(args, config: ExperimentConfig) -> None:
    task = replace(config.task, **{k: v for k, v in {
        "protocol": args.protocol, "fraction": args.fraction, "seeds": args.seeds,
        "task": args.task, "label": args.label}.items() if v is not None})
    data = config.data
    if args.leads is not None:
        data = replace(data, lead_subset=_lead_subset(args.leads))
    if args.data is not None:
        data = replace(data, eval_dir=args.data)
    config = replace(config, task=task, data=data)
    config.check_paths()
    out = _out_dir(config)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.ejpa"
    ckpt = load_checkpoint(ckpt_path)
    if args.config is not None and ckpt.model_config != config.model:
        raise ConfigError([f"checkpoint {ckpt_path} model {ckpt.model_config.to_dict()} "
                           f"does not match config model {config.model.to_dict()}"])
    config = replace(config, model=ckpt.model_config)
    digest = write_snapshot(out, config)
    model = ckpt.build_model()
    seed = config.train.seed
    lead_count = len(ckpt.metadata.get("lead_ids", BASE_LEADS))
    records, entries = ex.evaluation_corpus(config, seed, lead_count)
    seeds = list(range(seed, seed + task.seeds))
    subset = data.lead_subset
    report = {"config_hash": digest, "protocol": task.protocol, "checkpoint": ckpt_path.name,
              "leads": list(subset) if subset else list(records[0].lead_ids), "n_records": len(records)}
    name = f"{task.protocol}" + (f" [{','.join(subset)}]" if subset else "")
    if task.protocol == "features":
        feats = ds.extract_representations(model, records, subset)
        result = ex.features_protocol(feats, entries, config, seed)
        report["seed"] = seed
        text = ex.features_table([(name, result)])
    else:
        labels = ex.labels_from(entries, task.label, task.task)
        if task.protocol == "finetune":
            result = ex.finetune_protocol(model, records, labels, task.task, config, seeds, subset)
            report["seeds"] = seeds
        elif task.protocol == "lowshot":
            feats = ds.extract_representations(model, records, subset)
            result = ex.lowshot_protocol(feats, labels, task.task, config, seed)
            report["seeds"] = [r["seed"] for r in result["runs"]]
            name += f" {task.fraction:g}"
        else:
            feats = ds.extract_representations(model, records, subset)
            result = ex.probe_protocol(feats, labels, task.task, config, seeds)
            report["seeds"] = seeds
        text = ex.classification_table([(name, result["summary"])])
    report["result"] = result
    stem = f"eval_{task.protocol}"
    ex.write_json(out / f"{stem}.json", report)
    (out / f"{stem}.txt").write_text(f"config_hash {digest}\n" + text, encoding="utf-8")
    _timestamp(out, f"eval {task.protocol} done")
    print(text, end="")


def cmd_ablate(args, config: ExperimentConfig) -> None:
    config.check_paths()
    out = _out_dir(config)
    digest = write_snapshot(out, config)
    seeds = list(range(config.train.seed, config.train.seed + args.seeds))
    result = ex.run_ablation(args.suite, config, seeds)
    result["config_hash"] = digest
    result["seeds"] = seeds
    text = ex.classification_table([(row["name"], row["summary"]) for row in result["rows"]])
    ex.write_json(out / f"ablate_{args.suite}.json", result)
    (out / f"ablate_{args.suite}.txt").write_text(f"config_hash {digest}\n" + text, encoding="utf-8")
    _timestamp(out, f"ablate {args.suite} done")
    print(text, end="")


COMMANDS = {"synth": cmd_synth, "convert": cmd_convert, "pretrain": cmd_pretrain,
            "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        COMMANDS[args.command](args, config)
    except (EcgFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
