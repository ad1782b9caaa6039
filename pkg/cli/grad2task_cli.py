"""
Command-line entry point.

    python -m cli.grad2task_cli <verb> [--config FILE] [key=value ...] [flags]

Verbs: gen-data, pretrain, train-base, train-adapt, eval, samediff, ablate, embed-tasks.
Every verb reads and writes fixed artifact names inside --out-dir and leaves a
manifest-<verb>.json (resolved config plus content hashes of its inputs) beside them.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import traceback
import typing

import bittensor as bt
import torch
from dotenv import load_dotenv

from evaluator.ablation import VARIANTS, run_ablations
from evaluator.kshot import evaluate_shots, format_table
from evaluator.samediff import samediff_eval_by_shots
from model.adaptation import GRADIENT_VARIANTS, MODEL_VARIANTS, TaskConditionedModel, build_task_conditioned_model
from model.encoder import BaseModel, build_base_model
from model.task_embedding import export_embeddings
from shared.config import RunConfig, build_run_config, parse_override, read_config_file
from shared.errors import ConfigError, Grad2TaskError
from shared.grad2task_protocol import TaskEmbeddingRecord, write_report_csv
from shared.log_data import LoggerType
from shared.run_log_handler import register_run_log_handler
from shared.tensor_core import Rng
from tasks.datasets import TaskRegistry
from tasks.episodes import sample_episode
from tasks.synthetic_suite import SuiteSpec, build_synthetic_registry
from trainer.episodic import checkpoint, last_checkpoint_path, train_stage1, train_stage2
from trainer.metrics import MetricsLogger
from trainer.pretrain import pretrain_encoder

load_dotenv()

VERBS = ("gen-data", "pretrain", "train-base", "train-adapt", "eval", "samediff", "ablate", "embed-tasks")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

LOGGER_TYPES = {
    "gen-data": LoggerType.GenData,
    "pretrain": LoggerType.Pretrain,
    "train-base": LoggerType.Stage1,
    "train-adapt": LoggerType.Stage2,
    "eval": LoggerType.Eval,
    "samediff": LoggerType.SameDiff,
    "ablate": LoggerType.Ablate,
    "embed-tasks": LoggerType.Embed,
}

DATA_DIR = "data"
REGISTRY_NAME = "registry.json"
PRETRAIN_CKPT = "pretrain.ckpt"
STAGE1_CKPT = "stage1.ckpt"


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Flat key = value config file.")
    common.add_argument("--seed", type=int, default=None, help="Root seed (overrides train.seed).")
    common.add_argument("--out-dir", default="runs", help="Directory holding every artifact of a run.")
    common.add_argument("--deterministic", action="store_true", help="Single-threaded deterministic torch.")
    common.add_argument("--debug", action="store_true", help="Debug-level logging.")
    common.add_argument("overrides", nargs="*", metavar="key=value", help="Config overrides.")

    evaluation = _ArgumentParser(add_help=False)
    evaluation.add_argument("--k", type=int, default=None, help="Single shot count (overrides eval.shots).")
    evaluation.add_argument("--runs", type=int, default=None, help="Evaluation runs per task and k.")
    evaluation.add_argument("--allow-overlap", action="store_true", help="Allow evaluating meta-train tasks.")

    variant = _ArgumentParser(add_help=False)
    variant.add_argument("--variant", default=None, help="Model or ablation variant.")

    parser = _ArgumentParser(prog="grad2task", description="Gradient-conditioned few-shot text classification.")
    verbs = parser.add_subparsers(dest="verb", metavar="verb")
    verbs.required = True
    verbs.add_parser("gen-data", parents=[common], help="Generate the synthetic task suite.")
    verbs.add_parser("pretrain", parents=[common], help="Masked-token pretraining of the encoder.")
    verbs.add_parser("train-base", parents=[common], help="Stage 1: prototypical training.")
    verbs.add_parser("train-adapt", parents=[common, variant], help="Stage 2: task-conditioned adaptation.")
    verbs.add_parser("eval", parents=[common, evaluation, variant], help="k-shot evaluation on meta-test tasks.")
    verbs.add_parser("samediff", parents=[common, evaluation], help="Same/different task classifier.")
    verbs.add_parser("ablate", parents=[common, evaluation, variant], help="Run ablation variants.")
    verbs.add_parser("embed-tasks", parents=[common, evaluation, variant], help="Export per-layer task embeddings.")
    return parser


def blob_hash(path: str) -> str:
    """git-style content hash: sha1 over 'blob <len>\\0' + content."""
    with open(path, "rb") as f:
        content = f.read()
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


class Run:
    """Resolved configuration, paths and input bookkeeping of one command."""

    def __init__(self, args: argparse.Namespace, argv: typing.Sequence[str]):
        self.args = args
        self.argv = list(argv)
        self.verb = args.verb
        self.out_dir = args.out_dir
        self.inputs: typing.Dict[str, str] = {}
        self.cfg = self.resolve_config()
        self.rng = Rng(self.cfg.train.seed)

    def resolve_config(self) -> RunConfig:
        entries: typing.Dict[str, object] = {}
        if self.args.config is not None:
            if not os.path.isfile(self.args.config):
                raise ConfigError(f"config file not found: {self.args.config}")
            entries.update(read_config_file(self.args.config))
            self.read(self.args.config)
        for text in self.args.overrides:
            key, value = parse_override(text)
            entries[key] = value
        a = self.args
        if a.seed is not None:
            entries["train.seed"] = a.seed
        if getattr(a, "k", None) is not None:
            entries["eval.shots"] = (a.k,)
            entries["samediff.shots"] = (a.k,)
        if getattr(a, "runs", None) is not None:
            entries["eval.runs"] = a.runs
        if getattr(a, "allow_overlap", False):
            entries["eval.allow_overlap"] = True
        if a.deterministic:
            entries["train.deterministic"] = True
        if getattr(a, "variant", None) is not None and a.verb in ("train-adapt", "eval", "embed-tasks"):
            if a.variant != "protonet":
                entries["conditioning.variant"] = a.variant
        return build_run_config(entries)

    def path(self, *parts: str) -> str:
        return os.path.join(self.out_dir, *parts)

    def read(self, path: str) -> str:
        self.inputs[os.path.relpath(path)] = blob_hash(path)
        return path

    def registry(self) -> TaskRegistry:
        manifest = self.path(DATA_DIR, REGISTRY_NAME)
        if not os.path.isfile(manifest):
            raise ConfigError(f"registry manifest not found: {manifest} (run gen-data first)")
        registry = TaskRegistry.load_manifest(self.read(manifest), self.cfg.encoder.max_seq_len)
        self.read(self.path(DATA_DIR, "vocab.txt"))
        for name in registry.names():
            self.read(self.path(DATA_DIR, f"{name}.jsonl"))
        if self.cfg.encoder.vocab_size is None:
            self.cfg.encoder.vocab_size = len(registry.vocab)
        return registry

    def require(self, name: str) -> str:
        path = self.path(name)
        if not os.path.isfile(path):
            raise ConfigError(f"required artifact not found: {path}")
        return self.read(path)

    def base_model(self, checkpoint_name: typing.Optional[str] = None) -> BaseModel:
        base = build_base_model(self.cfg.encoder, self.rng.child("base"))
        if checkpoint_name is not None:
            checkpoint("load", base, self.require(checkpoint_name))
        return base

    def conditioned_model(self, base: BaseModel, registry: TaskRegistry) -> TaskConditionedModel:
        return build_task_conditioned_model(base, self.cfg.conditioning, self.rng.child("conditioning"),
                                            self.cfg.train.subsample_rounds, registry.vocab,
                                            self.cfg.eval.batch_size)

    def fresh_output(self, name: str) -> str:
        """Path of a checkpoint this command will write; leftovers of an earlier run are removed first."""
        path = self.path(name)
        for stale in (path, last_checkpoint_path(path)):
            if os.path.isfile(stale):
                bt.logging.info(f"{self.verb} | removing stale {stale}")
                os.remove(stale)
        return path

    def write_manifest(self):
        manifest = {
            "verb": self.verb,
            "argv": self.argv,
            "seed": self.cfg.train.seed,
            "config": self.cfg.flat(),
            "inputs": dict(sorted(self.inputs.items())),
        }
        with open(self.path(f"manifest-{self.verb}.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)


###############################################################################
# Verbs
###############################################################################

def cmd_gen_data(run: Run):
    spec = SuiteSpec.from_config(run.cfg.data, run.cfg.encoder.max_seq_len)
    registry = build_synthetic_registry(run.rng.child("gen-data"), spec)
    path = registry.save(run.path(DATA_DIR), REGISTRY_NAME)
    bt.logging.success(f"gen-data | {len(registry)} tasks, vocabulary of {len(registry.vocab)} | {path}")


def cmd_pretrain(run: Run):
    registry = run.registry()
    base = run.base_model()
    pretrain_encoder(base, registry, run.cfg.train, run.rng.child("pretrain"))
    checkpoint("save", base, run.path(PRETRAIN_CKPT))


def cmd_train_base(run: Run):
    registry = run.registry()
    pretrained = PRETRAIN_CKPT if os.path.isfile(run.path(PRETRAIN_CKPT)) else None
    if pretrained is None:
        bt.logging.warning("train-base | no pretrained encoder found, starting from random initialization")
    base = run.base_model(pretrained)
    ckpt = run.fresh_output(STAGE1_CKPT)
    train_cfg = run.cfg.train.model_copy(update={"checkpoint_path": ckpt})
    result = train_stage1(base, registry, train_cfg, run.rng.child("stage1"),
                          MetricsLogger(run.path("metrics-train-base.csv")), batch_size=run.cfg.eval.batch_size)
    if not os.path.isfile(ckpt):
        checkpoint("save", base, ckpt, {"global_step": result.steps})
    bt.logging.success(f"train-base | best val accuracy {result.best_val_accuracy:.4f} | {ckpt}")


def cmd_train_adapt(run: Run):
    registry = run.registry()
    variant = run.cfg.conditioning.variant
    model = run.conditioned_model(run.base_model(STAGE1_CKPT), registry)
    ckpt = run.fresh_output(f"stage2-{variant}.ckpt")
    train_cfg = run.cfg.train.model_copy(update={"checkpoint_path": ckpt})
    result = train_stage2(model, registry, train_cfg, run.rng.child("stage2"),
                          MetricsLogger(run.path("metrics-train-adapt.csv")))
    if not os.path.isfile(ckpt):
        checkpoint("save", model, ckpt, {"global_step": result.steps})
    bt.logging.success(f"train-adapt | {variant} | best val accuracy {result.best_val_accuracy:.4f} | {ckpt}")


def _evaluated_model(run: Run, registry: TaskRegistry):
    base = run.base_model(STAGE1_CKPT)
    if run.args.variant in (None, "protonet"):
        return base, "protonet"
    variant = run.cfg.conditioning.variant
    if variant not in MODEL_VARIANTS:
        raise ConfigError(f"cannot evaluate variant '{variant}'; choose protonet or one of {', '.join(MODEL_VARIANTS)}")
    model = run.conditioned_model(base, registry)
    checkpoint("load", model, run.require(f"stage2-{variant}.ckpt"))
    return model, variant


def cmd_eval(run: Run):
    registry = run.registry()
    model, variant = _evaluated_model(run, registry)
    report = evaluate_shots(model, registry, run.cfg.eval.shots, run.cfg.eval.runs, run.rng.child("eval"),
                            variant, run.cfg.eval.allow_overlap, run.cfg.eval.batch_size)
    write_report_csv(report, run.path("eval_report.csv"))
    table = format_table(report)
    with open(run.path("eval_report.txt"), "w") as f:
        f.write(table)
    sys.stdout.write(table)


def cmd_samediff(run: Run):
    registry = run.registry()
    base = run.base_model(STAGE1_CKPT)
    results = samediff_eval_by_shots(base, registry, run.cfg.samediff, run.rng.child("samediff"),
                                     run.cfg.train.subsample_rounds, run.cfg.conditioning)
    with open(run.path("samediff_auc.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["shots", "auc", "train_pairs", "eval_pairs"])
        for r in results:
            writer.writerow([r.shots, f"{r.auc:.12g}", r.train_pairs, r.eval_pairs])
    for r in results:
        sys.stdout.write(f"k={r.shots} auc={r.auc:.4f}\n")


def cmd_ablate(run: Run):
    registry = run.registry()
    variants = list(VARIANTS) if run.args.variant is None else [v.strip() for v in run.args.variant.split(",")]
    report = run_ablations(variants, run.require(STAGE1_CKPT), registry, run.cfg, run.rng.child("ablate"), run.out_dir)
    write_report_csv(report, run.path("ablation_report.csv"))
    table = format_table(report)
    with open(run.path("ablation_report.txt"), "w") as f:
        f.write(table)
    sys.stdout.write(table)


def cmd_embed_tasks(run: Run):
    registry = run.registry()
    variant = run.cfg.conditioning.variant
    if variant not in GRADIENT_VARIANTS:
        raise ConfigError(f"task embeddings need a gradient variant ({', '.join(GRADIENT_VARIANTS)}), got '{variant}'")
    model = run.conditioned_model(run.base_model(STAGE1_CKPT), registry)
    checkpoint("load", model, run.require(f"stage2-{variant}.ckpt"))
    model.eval()
    k = run.cfg.eval.shots[0]
    records = []
    for name in registry.names():
        for i in range(run.cfg.eval.runs):
            episode_rng = run.rng.child("embed", name, i)
            episode = sample_episode(registry.get(name), k, 0, episode_rng)
            with torch.no_grad():
                layers = model.task_representation(episode, episode_rng.child("features"))
            records.append(TaskEmbeddingRecord(len(records), name, [[float(v) for v in e] for e in layers]))
    export_embeddings(records, run.path("task_embeddings.csv"))
    bt.logging.success(f"embed-tasks | {len(records)} episodes x {model.base.num_adapters} layers exported")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-base": cmd_train_base,
    "train-adapt": cmd_train_adapt,
    "eval": cmd_eval,
    "samediff": cmd_samediff,
    "ablate": cmd_ablate,
    "embed-tasks": cmd_embed_tasks,
}


def configure_torch(cfg: RunConfig):
    threads = os.environ.get("GRAD2TASK_THREADS", "").strip()
    if threads and not threads.isdigit():
        raise ConfigError(f"GRAD2TASK_THREADS must be a positive integer, got {threads!r}")
    if cfg.train.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif threads:
        torch.set_num_threads(max(1, int(threads)))


def dispatch(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"grad2task: error: {e}\n")
        return EXIT_USAGE
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    if args.debug:
        bt.logging.set_debug(True)
    try:
        run = Run(args, argv)
    except (ConfigError, OSError) as e:
        sys.stderr.write(f"grad2task: {e}\n")
        return EXIT_USAGE

    os.makedirs(run.out_dir, exist_ok=True)
    handler = register_run_log_handler(logging.getLogger("bittensor"), LOGGER_TYPES[run.verb], run.out_dir)
    try:
        configure_torch(run.cfg)
        COMMANDS[run.verb](run)
        run.write_manifest()
        return EXIT_OK
    except ConfigError as e:
        bt.logging.error(f"{run.verb} | {e}")
        sys.stderr.write(f"grad2task: {e}\n")
        return EXIT_USAGE
    except Grad2TaskError as e:
        bt.logging.error(f"{run.verb} | {e.__class__.__name__}: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        bt.logging.error(f"{run.verb} | unexpected failure: {e}")
        traceback.print_exc()
        return EXIT_RUNTIME
    finally:
        if handler is not None:
            logging.getLogger("bittensor").removeHandler(handler)


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
