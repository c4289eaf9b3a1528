"""Command-line entry point.

One JSON config file describes an experiment: tasks, architecture,
training, operators, and search settings. Commands materialize it into
artifacts under the output directory, with fixed file names so runs are
comparable. Every command is deterministic given config and seed.

Exit codes: 0 success, 1 config/validation error, 2 training
divergence, 3 plan/architecture incompatibility, 4 oracle space too
large.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .agent import PpoConfig
from .data import TaskDataset, load_dataset, save_dataset
from .environment import EnvConfig, assemble, load_plan, plan_to_json
from .errors import (
    ArchMismatch,
    DimensionBreak,
    DivergedTraining,
    EmptyPlan,
    MergeError,
    SpaceTooLarge,
    UnknownOperator,
)
from .operators import OPERATOR_IDS, MergeOpConfig
from .params import Checkpoint, load_checkpoint, save_checkpoint
from .rewards import evaluate, mean_accuracy, write_reward_log
from .search import (
    SearchConfig,
    brute_force_oracle,
    measure_episode_time,
    run_search,
    run_uniform_baseline,
    uniform_merge,
)
from .seeding import derive_seed
from .zoo import TaskSpec, ToyArch, TrainConfig, generate_task, make_pretrained, train_finetuned

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_INCOMPATIBLE = 3
EXIT_SPACE = 4

SPEEDUP_PROBE_EPISODES = 3


class ConfigError(Exception):
    """Config file failed schema validation."""


def _section(obj: dict, path: str, required: set[str], optional: set[str]) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = sorted(set(obj) - required - optional)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    missing = sorted(required - set(obj))
    if missing:
        raise ConfigError(f"{path}: missing keys {missing}")


@dataclasses.dataclass
class RunConfig:
    """Fully resolved experiment description."""

    seed: int
    out_dir: Path
    arch: ToyArch
    task_specs: list[TaskSpec]
    finetune: TrainConfig
    pretrain: TrainConfig
    ops: MergeOpConfig
    max_steps: int
    forced_emit_layers: frozenset[int] | None
    ppo: PpoConfig
    data_fraction: float
    dar_lambda: float
    total_episodes: int
    compare_oracle: bool
    raw: dict

    @property
    def task_ids(self) -> list[str]:
        return [s.task_id for s in self.task_specs]

    def env_config(self) -> EnvConfig:
        kwargs = {}
        if self.forced_emit_layers is not None:
            kwargs["forced_emit_layers"] = self.forced_emit_layers
        return EnvConfig(
            n_models=len(self.task_specs),
            n_ops=len(self.ops.op_ids),
            n_layers=self.arch.n_layers,
            max_steps=self.max_steps,
            **kwargs,
        )

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            env=self.env_config(),
            ppo=self.ppo,
            ops=self.ops,
            data_fraction=self.data_fraction,
            dar_lambda=self.dar_lambda,
            total_episodes=self.total_episodes,
            seed=derive_seed(self.seed, "search"),
        )

    # fixed artifact names under out_dir
    def dataset_stem(self, task_id: str, split: str) -> Path:
        return self.out_dir / f"task_{task_id}_{split}"

    def pretrained_path(self) -> Path:
        return self.out_dir / "pretrained.rmmc"

    def model_path(self, task_id: str) -> Path:
        return self.out_dir / f"model_{task_id}.rmmc"


def parse_config(raw: dict) -> RunConfig:
    """Strict schema walk; unknown keys anywhere are rejected."""
    _section(
        raw, "config",
        required={"seed", "out_dir", "arch", "tasks"},
        optional={"train", "ops", "env", "ppo", "search"},
    )

    arch_raw = raw["arch"]
    _section(arch_raw, "arch", set(), {"input_dim", "hidden_dim", "hidden_layers", "class_count"})
    arch = ToyArch(**arch_raw)

    if not isinstance(raw["tasks"], list) or not raw["tasks"]:
        raise ConfigError("tasks: expected a non-empty array")
    specs = []
    for i, entry in enumerate(raw["tasks"]):
        _section(
            entry, f"tasks[{i}]",
            required={"task_id", "class_count", "centers", "noise_std", "samples_per_class", "split_seed"},
            optional=set(),
        )
        specs.append(
            TaskSpec(
                task_id=str(entry["task_id"]),
                class_count=int(entry["class_count"]),
                centers=tuple(tuple(c) for c in entry["centers"]),
                noise_std=float(entry["noise_std"]),
                samples_per_class=int(entry["samples_per_class"]),
                split_seed=int(entry["split_seed"]),
            )
        )
    if len({s.task_id for s in specs}) != len(specs):
        raise ConfigError("tasks: duplicate task_id")

    train_raw = raw.get("train", {})
    _section(train_raw, "train", set(),
             {"lr", "epochs", "batch_size", "pretrain_lr", "pretrain_epochs"})
    seed = int(raw["seed"])
    finetune = TrainConfig(
        lr=float(train_raw.get("lr", 0.1)),
        epochs=int(train_raw.get("epochs", 60)),
        batch_size=int(train_raw.get("batch_size", 32)),
        seed=derive_seed(seed, "finetune"),
    )
    pretrain = TrainConfig(
        lr=float(train_raw.get("pretrain_lr", 0.05)),
        epochs=int(train_raw.get("pretrain_epochs", 8)),
        batch_size=int(train_raw.get("batch_size", 32)),
        seed=derive_seed(seed, "pretrain"),
    )

    ops_raw = dict(raw.get("ops", {}))
    _section(ops_raw, "ops", set(),
             {"ta_lambda", "ties_keep_fraction", "dare_drop_prob", "dare_seed", "op_ids"})
    if "op_ids" in ops_raw:
        ops_raw["op_ids"] = tuple(ops_raw["op_ids"])
    ops = MergeOpConfig(**ops_raw)

    env_raw = raw.get("env", {})
    _section(env_raw, "env", set(), {"max_steps", "forced_emit_layers"})
    max_steps = int(env_raw.get("max_steps", 2 * arch.n_layers))
    forced = env_raw.get("forced_emit_layers")
    forced_set = None if forced is None else frozenset(int(x) for x in forced)

    ppo_raw = dict(raw.get("ppo", {}))
    _section(ppo_raw, "ppo", set(),
             {"clip_eps", "epochs_per_batch", "episodes_per_batch", "lr_actor",
              "lr_critic", "entropy_coef", "hidden_dim"})
    ppo = PpoConfig(seed=derive_seed(seed, "ppo"), **ppo_raw)

    search_raw = raw.get("search", {})
    _section(search_raw, "search", set(),
             {"data_fraction", "dar_lambda", "total_episodes", "compare_oracle"})

    return RunConfig(
        seed=seed,
        out_dir=Path(raw["out_dir"]),
        arch=arch,
        task_specs=specs,
        finetune=finetune,
        pretrain=pretrain,
        ops=ops,
        max_steps=max_steps,
        forced_emit_layers=forced_set,
        ppo=ppo,
        data_fraction=float(search_raw.get("data_fraction", 0.1)),
        dar_lambda=float(search_raw.get("dar_lambda", 0.5)),
        total_episodes=int(search_raw.get("total_episodes", 400)),
        compare_oracle=bool(search_raw.get("compare_oracle", False)),
        raw=raw,
    )


def _apply_overrides(raw: dict, assignments: list[str]) -> dict:
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part} is not an object")
        node[parts[-1]] = parsed
    return raw


def load_config(args: argparse.Namespace) -> RunConfig:
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    raw = _apply_overrides(raw, args.set or [])
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out_dir"] = args.out
    return parse_config(raw)


# --- artifact loading --------------------------------------------------------

def _require(path: Path) -> Path:
    if not path.exists():
        raise ConfigError(f"missing artifact: {path} (run train-tasks first)")
    return path


def _load_tasks(cfg: RunConfig, split: str) -> list[TaskDataset]:
    return [
        load_dataset(_require(cfg.dataset_stem(tid, split).with_suffix(".json")).with_suffix(""))
        for tid in cfg.task_ids
    ]


def _load_models(cfg: RunConfig) -> tuple[list[Checkpoint], Checkpoint]:
    pt = load_checkpoint(_require(cfg.pretrained_path()))
    models = [load_checkpoint(_require(cfg.model_path(tid))) for tid in cfg.task_ids]
    return models, pt


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --- commands ----------------------------------------------------------------

def cmd_train_tasks(cfg: RunConfig, force: bool) -> int:
    """Generate datasets, the shared base model, and one model per task."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    train_sets: list[TaskDataset] = []
    for spec in cfg.task_specs:
        stems = {split: cfg.dataset_stem(spec.task_id, split) for split in ("train", "eval")}
        cached = all(s.with_suffix(".bin").exists() and s.with_suffix(".json").exists()
                     for s in stems.values())
        if cached and not force:
            train_sets.append(load_dataset(stems["train"]))
            continue
        train, evalset = generate_task(spec)
        save_dataset(train, stems["train"])
        save_dataset(evalset, stems["eval"])
        train_sets.append(train)

    pt_path = cfg.pretrained_path()
    if force or not pt_path.exists():
        pt = make_pretrained(cfg.arch, train_sets, cfg.pretrain)
        save_checkpoint(pt, pt_path)
    else:
        pt = load_checkpoint(pt_path)

    for spec, train in zip(cfg.task_specs, train_sets):
        model_path = cfg.model_path(spec.task_id)
        if not force and model_path.exists():
            continue
        hyper = dataclasses.replace(cfg.finetune, seed=derive_seed(cfg.finetune.seed, spec.task_id))
        save_checkpoint(train_finetuned(pt, train, cfg.arch, hyper), model_path)

    print(f"artifacts ready in {cfg.out_dir}")
    return EXIT_OK


def _accuracy_report(model: Checkpoint, cfg: RunConfig) -> dict:
    eval_tasks = _load_tasks(cfg, "eval")
    per_task = {
        t.task_id: evaluate(model, (t.inputs, t.labels)) for t in eval_tasks
    }
    return {"per_task_accuracy": per_task, "mean_accuracy": mean_accuracy(model, eval_tasks)}


def cmd_merge(cfg: RunConfig, method: str | None, plan_path: str | None) -> int:
    """Merge with one uniform operator or an explicit plan file."""
    models, pt = _load_models(cfg)
    if (method is None) == (plan_path is None):
        raise ConfigError("merge needs exactly one of --method or --plan")
    if method is not None:
        if method not in OPERATOR_IDS:
            raise UnknownOperator(f"unknown method {method!r}, pick from {OPERATOR_IDS}")
        merged = uniform_merge(models, pt, method, cfg.ops)
        source = {"method": method}
    else:
        plan = load_plan(plan_path, cfg.ops)
        merged = assemble(plan, models, pt, cfg.ops)
        source = {"plan": plan_to_json(plan, cfg.ops)}

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(merged, cfg.out_dir / "merged.rmmc")
    report = {"config": cfg.raw, **source, **_accuracy_report(merged, cfg)}
    _write_json(cfg.out_dir / "report.json", report)
    print(json.dumps(report["per_task_accuracy"], sort_keys=True),
          f"mean={report['mean_accuracy']:.4f}")
    return EXIT_OK


def cmd_search(cfg: RunConfig, threads: int) -> int:
    """Run the merge search and export report, reward log, and best model."""
    models, pt = _load_models(cfg)
    train_tasks = _load_tasks(cfg, "train")
    eval_tasks = _load_tasks(cfg, "eval")
    search_cfg = cfg.search_config()

    result = run_search(models, pt, train_tasks, search_cfg, eval_tasks=eval_tasks)
    best_model = assemble(result.best_plan, models, pt, cfg.ops)

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best_model, cfg.out_dir / "merged.rmmc")
    rewards_csv = cfg.out_dir / "rewards.csv"
    rewards_csv.unlink(missing_ok=True)
    write_reward_log(rewards_csv, list(result.episode_log), cfg.task_ids)

    baselines = {
        op: run_uniform_baseline(models, pt, eval_tasks, op, cfg.ops) for op in OPERATOR_IDS
    }
    report = {
        "config": cfg.raw,
        "best_plan": plan_to_json(result.best_plan, cfg.ops),
        "best_full_reward": result.best_full_reward,
        "baseline_rewards": baselines,
        "wall_time_seconds": result.wall_time_seconds,
        "incomplete_episodes": result.incomplete_episodes,
        "episode_log_path": str(rewards_csv),
    }

    print(f"search finished in {result.wall_time_seconds:.2f} s, "
          f"best full-data reward {result.best_full_reward:.4f}")
    if cfg.data_fraction < 1.0:
        env_cfg = search_cfg.env
        t_full = measure_episode_time(
            models, pt, train_tasks, env_cfg, cfg.ops, 1.0,
            SPEEDUP_PROBE_EPISODES, seed=cfg.seed,
        )
        t_subset = measure_episode_time(
            models, pt, train_tasks, env_cfg, cfg.ops, cfg.data_fraction,
            SPEEDUP_PROBE_EPISODES * 4, seed=cfg.seed,
        )
        report["per_episode_seconds"] = {"full_data": t_full, "subset": t_subset}
        report["measured_speedup"] = t_full / t_subset
        print(f"per-episode speed-up at rho={cfg.data_fraction}: {t_full / t_subset:.1f}x")

    if cfg.compare_oracle:
        _, oracle_reward, _ = brute_force_oracle(
            models, pt, eval_tasks, search_cfg.env, cfg.ops, n_workers=threads
        )
        report["oracle_reward"] = oracle_reward
        print(f"oracle optimum {oracle_reward:.4f}")

    _write_json(cfg.out_dir / "report.json", report)
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, threads: int) -> int:
    """Exhaustively score every emit-only plan."""
    models, pt = _load_models(cfg)
    eval_tasks = _load_tasks(cfg, "eval")
    env_cfg = cfg.env_config()
    best_plan, best_reward, table = brute_force_oracle(
        models, pt, eval_tasks, env_cfg, cfg.ops, n_workers=threads
    )
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(
        cfg.out_dir / "oracle_table.json",
        {
            "config": cfg.raw,
            "optimum": {"plan": plan_to_json(best_plan, cfg.ops), "reward": best_reward},
            "rows": [
                {"plan": plan_to_json(plan, cfg.ops), "reward": reward}
                for plan, reward in table
            ],
        },
    )
    print(f"oracle: {len(table)} plans, optimum {best_reward:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, model_path: str) -> int:
    """Score one checkpoint on the full evaluation data."""
    model = load_checkpoint(_require(Path(model_path)))
    report = {"config": cfg.raw, "model": str(model_path), **_accuracy_report(model, cfg)}
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out_dir / "eval_report.json", report)
    print(json.dumps({k: report[k] for k in ("per_task_accuracy", "mean_accuracy")}, sort_keys=True))
    return EXIT_OK


# --- argument parsing --------------------------------------------------------

_GLOBAL_DEFAULTS = {
    "config": None,
    "seed": None,
    "out": None,
    "threads": os.cpu_count() or 1,
    "force": False,
    "set": None,
}


def build_parser() -> argparse.ArgumentParser:
    # global flags live on a SUPPRESS-default parent so they parse on
    # either side of the subcommand without clobbering each other
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="path to the JSON run config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--threads", type=int, help="worker threads for oracle enumeration")
    common.add_argument("--force", action="store_true", help="regenerate existing artifacts")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry via dotted path")

    parser = argparse.ArgumentParser(
        prog="rlmerge",
        description="Merge task-specific models by searching layer-wise merge plans.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-tasks", parents=[common],
                   help="generate datasets and per-task models")
    merge = sub.add_parser("merge", parents=[common],
                           help="merge with one operator or a plan file")
    merge.add_argument("--method", default=None, help=f"uniform operator, one of {OPERATOR_IDS}")
    merge.add_argument("--plan", default=None, help="JSON plan file")
    sub.add_parser("search", parents=[common],
                   help="run the reinforcement-learning merge search")
    sub.add_parser("oracle", parents=[common],
                   help="enumerate and score every emit-only plan")
    evalp = sub.add_parser("eval", parents=[common],
                           help="evaluate a checkpoint on the task suite")
    evalp.add_argument("--model", required=True, help="checkpoint to score")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in _GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.config is None:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args)
        if args.command == "train-tasks":
            return cmd_train_tasks(cfg, args.force)
        if args.command == "merge":
            return cmd_merge(cfg, args.method, args.plan)
        if args.command == "search":
            return cmd_search(cfg, args.threads)
        if args.command == "oracle":
            return cmd_oracle(cfg, args.threads)
        if args.command == "eval":
            return cmd_eval(cfg, args.model)
        raise ConfigError(f"unknown command {args.command!r}")
    except (DimensionBreak, ArchMismatch, EmptyPlan) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except SpaceTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPACE
    except DivergedTraining as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, UnknownOperator, MergeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
