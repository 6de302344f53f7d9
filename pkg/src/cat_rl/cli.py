"""Command-line front end.

Subcommands: `train` (sync or threaded), `eval` (play a checkpoint),
`count-logits` (per-variant policy head widths), `enumerate-tree` (print a
state's valid tree as JSON), `bench` (throughput probe).

Every flag has a config-file equivalent: a flat `key=value` text file
passed with --config; explicit flags win over file values.  Exit codes:
0 success, 2 invalid configuration or usage, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import nn as catnn
from .clusters import ClustersEnv, VariantId, build_action_tree, load_level_text
from .masking import MaskingMode, sample_factored
from .trainer import ActionSpaceView, ExperimentConfig, evaluate, train
from .trees import count_logits, serialize_valid_tree
from .vtrace import VTraceConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

VARIANTS = [v.value for v in VariantId]
MASKINGS = [m.value for m in MaskingMode]


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None,
                   help="flat key=value file; explicit flags win")
    p.add_argument("--variant", choices=VARIANTS, default="m")
    p.add_argument("--masking", choices=MASKINGS, default="cd")
    p.add_argument("--depth2", action="store_true", default=False)
    p.add_argument("--level", type=str, default="0",
                   help="builtin level id/name or path to a .lvl file")
    p.add_argument("--seed", type=int, default=1)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=200_000, help="total environment steps")
    p.add_argument("--actors", type=int, default=2)
    p.add_argument("--sync", action="store_true", default=False,
                   help="single-threaded deterministic mode (implies one actor)")
    p.add_argument("--out", type=str, default=None, help="output directory")
    p.add_argument("--unroll-length", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--rho-clip", type=float, default=1.0)
    p.add_argument("--u-clip", type=float, default=1.0)
    p.add_argument("--baseline-cost", type=float, default=0.5)
    p.add_argument("--entropy-cost", type=float, default=0.01)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--rmsprop-decay", type=float, default=0.99)
    p.add_argument("--rmsprop-eps", type=float, default=1e-5)
    p.add_argument("--snapshot-interval", type=int, default=1)
    p.add_argument("--max-episode-steps", type=int, default=512)
    p.add_argument("--target-reward", type=float, default=None,
                   help="stop once the rolling episode-reward mean reaches this")
    p.add_argument("--reward-window", type=int, default=50)


def _parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CliError(f"cannot read config file {path!r}: {e}", EXIT_IO) from e
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Two-pass parse so --config provides defaults that flags override."""
    first = parser.parse_args(argv)
    if first.config is None:
        return first
    raw = _parse_config_file(first.config)
    valid_dests = {a.dest: a for a in parser._actions}
    overrides: dict[str, object] = {}
    for key, value in raw.items():
        if key not in valid_dests:
            raise CliError(f"config file key {key!r} does not match any flag")
        action = valid_dests[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            overrides[key] = value.lower() in ("1", "true", "yes", "on")
        elif value.lower() == "none":
            overrides[key] = None
        elif action.type is not None:
            try:
                overrides[key] = action.type(value)
            except ValueError as e:
                raise CliError(f"config file value {key}={value!r}: {e}") from e
        else:
            overrides[key] = value
    parser.set_defaults(**overrides)
    return parser.parse_args(argv)


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    try:
        return ExperimentConfig(
            variant=VariantId.parse(args.variant),
            masking=MaskingMode.parse(args.masking),
            depth2=args.depth2,
            level=args.level,
            seed=args.seed,
            num_actors=1 if args.sync else args.actors,
            unroll_length=args.unroll_length,
            batch_size=args.batch_size,
            total_env_steps=args.steps,
            sync=args.sync,
            vtrace=VTraceConfig(
                gamma=args.gamma,
                rho_clip=args.rho_clip,
                u_clip=args.u_clip,
                baseline_cost=args.baseline_cost,
                entropy_cost=args.entropy_cost,
            ),
            lr=args.lr,
            rmsprop_decay=args.rmsprop_decay,
            rmsprop_eps=args.rmsprop_eps,
            snapshot_interval=args.snapshot_interval,
            max_episode_steps=args.max_episode_steps,
            target_reward=args.target_reward,
            reward_window=args.reward_window,
            out_dir=args.out,
        )
    except ValueError as e:
        raise CliError(str(e)) from e


def _write_resolved_config(config: ExperimentConfig, out_dir: Path) -> None:
    lines = [f"{key}={value}" for key, value in sorted(config.to_flat_dict().items())]
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(args: argparse.Namespace) -> int:
    config = _experiment_config(args)
    if config.out_dir is not None:
        out_dir = Path(config.out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            _write_resolved_config(config, out_dir)
        except OSError as e:
            raise CliError(f"cannot write to output directory {out_dir}: {e}", EXIT_IO) from e
    result = train(config)
    last = result.rows[-1] if result.rows else {}
    print(
        f"done: env_steps={result.env_steps} updates={result.updates} "
        f"episodes={result.episodes_total} "
        f"reward_mean={last.get('episode_reward_mean', 0.0):.4f}"
        + (" (target reached)" if result.stopped_early else "")
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _experiment_config(args)
    try:
        with open(args.checkpoint, "rb") as fh:
            tensors = catnn.load_checkpoint(fh)
    except OSError as e:
        raise CliError(f"cannot read checkpoint {args.checkpoint!r}: {e}", EXIT_IO) from e
    state = {k: v for k, v in tensors.items() if not k.startswith("rmsprop/")}
    stats = evaluate(state, config, episodes=args.episodes,
                     rng=np.random.default_rng(args.seed), greedy=args.greedy)
    for key, value in stats.items():
        print(f"{key}={value}")
    return EXIT_OK


def cmd_count_logits(args: argparse.Namespace) -> int:
    variants = [VariantId.parse(args.variant)] if args.variant else list(VariantId)
    width, height = args.width, args.height
    if width < 3 or height < 3:
        raise CliError(f"grid must be at least 3x3, got {width}x{height}")
    rows = []
    for mode in ("cat", "depth2"):
        for v in variants:
            tree = build_action_tree(v, width, height)
            if mode == "depth2":
                from .clusters import build_depth2_flattening
                tree = build_depth2_flattening(v, width, height).tree
            arities, total = count_logits(tree)
            rows.append((v.value, mode, "+".join(str(a) for a in arities), str(total)))
    name_w = max(len(r[0]) for r in rows)
    logits_w = max(len(r[2]) for r in rows)
    print(f"{'variant':<{name_w + 2}}{'mode':<8}{'logits':<{logits_w + 2}}total")
    for name, mode, logits, total in rows:
        print(f"{name:<{name_w + 2}}{mode:<8}{logits:<{logits_w + 2}}{total}")
    return EXIT_OK


def _parse_action(text: str, expected: int) -> tuple[int, ...]:
    parts = [p.strip() for p in text.split(",")]
    try:
        values = tuple(int(p) for p in parts)
    except ValueError:
        raise CliError(f"invalid action string {text!r}: expected comma-separated "
                       "integers") from None
    if len(values) != expected:
        raise CliError(f"action {text!r} has {len(values)} components, expected {expected}")
    return values


def cmd_enumerate_tree(args: argparse.Namespace) -> int:
    variant = VariantId.parse(args.variant)
    text = load_level_text(args.level, variant)
    env = ClustersEnv(text, variant, max_steps=args.max_episode_steps)
    view = ActionSpaceView(env, args.depth2)
    result = env.reset()
    for step_text in args.step or []:
        if result.done:
            raise CliError(f"episode already over before applying {step_text!r}")
        selections = _parse_action(step_text, len(env.tree.arities))
        result = env.step(selections)
    tree = view.policy_tree(result.valid_tree)
    print(serialize_valid_tree(tree))
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    import time

    config = _experiment_config(args)
    text = load_level_text(config.level, config.variant)
    env = ClustersEnv(text, config.variant, max_steps=config.max_episode_steps)
    view = ActionSpaceView(env, config.depth2)
    model = catnn.PolicyValueNet(tuple(env.observe().shape), view.arities, seed=config.seed)
    rng = np.random.default_rng(config.seed)

    result = env.reset()
    steps = args.steps
    start = time.perf_counter()
    for _ in range(steps):
        logit_groups, _ = model.act_logits(result.observation)
        sample = sample_factored(logit_groups, view.policy_tree(result.valid_tree),
                                 config.masking, rng)
        if sample is None:
            result = env.step_noop()
        else:
            result = env.step(view.env_selections(sample.selections))
        if result.done:
            result = env.reset()
    elapsed = time.perf_counter() - start
    print(f"steps={steps} elapsed={elapsed:.3f}s rate={steps / elapsed:.1f} steps/s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cat-rl",
        description="Train and inspect tree-structured masked policies on the "
                    "box-clustering game.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run an experiment")
    _add_common_flags(p_train)
    _add_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="play episodes with a checkpoint")
    _add_common_flags(p_eval)
    p_eval.add_argument("--checkpoint", type=str, required=True)
    p_eval.add_argument("--episodes", type=int, default=20)
    p_eval.add_argument("--greedy", action="store_true", default=False)
    p_eval.add_argument("--max-episode-steps", type=int, default=512)
    p_eval.set_defaults(func=cmd_eval, sync=False, actors=1, steps=0,
                        unroll_length=2, batch_size=1, gamma=0.99, rho_clip=1.0,
                        u_clip=1.0, baseline_cost=0.5, entropy_cost=0.01, lr=5e-4,
                        rmsprop_decay=0.99, rmsprop_eps=1e-5, snapshot_interval=1,
                        target_reward=None, reward_window=50, out=None)

    p_count = sub.add_parser("count-logits", help="policy head widths per variant")
    p_count.add_argument("--config", type=str, default=None)
    p_count.add_argument("--variant", choices=VARIANTS, default=None)
    p_count.add_argument("--width", type=int, default=13)
    p_count.add_argument("--height", type=int, default=10)
    p_count.set_defaults(func=cmd_count_logits)

    p_enum = sub.add_parser("enumerate-tree", help="print a state's valid action tree")
    _add_common_flags(p_enum)
    p_enum.add_argument("--step", action="append", default=None, metavar="ACTION",
                        help="apply an action first (comma-separated component values); "
                             "repeatable")
    p_enum.add_argument("--max-episode-steps", type=int, default=512)
    p_enum.set_defaults(func=cmd_enumerate_tree)

    p_bench = sub.add_parser("bench", help="environment + policy throughput")
    _add_common_flags(p_bench)
    p_bench.add_argument("--steps", type=int, default=2000)
    p_bench.add_argument("--max-episode-steps", type=int, default=512)
    p_bench.set_defaults(func=cmd_bench, sync=False, actors=1, unroll_length=2,
                         batch_size=1, gamma=0.99, rho_clip=1.0, u_clip=1.0,
                         baseline_cost=0.5, entropy_cost=0.01, lr=5e-4,
                         rmsprop_decay=0.99, rmsprop_eps=1e-5, snapshot_interval=1,
                         target_reward=None, reward_window=50, out=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(e, ValueError) else EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
