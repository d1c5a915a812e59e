"""Command-line surface: map generation, field computation, training,
evaluation, planning and rendering.

Exit codes: 0 success, 1 usage error, 2 data error. A JSON file passed via
--config overrides any flag of the chosen subcommand.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import baselines, evaluate, gridmap, propagation, qnet, render, rl
from .env import EpisodeConfig

__all__ = ["main", "build_parser"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_pair(text: str, sep: str, what: str) -> tuple[float, float]:
    parts = text.split(sep)
    if len(parts) != 2:
        raise ValueError(f"{what} must look like 'A{sep}B', got {text!r}")
    return float(parts[0]), float(parts[1])


def _parse_cell(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"cell must look like 'row,col', got {text!r}")
    return int(parts[0]), int(parts[1])


def _add_config_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file whose values override these flags")


def _apply_config(args: argparse.Namespace) -> None:
    if not getattr(args, "config", None):
        return
    with open(args.config) as fh:
        overrides = json.load(fh)
    if not isinstance(overrides, dict):
        raise ValueError("--config file must hold a JSON object")
    for key, value in overrides.items():
        if not hasattr(args, key):
            raise ValueError(f"--config key {key!r} does not match any flag")
        setattr(args, key, value)


def _load_worlds(args) -> list[tuple[gridmap.HeightGrid, propagation.SinrField]]:
    worlds: list[tuple[gridmap.HeightGrid, propagation.SinrField]] = []
    if getattr(args, "worlds", None):
        with open(args.worlds) as fh:
            manifest = json.load(fh)
        base = Path(args.worlds).parent
        for entry in manifest:
            grid = gridmap.load_grid(base / entry["map"])
            for field_path in entry["fields"]:
                worlds.append((grid, propagation.load_field(base / field_path)))
    elif getattr(args, "map", None):
        grid = gridmap.load_grid(args.map)
        for field_path in args.fields or []:
            worlds.append((grid, propagation.load_field(field_path)))
    if not worlds:
        raise ValueError("no worlds given: use --map with --fields, or --worlds manifest")
    return worlds


def _arch_for(args) -> qnet.ArchSpec:
    if args.arch == "default":
        return qnet.ArchSpec(input_cells=args.obs_cells)
    if args.arch == "small":
        return qnet.ArchSpec(
            input_cells=args.obs_cells,
            conv=((8, 5, 2), (16, 3, 2), (16, 3, 1)),
            fc_units=64,
            dropout_p=args.dropout,
        )
    if args.arch == "tiny":
        return qnet.ArchSpec(
            input_cells=args.obs_cells,
            conv=((2, 3, 1), (2, 3, 1), (2, 3, 1)),
            fc_units=8,
            dropout_p=args.dropout,
        )
    raise ValueError(f"unknown arch {args.arch!r}")


# -- subcommand implementations -------------------------------------------------


def _cmd_gen_map(args) -> int:
    extent = _parse_pair(args.extent, "x", "--extent")
    h_lo, h_hi = _parse_pair(args.height_range, ":", "--height-range")
    params = gridmap.CityGenParams(
        seed=args.seed,
        extent_m=extent,
        building_density=args.density,
        height_range_m=(h_lo, h_hi),
        street_width_m=args.street_width,
    )
    grid = gridmap.generate_city(params, spacing_m=args.spacing)
    gridmap.save_grid(grid, args.out)
    print(f"wrote {args.out}: {grid.nrows}x{grid.ncols} cells at {grid.spacing_m} m")
    return 0


def _cmd_sinr(args) -> int:
    grid = gridmap.load_grid(args.map)
    params = propagation.RadioParams(
        tx_power_dbm=args.tx_power,
        freq_mhz=args.freq,
        noise_plus_interference_dbm=args.noise,
        blockage_loss_db_per_wall=args.wall_loss,
        deadzone_floor_db=args.deadzone_floor,
        shadow_db_max=args.shadow_max,
    )
    field = propagation.compute_sinr_field(
        grid, _parse_cell(args.user), params, altitude_m=args.altitude, seed=args.seed
    )
    propagation.save_field(field, args.out)
    n_dead = int((~field.valid).sum())
    print(f"wrote {args.out}: user {field.user_cell}, {n_dead} invalid cells")
    return 0


def _cmd_train(args) -> int:
    worlds = _load_worlds(args)
    arch = _arch_for(args)
    env_config = EpisodeConfig(
        obs_cells=args.obs_cells,
        explore_reward=args.explore_reward,
        target_sinr_db=args.target_sinr,
        t_max=args.t_max,
        rotation_quarter_turns=None,
    )
    trainer_config = rl.TrainerConfig(
        total_env_steps=args.steps,
        gamma=args.gamma,
        batch_size=args.batch,
        train_interval=args.train_interval,
        target_sync_steps=args.target_sync,
        epsilon_end_frac=args.epsilon_frac,
        lr_init=args.lr,
        lr_halve_every=args.lr_halve_every,
        grad_clip_norm=args.grad_clip,
        replay_capacity=args.replay_capacity,
        learn_start=args.learn_start,
    )
    obs_fn = baselines.blind_observer if args.blind else None

    def progress(step, total, trailing):
        if args.quiet:
            return
        print(f"\rstep {step}/{total} trailing100={trailing:+.2f} dB", end="", file=sys.stderr)

    result = rl.train(worlds, arch, env_config, trainer_config, args.seed, observation_fn=obs_fn, progress=progress)
    if not args.quiet:
        print(file=sys.stderr)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.uavq"
    qnet.save_checkpoint(result.best_params, ckpt)
    rl.write_learning_curve(result.curve, out_dir / "learning_curve.csv")
    bound = baselines.upper_bound([f for _, f in worlds], args.target_sinr)
    render.save_learning_curve_figure(result.curve, out_dir / "learning_curve.png", upper_bound_db=bound)
    print(
        f"trained {len(result.curve)} episodes; best trailing-100 mean increase "
        f"{result.best_trailing_mean:.2f} dB (bound {bound:.2f}); checkpoint {ckpt}"
    )
    return 0


def _cmd_eval(args) -> int:
    worlds = _load_worlds(args)
    config = evaluate.EvalConfig(
        n_episodes=args.episodes,
        t_max=args.t_max,
        target_sinr_db=args.target_sinr,
        test_random_prob=args.random_prob,
        seed=args.seed,
        obs_cells=args.obs_cells,
    )
    params = None
    if args.policy != "random":
        if not args.checkpoint:
            raise ValueError(f"policy {args.policy!r} needs --checkpoint")
        params = qnet.load_checkpoint(args.checkpoint)
    obs_fn = baselines.blind_observer if args.policy == "blind" else None
    metrics = evaluate.run_eval(args.policy, params, worlds, config, observation_fn=obs_fn)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluate.write_metrics_csv(metrics, out_dir / "metrics.csv")
    evaluate.write_cdf_csv(metrics, out_dir / "cdf.csv")
    render.save_cdf_figure({args.policy: metrics.cdf}, out_dir / "cdf.png")
    median = "n/a" if metrics.median_steps is None else f"{metrics.median_steps:.0f}"
    print(
        f"{args.policy}: success {metrics.success_rate:.1%} of {metrics.n_episodes} episodes, "
        f"median steps {median}; wrote {out_dir}/metrics.csv"
    )
    return 0


def _cmd_genie(args) -> int:
    grid = gridmap.load_grid(args.map)
    field = propagation.load_field(args.field)
    starts = np.argwhere(field.valid)
    if args.samples is not None:
        rng = np.random.default_rng(args.seed)
        starts = starts[rng.choice(len(starts), size=min(args.samples, len(starts)), replace=False)]
    rows = []
    for r, c in starts:
        res = baselines.genie_shortest(grid, field, (int(r), int(c)), args.target_sinr)
        rows.append((0, (int(r), int(c)), res))
    baselines.write_genie_csv(rows, args.out)
    reachable = sum(1 for _, _, res in rows if res.reachable)
    print(f"wrote {args.out}: {reachable}/{len(rows)} starts can reach {args.target_sinr} dB")
    return 0


def _cmd_render(args) -> int:
    grid = gridmap.load_grid(args.map)
    field = propagation.load_field(args.field)
    trajectories = []
    if args.traj:
        with open(args.traj) as fh:
            raw = json.load(fh)
        trajectories = [[(int(r), int(c)) for r, c in path] for path in raw]
    height_path, sinr_path = render.render(grid, field, trajectories, args.out, scale=args.scale)
    print(f"wrote {height_path} and {sinr_path}")
    return 0


def _cmd_upper_bound(args) -> int:
    fields = [propagation.load_field(p) for p in args.fields]
    value = baselines.upper_bound(fields, args.target_sinr)
    print(f"{value!r}")
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uavplace", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-map", help="generate a procedural city height grid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extent", default="256x256", help="map extent in meters, WIDTHxHEIGHT")
    p.add_argument("--density", type=float, default=0.25)
    p.add_argument("--height-range", default="6:30", help="building height range in meters, MIN:MAX")
    p.add_argument("--street-width", type=float, default=12.0)
    p.add_argument("--spacing", type=float, default=4.0)
    p.add_argument("--out", required=True)
    _add_config_flag(p)
    p.set_defaults(func=_cmd_gen_map)

    p = sub.add_parser("sinr", help="compute a SINR field for one user")
    p.add_argument("--map", required=True)
    p.add_argument("--user", required=True, help="user cell as row,col")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--altitude", type=float, default=10.0)
    p.add_argument("--tx-power", type=float, default=20.0)
    p.add_argument("--freq", type=float, default=800.0)
    p.add_argument("--noise", type=float, default=-104.0)
    p.add_argument("--wall-loss", type=float, default=15.0)
    p.add_argument("--deadzone-floor", type=float, default=-90.0)
    p.add_argument("--shadow-max", type=float, default=10.0)
    p.add_argument("--out", required=True)
    _add_config_flag(p)
    p.set_defaults(func=_cmd_sinr)

    p = sub.add_parser("train", help="train the dueling double-DQN agent")
    p.add_argument("--map")
    p.add_argument("--fields", nargs="*")
    p.add_argument("--worlds", help="JSON manifest of {map, fields} entries")
    p.add_argument("--steps", type=int, required=True, help="total environment steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--batch", type=int, default=20)
    p.add_argument("--train-interval", type=int, default=3)
    p.add_argument("--dropout", type=float, default=0.4)
    p.add_argument("--explore-reward", type=float, default=1.2)
    p.add_argument("--target-sinr", type=float, default=5.0)
    p.add_argument("--t-max", type=int, default=800)
    p.add_argument("--obs-cells", type=int, default=61)
    p.add_argument("--arch", choices=("default", "small", "tiny"), default="default")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-halve-every", type=int, default=50_000)
    p.add_argument("--grad-clip", type=float, default=10.0)
    p.add_argument("--target-sync", type=int, default=2000)
    p.add_argument("--replay-capacity", type=int, default=500_000)
    p.add_argument("--learn-start", type=int, default=1000)
    p.add_argument("--epsilon-frac", type=float, default=0.8)
    p.add_argument("--blind", action="store_true", help="train the SINR-only ablation")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out-dir", default="train_out")
    _add_config_flag(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy over many episodes")
    p.add_argument("--policy", choices=evaluate.POLICIES, required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--map")
    p.add_argument("--fields", nargs="*")
    p.add_argument("--worlds")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--t-max", type=int, default=500)
    p.add_argument("--target-sinr", type=float, default=5.0)
    p.add_argument("--random-prob", type=float, default=0.096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--obs-cells", type=int, default=61)
    p.add_argument("--out-dir", default="eval_out")
    _add_config_flag(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("genie", help="shortest-path oracle over a field")
    p.add_argument("--map", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--target-sinr", type=float, default=5.0)
    p.add_argument("--samples", type=int, help="random subset of starts (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_config_flag(p)
    p.set_defaults(func=_cmd_genie)

    p = sub.add_parser("render", help="render height map and SINR heatmap")
    p.add_argument("--map", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--traj", help="JSON list of trajectories, each a list of [row, col]")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--out", required=True, help="output prefix for the two PPM files")
    _add_config_flag(p)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("upper-bound", help="mean training performance bound")
    p.add_argument("--fields", nargs="+", required=True)
    p.add_argument("--target-sinr", type=float, default=5.0)
    _add_config_flag(p)
    p.set_defaults(func=_cmd_upper_bound)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    try:
        _apply_config(args)
        return args.func(args)
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
