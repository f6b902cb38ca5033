"""Unified command-line entry point.

Subcommands: bench (scaling study), train-toy, rollout, masks (dump composed
masks), verify (acceptance property suite), cost (analytic cost reports), and
plot-table (bench CSV to plot-ready long format).

Options may come from a flat key=value config file via --config; explicit
command-line flags override file values, which override built-in defaults.
Environment variables are never consulted. Every recognized key is listed in
CONFIG_KEYS (and documented in the README); unknown keys are an error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import attention
from .attention import attention_cost
from .bench import (BenchConfig, analytic_exponents, crossover_agents, long_format_table,
                    measured_exponents, records_to_csv, run_benchmark)
from .model import (ACTION_DOMAINS, ToyModelConfig, action_dim, build_model, load_checkpoint,
                    save_checkpoint, train_toy)
from .numerics import RngStream, save_tensor
from .simplex import build_simplex_pool
from .streaming import DenoiseSchedule, rollout
from .topology import (TopologySpec, block_causal_mask, causal_hub_mask, compose_masks,
                       hub_mask, local_window_mask)

# every key a config file may define: name -> (parser, flag it feeds)
CONFIG_KEYS = {
    "agents": (str, "comma-separated agent counts, e.g. 2,4,8"),
    "modes": (str, "benchmark modes: dense,sparse-hub"),
    "backends": (str, "kernel backends to time: auto | compiled | python"),
    "frames": (int, "latent frames T"),
    "spatial": (int, "spatial tokens per frame L"),
    "hub": (int, "hub tokens per frame K"),
    "block": (int, "frames per temporal block n"),
    "window": (int, "local attention window in latent frames"),
    "reps": (int, "timed repetitions per benchmark point"),
    "warmup": (int, "warm-up rollouts before timing"),
    "seed": (int, "master seed"),
    "steps": (int, "training steps"),
    "lr": (float, "learning rate"),
    "momentum": (float, "SGD momentum"),
    "batch": (int, "training batch size"),
    "timesteps": (str, "denoise timesteps, e.g. 1000,750,500,250"),
    "shift": (float, "flow shift for the sigma warp"),
    "sigma-ctx": (float, "context noise level for cache re-forwards"),
    "head-dim": (int, "head dimension for cost reports"),
    "heads": (int, "head count for cost reports"),
}


def parse_config_file(path) -> dict:
    """Flat KEY=VALUE lines; '#' starts a comment; unknown keys are an error."""
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected KEY=VALUE, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r} "
                             f"(known: {', '.join(sorted(CONFIG_KEYS))})")
        values[key] = CONFIG_KEYS[key][0](value)
    return values


def _int_list(text) -> tuple:
    return tuple(int(part) for part in str(text).split(",") if part.strip())


def _str_list(text) -> tuple:
    return tuple(part.strip() for part in str(text).split(",") if part.strip())


def _apply_config(parser, subparsers, argv):
    """Pre-parse --config and fold file values into every subparser's defaults."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    file_values = parse_config_file(known.config)
    mapped = {key.replace("-", "_"): value for key, value in file_values.items()}
    for target in [parser] + list(subparsers.values()):
        valid = {action.dest for action in target._actions}
        target.set_defaults(**{k: v for k, v in mapped.items() if k in valid})


def _spec_args(p, frames=24, spatial=4, hub=2, block=3, window=24, agents="2"):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--agents", default=agents, help="agent count(s), comma separated")
    p.add_argument("--frames", type=int, default=frames, help="latent frames T")
    p.add_argument("--spatial", type=int, default=spatial, help="spatial tokens per frame L")
    p.add_argument("--hub", type=int, default=hub, help="hub tokens per frame K")
    p.add_argument("--block", type=int, default=block, help="frames per temporal block n")
    p.add_argument("--window", type=int, default=window,
                   help="local attention window in frames (0 = unbounded)")


def _window(args):
    return None if args.window == 0 else args.window


def cmd_cost(args):
    for P in _int_list(args.agents):
        spec = TopologySpec(P=P, T=args.frames, L=args.spatial, K=args.hub, n=args.block,
                            window=_window(args))
        modes = ("dense", "sparse-hub") if args.mode == "both" else (args.mode,)
        for mode in modes:
            rep = attention_cost(spec, mode, head_dim=args.head_dim, heads=args.heads)
            print(rep.csv_row())
    return 0


def cmd_masks(args):
    P = _int_list(args.agents)[0]
    spec = TopologySpec(P=P, T=args.frames, L=args.spatial, K=args.hub, n=args.block,
                        window=_window(args))
    which = {
        "hub": lambda: hub_mask(spec),
        "causal": lambda: causal_hub_mask(spec),
        "block-causal": lambda: block_causal_mask(spec),
        "window": lambda: local_window_mask(spec),
        "composed": lambda: compose_masks(causal_hub_mask(spec), local_window_mask(spec),
                                          layout_spec=spec),
    }[args.which]
    mask = which()
    grid = "\n".join("".join("1" if x else "0" for x in row) for row in mask) + "\n"
    if args.out_grid:
        Path(args.out_grid).write_text(grid)
        print(f"wrote {mask.shape[0]}x{mask.shape[1]} grid to {args.out_grid}")
    else:
        sys.stdout.write(grid)
    if args.out_tensor:
        save_tensor(args.out_tensor, mask.astype(np.float32))
        print(f"wrote mask tensor to {args.out_tensor}")
    if args.pool_out:
        pool = build_simplex_pool(args.pool_size, d_half=args.pool_dim, alpha=args.alpha)
        save_tensor(args.pool_out, pool.vertices)
        print(f"wrote simplex pool ({pool.V} vertices, embedding {pool.embedding}) "
              f"to {args.pool_out}")
    return 0


def cmd_bench(args):
    config = BenchConfig(agents=_int_list(args.agents), modes=_str_list(args.modes),
                         backends=_str_list(args.backends), T=args.frames, L=args.spatial,
                         K=args.hub, n=args.block, window=args.window or args.frames,
                         reps=args.reps, warmup=args.warmup, seed=args.seed)
    records = run_benchmark(config, progress=lambda msg: print(f"  timing {msg}",
                                                               file=sys.stderr))
    csv_text = records_to_csv(records)
    if args.out:
        Path(args.out).write_text(csv_text)
        print(f"wrote {len(records)} records to {args.out}")
    else:
        sys.stdout.write(csv_text)
    analytic = analytic_exponents(config)
    print(f"analytic pair-count exponents over P={config.analytic_agents}: "
          f"dense {analytic['dense']:.3f}, sparse-hub {analytic['sparse-hub']:.3f}")
    for (backend, mode), exp in sorted(measured_exponents(records).items()):
        print(f"measured attention-time exponent [{backend}] {mode}: {exp:.3f}")
    cross = crossover_agents(config)
    print(f"sparse-hub beats dense (per-block pairs) from P >= {cross}")
    return 0


def cmd_train_toy(args):
    config = ToyModelConfig(T=args.frames, n=args.block,
                            window=_window(args), K=args.hub,
                            timesteps=tuple(_int_list(args.timesteps)), flow_shift=args.shift)
    result = train_toy(config, steps=args.steps, lr=args.lr, momentum=args.momentum,
                       batch_size=args.batch, seed=args.seed,
                       log_every=args.log_every)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "checkpoint", seed=args.seed, step=args.steps)
    (out / "metrics.csv").write_text(result.metrics_csv())
    print(f"trained {args.steps} steps; loss {result.losses[0]:.4f} -> "
          f"{result.losses[-1]:.4f}; checkpoint in {out / 'checkpoint'}")
    return 0


def read_action_csv(path, domain: str, P: int, T: int) -> np.ndarray:
    """CSV rows agent,frame,field_0..field_{A-1}; every (agent, frame) required."""
    A = action_dim(domain)
    actions = np.zeros((P, T, A))
    seen = np.zeros((P, T), dtype=bool)
    lines = Path(path).read_text().strip().splitlines()
    start = 1 if lines and lines[0].lower().startswith("agent") else 0
    for raw in lines[start:]:
        parts = raw.split(",")
        if len(parts) != 2 + A:
            raise ValueError(f"action row needs agent,frame,{A} fields: {raw!r}")
        p, t = int(parts[0]), int(parts[1])
        if 0 <= p < P and 0 <= t < T:
            actions[p, t] = [float(x) for x in parts[2:]]
            seen[p, t] = True
    if not seen.all():
        missing = np.argwhere(~seen)[0]
        raise ValueError(f"action file covers {int(seen.sum())}/{P * T} (agent, frame) "
                         f"pairs; first missing: agent {missing[0]} frame {missing[1]}")
    return actions


def write_action_csv(path, actions: np.ndarray) -> None:
    P, T, A = actions.shape
    lines = ["agent,frame," + ",".join(f"field_{i}" for i in range(A))]
    for p in range(P):
        for t in range(T):
            vals = ",".join(repr(float(x)) for x in actions[p, t])
            lines.append(f"{p},{t},{vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_rollout(args):
    from dataclasses import replace as _replace

    model, manifest = load_checkpoint(args.checkpoint)
    cfg = model.config
    overrides = {}
    if args.frames:
        overrides["T"] = args.frames
    if args.window:
        overrides["window"] = args.window
    if overrides:
        cfg = _replace(cfg, **overrides)
        model.config = cfg
    P = int(args.agents) if args.agents else cfg.P
    rng = RngStream(args.seed)
    if args.actions:
        actions = read_action_csv(args.actions, cfg.action_domain, P, cfg.T)
    else:
        from .model import SynthWorld

        world = SynthWorld(cfg, RngStream(manifest["seed"]).split("world"))
        actions = world.sample_actions(rng.split("cli-actions"), P)
        print("no --actions file given; using seeded synthetic actions", file=sys.stderr)
    if args.first_obs:
        from .numerics import load_tensor

        first = load_tensor(args.first_obs)
    else:
        from .model import SynthWorld

        world = SynthWorld(cfg, RngStream(manifest["seed"]).split("world"))
        g0, x0 = world.sample_init(rng.split("cli-init"), P)
        first = world.latents_for(actions, g0, x0)[:, 0]
        print("no --first-obs tensor given; rendering one from the synthetic world",
              file=sys.stderr)
    schedule = DenoiseSchedule(timesteps=tuple(_int_list(args.timesteps)), shift=args.shift)
    result = rollout(model, first, actions, schedule=schedule,
                     rng=rng.split("rollout"), mode=args.mode, sigma_ctx=args.sigma_ctx)
    save_tensor(args.out, result.latents)
    print(f"rolled out {cfg.T} frames for {P} agents -> {args.out} "
          f"(peak cache {result.peak_cache_tokens} tokens/layer)")
    return 0


def cmd_verify(args):
    from .verify import ALL_CHECKS, run_all

    known = [name for name, _ in ALL_CHECKS]
    only = set(_str_list(args.only)) if args.only else None
    skip = set(_str_list(args.skip)) if args.skip else set()
    for name in (only or set()) | skip:
        if name not in known:
            print(f"unknown check {name!r}; known: {', '.join(known)}", file=sys.stderr)
            return 2
    results = run_all(only=only, skip=skip)
    for res in results:
        print(res.line())
    failed = [r for r in results if not (r.passed and r.in_budget)]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_plot_table(args):
    import csv as _csv

    from .bench import BenchRecord

    rows = list(_csv.DictReader(Path(args.bench_csv).read_text().splitlines()))
    records = []
    for row in rows:
        records.append(BenchRecord(
            mode=row["mode"], backend=row["backend"], P=int(row["P"]), T=int(row["T"]),
            L=int(row["L"]), K=int(row["K"]), n=int(row["n"]), window=int(row["window"]),
            pairs_per_block=int(row["pairs_per_block"]), flops=int(row["flops"]),
            rollout_pairs=int(row["rollout_pairs"]), measured_pairs=int(row["measured_pairs"]),
            attn_ns=int(row["attn_ns"]), rollout_ns=int(row["rollout_ns"]),
            reps=int(row["reps"]), threads=int(row["threads"]),
            skipped=bool(int(row["skipped"])), note=row["note"]))
    text = long_format_table(records)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote long-format table to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="hubworld",
                                     description="multi-agent world-model toolkit")
    parser.add_argument("--backend", choices=["auto", "compiled", "python"], default="auto",
                        help="grouped-attention kernel backend")
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def add_parser(name, **kwargs):
        registry[name] = sub.add_parser(name, **kwargs)
        return registry[name]

    p = add_parser("cost", help="print analytic attention cost reports as CSV")
    _spec_args(p, agents="2,4,8")
    p.add_argument("--mode", choices=["dense", "sparse-hub", "both"], default="both")
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.set_defaults(fn=cmd_cost)

    p = add_parser("masks", help="dump an attention mask as a 0/1 grid and tensor")
    _spec_args(p, frames=4, spatial=2, hub=1, block=2, window=4)
    p.add_argument("--which", choices=["hub", "causal", "block-causal", "window", "composed"],
                   default="composed")
    p.add_argument("--out-grid", help="path for the text grid (default: stdout)")
    p.add_argument("--out-tensor", help="path for the binary tensor dump")
    p.add_argument("--pool-out", help="also dump the simplex pool vertices to this path")
    p.add_argument("--pool-size", type=int, default=4, help="simplex pool size V")
    p.add_argument("--pool-dim", type=int, default=4, help="agent-angle dimension d_p/2")
    p.add_argument("--alpha", type=float, default=1.0, help="agent separation scale")
    p.set_defaults(fn=cmd_masks)

    p = add_parser("bench", help="run the dense vs sparse-hub scaling study")
    _spec_args(p, agents="2,4,8")
    p.add_argument("--modes", default="dense,sparse-hub")
    p.add_argument("--backends", default="auto",
                   help="comma-separated kernel backends to compare")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.set_defaults(fn=cmd_bench)

    p = add_parser("train-toy", help="train the toy model on the synthetic shared world")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--block", type=int, default=3)
    p.add_argument("--hub", type=int, default=2)
    p.add_argument("--window", type=int, default=24)
    p.add_argument("--timesteps", default="1000,750,500,250")
    p.add_argument("--shift", type=float, default=5.0)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--out-dir", default="runs/toy")
    p.set_defaults(fn=cmd_train_toy)

    p = add_parser("rollout", help="KV-cached streaming rollout from a checkpoint")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--agents", help="agent count (default: checkpoint config)")
    p.add_argument("--frames", type=int, default=0,
                   help="latent frames to generate (default: checkpoint config)")
    p.add_argument("--window", type=int, default=0,
                   help="local attention window override (default: checkpoint config)")
    p.add_argument("--actions", help="action CSV: agent,frame,field_0..field_{A-1}")
    p.add_argument("--first-obs", help="tensor dump with (P, H, W, C) first-frame latents")
    p.add_argument("--timesteps", default="1000,750,500,250")
    p.add_argument("--shift", type=float, default=5.0)
    p.add_argument("--sigma-ctx", type=float, default=0.0)
    p.add_argument("--mode", choices=["causal-hub", "dense-causal"], default="causal-hub")
    p.add_argument("--out", default="latents.bin")
    p.set_defaults(fn=cmd_rollout)

    p = add_parser("verify", help="run the acceptance property suite")
    p.add_argument("--only", help="comma-separated check names")
    p.add_argument("--skip", help="comma-separated check names to skip")
    p.set_defaults(fn=cmd_verify)

    p = add_parser("plot-table", help="bench CSV -> plot-ready long format")
    p.add_argument("--bench-csv", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_plot_table)
    return parser, registry


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subparsers = build_parser()
    _apply_config(parser, subparsers, argv)
    args = parser.parse_args(argv)
    attention.set_backend(args.backend)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
