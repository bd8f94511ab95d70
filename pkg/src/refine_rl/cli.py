"""Command-line entry points.

    refine-rl gen-data  --config cfg.txt --out DIR
    refine-rl train     --config cfg.txt
    refine-rl refine    --config cfg.txt [--checkpoint 'DIR/seed{seed}_baseline.ckpt']
    refine-rl finetune  --config cfg.txt [--checkpoint ...]
    refine-rl ablate    --config cfg.txt
    refine-rl eval      --config cfg.txt --checkpoint ...

Checkpoint paths may contain ``{seed}``, ``{out}`` and ``{env}`` placeholders.
Seeds run in parallel processes, capped by ``REFINE_RL_THREADS`` (default 1).
"""

from __future__ import annotations

import argparse
import csv
import fcntl
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from refine_rl.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from refine_rl.config import ConfigError, RunConfig, dump_config, load_config
from refine_rl.data import (
    DatasetError, NormStats, TransitionDataset, compute_norm_stats, load_dataset, read_meta,
    save_dataset, write_meta,
)
from refine_rl.envs import EnvError, ReferenceScores, get_spec
from refine_rl.evaluation import aggregate, evaluate_policy
from refine_rl.suite import SuiteError, generate_suite
from refine_rl.training import (
    EVAL_TAG, RunLog, TrainingDiverged, finetune_online, refine_policy, run_ablation,
    scale_alpha, train_offline,
)
from refine_rl.rng import derive_seed

log = logging.getLogger("refine_rl")

CURVE_HEADER = ["step", "phase", "seed", "alpha", "mean_return", "std_return", "normalized_score"]
RESULT_HEADER = ["run_id", "checkpoint", "env", "phase", "seed", "episodes", "mean_return",
                 "std_return", "normalized_mean", "normalized_std"]
EXIT_DIVERGED = 3


class CommandError(RuntimeError):
    pass


def save_refs(refs: ReferenceScores, path: str | Path) -> None:
    write_meta(path, {"env": refs.env, "random_return": repr(refs.random_return),
                      "expert_return": repr(refs.expert_return)})


def load_refs(path: str | Path) -> ReferenceScores:
    items = read_meta(path)
    try:
        return ReferenceScores(items["env"], float(items["random_return"]),
                               float(items["expert_return"]))
    except KeyError as exc:
        raise CommandError(f"{path}: reference file lacks {exc}") from None


def write_curves(path: str | Path, logs: list[RunLog]) -> None:
    """One CSV row per evaluation point, seeds in the order given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for run in logs:
            for r in run:
                w.writerow([r.step, r.phase, r.seed, repr(r.alpha), repr(r.mean_return),
                            repr(r.std_return), repr(r.normalized_score)])


def append_results(path: str | Path, rows: list[list]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a+", newline="") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        try:
            f.seek(0, os.SEEK_END)
            w = csv.writer(f, lineterminator="\n")
            if f.tell() == 0:
                w.writerow(RESULT_HEADER)
            w.writerows(rows)
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


def _ckpt_path(template: str, cfg: RunConfig, seed: int) -> Path:
    return Path(template.format(seed=seed, out=cfg.out, env=cfg.env))


def _load_refs_opt(cfg: RunConfig) -> ReferenceScores | None:
    return load_refs(cfg.refs) if cfg.refs else None


def _load_dataset(cfg: RunConfig) -> TransitionDataset:
    if not cfg.dataset:
        raise CommandError("this command needs dataset=PATH in the config")
    ds = load_dataset(cfg.dataset)
    spec = get_spec(ds.env)
    if (ds.obs_dim, ds.act_dim) != (spec.obs_dim, spec.act_dim):
        raise CommandError(f"{cfg.dataset}: dims ({ds.obs_dim}, {ds.act_dim}) do not match "
                           f"{spec.name} ({spec.obs_dim}, {spec.act_dim})")
    return ds


def _load_matching_checkpoint(path: Path, ds: TransitionDataset | None = None) -> Checkpoint:
    if not path.exists():
        raise CommandError(f"checkpoint {path} does not exist")
    ck = load_checkpoint(path)
    spec = get_spec(ck.env)
    if (ck.agent.obs_dim, ck.agent.act_dim) != (spec.obs_dim, spec.act_dim):
        raise CommandError(f"{path}: network dims do not match environment {spec.name}")
    if ds is not None and (ds.env != ck.env or ds.obs_dim != ck.agent.obs_dim
                           or ds.act_dim != ck.agent.act_dim):
        raise CommandError(
            f"dimension mismatch: checkpoint {path} is for {ck.env} "
            f"(obs {ck.agent.obs_dim}, act {ck.agent.act_dim}) but dataset is for {ds.env} "
            f"(obs {ds.obs_dim}, act {ds.act_dim})")
    return ck


def _save_partial(cfg: RunConfig, seed: int, exc: TrainingDiverged, stats, alpha: float) -> Path:
    path = Path(cfg.out) / f"seed{seed}_{exc.phase}_partial.ckpt"
    save_checkpoint(Checkpoint(get_spec(cfg.env).name, exc.phase, exc.agent, stats, alpha, seed),
                    path)
    return path


# per-seed workers; top level so they pickle for the process pool


def _train_seed(cfg: RunConfig, seed: int) -> RunLog:
    ds = _load_dataset(cfg)
    hp = cfg.hyperparams()
    stats = compute_norm_stats(ds)
    try:
        agent, runlog = train_offline(ds, hp, cfg.offline_schedule(), seed, stats=stats,
                                      refs=_load_refs_opt(cfg))
    except TrainingDiverged as exc:
        _save_partial(cfg, seed, exc, stats, hp.alpha)
        raise
    save_checkpoint(Checkpoint(ds.env, "baseline", agent, stats, hp.alpha, seed),
                    Path(cfg.out) / f"seed{seed}_baseline.ckpt")
    return runlog


def _refine_seed(cfg: RunConfig, seed: int, template: str) -> RunLog:
    ds = _load_dataset(cfg)
    ck = _load_matching_checkpoint(_ckpt_path(template, cfg, seed), ds)
    hp = cfg.hyperparams()
    sched = cfg.offline_schedule()
    try:
        agent, runlog = refine_policy(ck.agent, ds, hp, sched, seed, stats=ck.stats,
                                      refs=_load_refs_opt(cfg))
    except TrainingDiverged as exc:
        _save_partial(cfg, seed, exc, ck.stats, scale_alpha(hp.alpha, sched.lam))
        raise
    save_checkpoint(Checkpoint(ck.env, "refined", agent, ck.stats,
                               scale_alpha(hp.alpha, sched.lam), seed),
                    Path(cfg.out) / f"seed{seed}_refined.ckpt")
    return runlog


def _finetune_seed(cfg: RunConfig, seed: int, template: str) -> RunLog:
    src = _ckpt_path(template, cfg, seed)
    ck = _load_matching_checkpoint(src)
    hp = cfg.hyperparams()
    sched = cfg.finetune_schedule()
    try:
        agent, runlog = finetune_online(ck.agent, get_spec(ck.env), hp, sched, seed,
                                        stats=ck.stats, refs=_load_refs_opt(cfg))
    except TrainingDiverged as exc:
        _save_partial(cfg, seed, exc, ck.stats, float("nan"))
        raise
    save_checkpoint(Checkpoint(ck.env, "finetuned", agent, ck.stats, runlog.final_alpha, seed),
                    Path(cfg.out) / f"{src.stem}_finetuned.ckpt")
    return runlog


def _ablate_seed(cfg: RunConfig, seed: int) -> RunLog:
    ds = _load_dataset(cfg)
    hp = cfg.hyperparams()
    stats = compute_norm_stats(ds)
    sched = cfg.offline_schedule()
    alpha = hp.alpha if cfg.ablation in ("none", "extended_baseline") else scale_alpha(hp.alpha, sched.lam)
    try:
        agent, runlog = run_ablation(cfg.ablation, ds, hp, sched, seed, stats=stats,
                                     refs=_load_refs_opt(cfg))
    except TrainingDiverged as exc:
        _save_partial(cfg, seed, exc, stats, alpha)
        raise
    if cfg.ablation == "none":
        alpha = scale_alpha(hp.alpha, sched.lam)
    save_checkpoint(Checkpoint(ds.env, f"ablation_{cfg.ablation}", agent, stats, alpha, seed),
                    Path(cfg.out) / f"seed{seed}_ablation_{cfg.ablation}.ckpt")
    return runlog


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("REFINE_RL_THREADS", "1")))
    except ValueError:
        return 1


def _map_seeds(fn, cfg: RunConfig, *extra) -> list:
    seeds = list(cfg.seeds)
    workers = min(_threads(), len(seeds))
    if workers == 1:
        return [fn(cfg, s, *extra) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, cfg, s, *extra) for s in seeds]
        return [f.result() for f in futures]


def cmd_gen_data(cfg: RunConfig) -> dict[str, Path]:
    spec = get_spec(cfg.env)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = generate_suite(spec, cfg.data_seed, (cfg.expert_n, cfg.medium_n), cfg.hyperparams(),
                           behavior_steps=cfg.behavior_steps,
                           behavior_prefill=cfg.behavior_prefill,
                           behavior_eval_every=cfg.behavior_eval_every,
                           ref_episodes=cfg.ref_episodes)
    paths = {}
    for level, ds in suite.datasets.items():
        p = out / f"{spec.name}_{level}.ofrl"
        save_dataset(ds, p)
        paths[level] = p
    # behaviour agents act on raw observations
    ident = NormStats.identity(spec.obs_dim)
    for name, agent in (("expert", suite.expert), ("medium", suite.medium)):
        p = out / f"{spec.name}_{name}_policy.ckpt"
        save_checkpoint(Checkpoint(spec.name, f"behavior_{name}", agent, ident, 0.0,
                                   cfg.data_seed), p)
        paths[f"{name}_policy"] = p
    paths["refs"] = out / f"{spec.name}_refs.txt"
    save_refs(suite.refs, paths["refs"])
    write_curves(out / f"{spec.name}_behavior_curves.csv", [suite.behavior_log])
    log.info("wrote suite for %s to %s (refs random %.3f expert %.3f)", spec.name, out,
             suite.refs.random_return, suite.refs.expert_return)
    return paths


def cmd_train(cfg: RunConfig) -> list[RunLog]:
    logs = _map_seeds(_train_seed, cfg)
    write_curves(Path(cfg.out) / "curves_baseline.csv", logs)
    return logs


def cmd_refine(cfg: RunConfig) -> list[RunLog]:
    template = cfg.checkpoint or "{out}/seed{seed}_baseline.ckpt"
    logs = _map_seeds(_refine_seed, cfg, template)
    write_curves(Path(cfg.out) / "curves_refined.csv", logs)
    return logs


def cmd_finetune(cfg: RunConfig) -> list[RunLog]:
    template = cfg.checkpoint or "{out}/seed{seed}_refined.ckpt"
    logs = _map_seeds(_finetune_seed, cfg, template)
    tag = Path(template.format(seed=cfg.seeds[0], out=cfg.out, env=cfg.env)).stem
    tag = tag.split("_", 1)[1] if "_" in tag else tag
    write_curves(Path(cfg.out) / f"curves_finetuned_from_{tag}.csv", logs)
    return logs


def cmd_ablate(cfg: RunConfig) -> list[RunLog]:
    logs = _map_seeds(_ablate_seed, cfg)
    write_curves(Path(cfg.out) / f"curves_ablation_{cfg.ablation}.csv", logs)
    return logs


def cmd_eval(cfg: RunConfig, out=None):
    out = out or sys.stdout
    if not cfg.refs:
        raise CommandError("eval needs refs=PATH (reference scores) in the config")
    refs = load_refs(cfg.refs)
    template = cfg.checkpoint or "{out}/seed{seed}_refined.ckpt"
    reports, phases = [], set()
    for seed in cfg.seeds:
        path = _ckpt_path(template, cfg, seed)
        ck = _load_matching_checkpoint(path)
        phases.add(ck.phase)
        reports.append(evaluate_policy(ck.agent, get_spec(ck.env), ck.stats, cfg.eval_episodes,
                                       derive_seed(seed, EVAL_TAG)))
    agg = aggregate(reports, refs)
    phase = "+".join(sorted(phases))
    print(f"env={agg.env} phase={phase} seeds={','.join(map(str, cfg.seeds))} "
          f"episodes={sum(r.episodes for r in reports)}", file=out)
    print(f"raw return        {agg.mean:.4f} +- {agg.std:.4f}", file=out)
    print(f"normalized score  {agg.normalized_mean:.4f} +- {agg.normalized_std:.4f}", file=out)
    digest = cfg.digest()
    rows = []
    for seed, rep in zip(cfg.seeds, reports):
        one = aggregate([rep], refs)
        rows.append([f"{digest}-{seed}", template, agg.env, phase, seed, rep.episodes,
                     repr(rep.mean), repr(rep.std), repr(one.normalized_mean),
                     repr(one.normalized_std)])
    rows.append([f"{digest}-all", template, agg.env, phase, "all",
                 sum(r.episodes for r in reports), repr(agg.mean), repr(agg.std),
                 repr(agg.normalized_mean), repr(agg.normalized_std)])
    append_results(Path(cfg.out) / "results.csv", rows)
    return agg


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "refine": cmd_refine,
    "finetune": cmd_finetune, "ablate": cmd_ablate, "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refine-rl", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key=value config file (empty means defaults)")
    p.add_argument("--seed", type=int, help="run this single seed instead of the config list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="input checkpoint path or template")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.out:
        overrides["out"] = args.out
    if args.checkpoint:
        overrides["checkpoint"] = args.checkpoint
    try:
        cfg = load_config(args.config, overrides)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / f"config_{args.command}.txt").write_text(dump_config(cfg))
        COMMANDS[args.command](cfg)
    except TrainingDiverged as exc:
        print(f"refine-rl: training diverged in phase {exc.phase} at step {exc.step}; "
              f"partial checkpoint kept in {cfg.out}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CommandError, ConfigError, CheckpointError, DatasetError, EnvError, SuiteError,
            FileNotFoundError, ValueError) as exc:
        print(f"refine-rl: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
