"""Command-line entry points: train, sample, guide, sweep-k.

Every command reads a single JSON run configuration.  A minimal guide
configuration looks like::

    {
      "model": {"checkpoint": "runs/hex/model.ckpt"},
      "task": {"kind": "corner", "corner": "lower-right"},
      "method": "rhc",
      "guidance": {"lam": 10, "N": 20, "K": 4, "n_ctrl": 200}
    }

Image tasks use ``{"kind": "image", "operator": {"op": "gaussian-blur",
"sigma": 1.0}, "sigma": 0.05, "n_images": 5}``.  Outputs are tidy CSV/JSON
(plus PGM images) meant for external plotting.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import control, data, dynamics, flowmodel, inverse, metrics

log = logging.getLogger(__name__)

OUT_ENV = "MPCFLOW_OUT"
HEXAGON_LR = 3e-3  # 1e-3 leaves the 2-D model visibly under-trained at 5000 iterations
SUMMARY_FIELDS = ("method", "lambda", "lambda_inner", "N", "K", "n_ctrl", "lr", "seed", "J", "energy",
                  "terminal_loss", "wall_time_s")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file {path} does not exist") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config: top level must be an object")
    return cfg


def _typed(block: dict, cls, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(block) - known
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        obj = cls(**block)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None
    return obj


def train_config(cfg: dict) -> flowmodel.TrainConfig:
    block = dict(cfg.get("train", {}))
    pool = block.pop("pool_size", None)
    if "hidden" in block:
        block["hidden"] = tuple(block["hidden"])
    if block.get("dataset", "hexagon") == "hexagon":
        block.setdefault("lr", HEXAGON_LR)
    tc = _typed(block, flowmodel.TrainConfig, "train")
    if "seed" in cfg and "seed" not in block:
        tc.seed = int(cfg["seed"])
    if tc.dataset not in ("hexagon", "discs16"):
        raise ConfigError(f"train.dataset: unknown dataset {tc.dataset!r} (hexagon | discs16)")
    tc.pool_size = int(pool) if pool is not None else 20000
    return tc


def guidance_config(cfg: dict) -> tuple[str, control.GuidanceConfig]:
    method = cfg.get("method")
    if method not in control.METHODS:
        raise ConfigError(f"method: expected one of {list(control.METHODS)}, got {method!r}")
    block = dict(cfg.get("guidance", {}))
    if method == "rhc":
        if "K" not in block:
            raise ConfigError("guidance.K: required for method 'rhc' (an integer or \"full\")")
        if block["K"] == "full":
            block["K"] = None
    elif "K" in block:
        raise ConfigError(f"guidance.K: only valid for method 'rhc', not {method!r}")
    if "seed" in cfg:
        block.setdefault("seed", int(cfg["seed"]))
    return method, _typed(block, control.GuidanceConfig, "guidance")


def resolve_out(cli_out: str | None, cfg: dict) -> Path:
    out = cli_out or cfg.get("out")
    if out is None:
        out = os.path.join(os.environ.get(OUT_ENV, "runs"), "latest")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# datasets, models and tasks


def dataset_sampler(tc: flowmodel.TrainConfig):
    if tc.dataset == "hexagon":
        return data.hexagon_points, 2
    pool = data.sample_discs16(getattr(tc, "pool_size", 20000), seed=tc.seed + 1).reshape(-1, data.IMAGE_SIZE ** 2)

    def sampler(rng, n):
        return pool[rng.integers(0, len(pool), n)]

    return sampler, data.IMAGE_SIZE ** 2


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def obtain_model(cfg: dict, out: Path) -> tuple[flowmodel.MlpVectorField, Path]:
    block = cfg.get("model")
    if not isinstance(block, dict):
        raise ConfigError("model: expected {\"checkpoint\": path} or {\"train\": {...}}")
    if "checkpoint" in block:
        path = Path(block["checkpoint"])
        if not path.exists():
            raise ConfigError(f"model.checkpoint: {path} does not exist")
        try:
            return flowmodel.load_checkpoint(path), path
        except flowmodel.CheckpointError as e:
            raise ConfigError(f"model.checkpoint: {e}") from None
    if "train" in block:
        tc = train_config({"train": block["train"]})
        sampler, dim = dataset_sampler(tc)
        model, losses = flowmodel.train(sampler, dim, tc)
        path = out / "model.ckpt"
        flowmodel.save_checkpoint(model, path)
        write_loss_csv(out / "loss.csv", losses)
        return model, path
    raise ConfigError("model: needs a 'checkpoint' or 'train' entry")


@dataclass
class Task:
    name: str
    index: int
    x0: np.ndarray
    phi: control.Phi
    target: np.ndarray | None = None
    obs: inverse.Observation | None = None

    @property
    def is_image(self) -> bool:
        return self.obs is not None

    def terminal_error(self, x: np.ndarray) -> float:
        if self.target is not None:
            return float(np.linalg.norm(x - self.target))
        return float(np.linalg.norm(self.obs.op.apply(x) - self.obs.y))


def build_tasks(cfg: dict, dim: int, seed: int) -> list[Task]:
    block = cfg.get("task")
    if not isinstance(block, dict):
        raise ConfigError("task: missing task block")
    kind = block.get("kind")
    if kind == "corner":
        if dim != 2:
            raise ConfigError(f"task.kind: corner tasks need a 2-D model (model dim {dim})")
        n = int(block.get("n", 1))
        try:
            target = data.hexagon_corner(block.get("corner", "lower-right"))
        except KeyError:
            raise ConfigError(f"task.corner: unknown corner {block.get('corner')!r}") from None
        x0s = data.sample_base(n, dim, seed)
        phi = inverse.corner_target_loss(target)
        return [Task("corner", i, x0s[i], phi, target=target) for i in range(n)]
    if kind == "image":
        side = data.IMAGE_SIZE
        if dim != side * side:
            raise ConfigError(f"task.kind: image tasks need a {side * side}-D model (model dim {dim})")
        if "operator" not in block:
            raise ConfigError("task.operator: required for image tasks")
        try:
            op = inverse.operator_from_spec(block["operator"], (side, side))
        except ValueError as e:
            raise ConfigError(f"task.operator: {e}") from None
        sigma = float(block.get("sigma", 0.05))
        if sigma < 0:
            raise ConfigError("task.sigma: must be >= 0")
        n = int(block.get("n_images", 1))
        images = data.sample_discs16(n, seed=int(block.get("image_seed", 1000)))
        x0s = data.sample_base(n, dim, seed)
        tasks = []
        for i in range(n):
            obs = inverse.simulate_measurement(op, images[i].ravel(), sigma, seed=seed * 100003 + i)
            phi = inverse.terminal_loss(obs, prefactor=bool(block.get("prefactor", True)))
            tasks.append(Task(op.tag, i, x0s[i], phi, obs=obs))
        return tasks
    raise ConfigError(f"task.kind: expected 'corner' or 'image', got {kind!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: dict, out: Path) -> Path:
    tc = train_config(cfg)
    sampler, dim = dataset_sampler(tc)
    model, losses = flowmodel.train(sampler, dim, tc)
    path = out / "model.ckpt"
    flowmodel.save_checkpoint(model, path)
    write_loss_csv(out / "loss.csv", losses)
    log.info("trained %s model: final loss %.5f", tc.dataset, losses[-1])
    return path


def cmd_sample(cfg: dict, out: Path, seed: int) -> np.ndarray:
    model, _ = obtain_model(cfg, out)
    block = cfg.get("sample", {})
    n, steps = int(block.get("n", 16)), int(block.get("N", 100))
    if n < 1 or steps < 1:
        raise ConfigError("sample: n and N must be >= 1")
    x0s = data.sample_base(n, model.dim, seed)
    ends = []
    for i in range(n):
        traj = dynamics.euler_sample(model, x0s[i], steps)
        if i == 0:
            dynamics.write_trajectory_csv(out / "trajectory_000.csv", traj)
        ends.append(traj.terminal)
    ends = np.array(ends)
    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i"] + [f"x_{j}" for j in range(model.dim)])
        for i, x in enumerate(ends):
            w.writerow([i] + [repr(float(v)) for v in x])
    if model.dim == data.IMAGE_SIZE ** 2:
        for i, x in enumerate(ends):
            data.write_image(out / f"sample_{i:03d}.pgm", x.reshape(data.IMAGE_SIZE, data.IMAGE_SIZE))
    return ends


def _run_job(args) -> dict:
    """Solve one task; module-level so process pools can pickle it."""
    ckpt, cfg, seed, index, out = args
    model = flowmodel.load_checkpoint(ckpt)
    method, gcfg = guidance_config(cfg)
    task = build_tasks(cfg, model.dim, seed)[index]
    try:
        res = control.solve(method, model, task.x0, task.phi, gcfg)
    except (control.SolverError, dynamics.NonFiniteState, FloatingPointError) as e:
        raise control.SolverError(f"{method} failed on job {index}: {e}", method) from None
    job_dir = Path(out) / f"job_{index:03d}"
    job_dir.mkdir(parents=True, exist_ok=True)
    dynamics.write_trajectory_csv(job_dir / "trajectory.csv", res.trajectory)
    extra = {"task": task.name, "job": index, "terminal_error": task.terminal_error(res.terminal)}
    if task.is_image:
        side = data.IMAGE_SIZE
        truth = task.obs.x_true.reshape(side, side)
        restored = np.clip(res.terminal, 0.0, 1.0).reshape(side, side)
        degraded = inverse.degraded_image(task.obs)
        data.write_image(job_dir / "truth.pgm", truth)
        data.write_image(job_dir / "degraded.pgm", degraded)
        data.write_image(job_dir / "restored.pgm", restored)
        extra.update(psnr=_finite(metrics.psnr(restored, truth)), ssim=metrics.ssim(restored, truth),
                     psnr_degraded=_finite(metrics.psnr(degraded, truth)),
                     ssim_degraded=metrics.ssim(degraded, truth))
    summary = res.summary(**extra)
    (job_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _finite(v: float) -> float | str:
    return v if math.isfinite(v) else "inf"


def cmd_guide(cfg: dict, out: Path, seed: int, parallel: int = 1) -> list[dict]:
    method, gcfg = guidance_config(cfg)
    model, ckpt = obtain_model(cfg, out)
    tasks = build_tasks(cfg, model.dim, seed)
    jobs = [(str(ckpt), cfg, seed, t.index, str(out)) for t in tasks]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    results.sort(key=lambda r: r["job"])
    rows = [_metrics_row(r, gcfg, seed) for r in results]
    if len(rows) > 1:
        rows.append(_aggregate_row(rows))
    for row in rows:
        metrics.append_results(out / "results.csv", row)
    agg = {"method": method, "jobs": len(results), "config": control.config_dict(gcfg),
           "mean": _aggregate_row(rows[:len(results)])}
    (out / "summary.json").write_text(json.dumps(agg, indent=2, sort_keys=True, default=str))
    return results


def _metrics_row(summary: dict, gcfg: control.GuidanceConfig, seed: int) -> dict:
    return {"method": summary["method"], "task": summary["task"], "lambda": summary["lambda"],
            "N": gcfg.N, "K": "" if gcfg.K is None else gcfg.K, "seed": f"{seed}:{summary['job']}",
            "psnr": summary.get("psnr", ""), "ssim": summary.get("ssim", ""),
            "terminal_loss": summary["terminal_loss"], "energy": summary["energy"],
            "wall_time_s": summary["wall_time_s"]}


def _aggregate_row(rows: list[dict]) -> dict:
    out = dict(rows[0], seed="mean")
    for key in ("psnr", "ssim", "terminal_loss", "energy", "wall_time_s"):
        vals = [r[key] for r in rows if isinstance(r[key], (int, float))]
        out[key] = float(np.mean(vals)) if vals else ""
    return out


SWEEP_COLUMNS = ("traj_distance", "terminal_error", "energy", "J")


def cmd_sweep_k(cfg: dict, out: Path, seed: int) -> list[dict]:
    """Global baseline vs receding-horizon control across a parameter list.

    Sweeping ``K`` solves the global problem once; sweeping ``lam`` or ``N``
    re-solves it per value since the problem itself changes.
    """
    sweep = cfg.get("sweep")
    if not isinstance(sweep, dict) or len(sweep) != 1:
        raise ConfigError("sweep: expected exactly one of {\"K\": [...]}, {\"lam\": [...]}, {\"N\": [...]}")
    (param, values), = sweep.items()
    if param not in ("K", "lam", "N") or not isinstance(values, list) or not values:
        raise ConfigError(f"sweep.{param}: expected a non-empty list for K, lam or N")
    base = dict(cfg, method="rhc")
    base.setdefault("guidance", {})
    if param == "K":
        base["guidance"] = dict(base["guidance"], K=values[0])
    elif "K" not in base["guidance"]:
        raise ConfigError("guidance.K: required when sweeping lam or N")
    _, gcfg0 = guidance_config(base)
    model, _ = obtain_model(cfg, out)
    task = build_tasks(cfg, model.dim, seed)[0]
    rows = []
    glob = None
    for value in values:
        block = dict(base["guidance"], **{param: value})
        _, gcfg = guidance_config(dict(base, guidance=block))
        gg = control.GuidanceConfig(**{**control.config_dict(gcfg), "K": None,
                                       "n_ctrl": int(cfg.get("global_n_ctrl", 4 * gcfg.n_ctrl))})
        try:
            if glob is None or param != "K":
                glob = control.global_control_solve(model, task.x0, task.phi, gg)
            res = control.mpc_rhc(model, task.x0, task.phi, gcfg)
        except (control.SolverError, dynamics.NonFiniteState) as e:
            raise control.SolverError(f"sweep {param}={value}: {e}", "rhc") from None
        rows.append({param: value,
                     "traj_distance": metrics.trajectory_distance(res.trajectory, glob.trajectory),
                     "terminal_error": task.terminal_error(res.terminal),
                     "energy": res.energy, "J": res.J,
                     "global_terminal_error": task.terminal_error(glob.terminal),
                     "global_energy": glob.energy, "global_J": glob.J})
    header = [param, *SWEEP_COLUMNS, "global_terminal_error", "global_energy", "global_J"]
    name = "sweep_k.csv" if param == "K" else f"sweep_{param}.csv"
    with open(out / name, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows


# ---------------------------------------------------------------------------
# CLI


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpcflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "sample", "guide", "sweep-k"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV}/latest)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--parallel", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        seed = int(cfg.get("seed", 0))
        out = resolve_out(args.out, cfg)
        if args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "sample":
            cmd_sample(cfg, out, seed)
        elif args.command == "guide":
            cmd_guide(cfg, out, seed, args.parallel)
        else:
            cmd_sweep_k(cfg, out, seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (control.SolverError, dynamics.NonFiniteState, flowmodel.DivergenceError) as e:
        print(f"solver error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
