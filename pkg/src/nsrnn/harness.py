"""Experiment configuration, evaluation, sweeps and result files.

A config is a JSON object::

    {
      "task": {"name": "marked-reversal", "params": {}},
      "model": {"hidden_size": 20, "stack": {"type": "rns", "states": 2, "symbols": 3}},
      "train": {"epochs": 100, "lr": 0.005},
      "data": {"train_count": 2000},
      "search": {"lr": {"log_uniform": [0.0005, 0.01]}, "trials": 1, "restarts": 5,
                 "policy": "best"}
    }

Missing ``data`` fields come from the profile (``desk`` or ``paper``).

Result CSV columns are ``run_id, config_hash, seed, step, metric, value,
seconds``; ``step`` is an epoch number for training metrics and a string
length for binned test metrics.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import math
import os
import time
import traceback
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import neural, tasks
from .rng import STREAMS, make_rng

PROFILES = {
    "desk": {"train_lengths": [10, 20], "valid_lengths": [10, 20], "test_lengths": [10, 30],
             "train_count": 2000, "valid_count": 500, "test_per_length": 20,
             "dedup": False},
    "paper": {"train_lengths": [40, 80], "valid_lengths": [40, 80], "test_lengths": [40, 100],
              "train_count": 10000, "valid_count": 1000, "test_per_length": 100,
              "dedup": False},
}

RESULT_COLUMNS = ("run_id", "config_hash", "seed", "step", "metric", "value", "seconds")
MANIFEST_VERSION = 1


class ConfigError(ValueError):
    pass


# configuration

def resolve_config(raw: dict, profile: str = "desk") -> dict:
    """Fill defaults and validate; the result is what gets hashed."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg = copy.deepcopy(raw)
    task = cfg.get("task")
    if isinstance(task, str):
        task = {"name": task}
    if not isinstance(task, dict) or "name" not in task:
        raise ConfigError("config needs task.name")
    task.setdefault("params", {})
    if task["name"] not in tasks.TASK_NAMES:
        raise ConfigError(f"unknown task {task['name']!r}")
    cfg["task"] = task
    model = cfg.setdefault("model", {})
    model.setdefault("hidden_size", 20)
    model.setdefault("stack", None)
    stacks = model["stack"] if isinstance(model["stack"], list) else [model["stack"]]
    for s in stacks:
        if s is None:
            continue
        if s.get("type") not in ("strat", "stratification", "sup", "superposition",
                                 "ns", "rns", "vrns", "none", "lstm"):
            raise ConfigError(f"unknown stack type {s.get('type')!r}")
        if s.get("window") is not None and int(s["window"]) < 2:
            raise ConfigError("window must be at least 2")
    train = cfg.setdefault("train", {})
    unknown = set(train) - set(neural.Schedule.__dataclass_fields__) - {"target"}
    if unknown:
        raise ConfigError(f"unknown training options {sorted(unknown)}")
    data = dict(PROFILES[profile])
    data.update(cfg.get("data", {}))
    cfg["data"] = data
    cfg["profile"] = profile
    search = cfg.setdefault("search", {})
    search.setdefault("trials", 1)
    search.setdefault("restarts", 1)
    search.setdefault("policy", "best")
    if search["policy"] not in ("best", "mean"):
        raise ConfigError("search.policy must be 'best' or 'mean'")
    return cfg


def load_config(path: str, profile: str = "desk") -> dict:
    with open(path, encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return resolve_config(raw, profile)


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def derive_seed(seed: int, *path: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS["search"],) + tuple(path))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# data

@dataclass
class Data:
    task: tasks.Task
    train: list
    valid: list
    test: list
    valid_dist: tasks.TaskDistribution

    @property
    def alphabet(self):
        return self.task.alphabet


def build_task(cfg: dict) -> tasks.Task:
    return tasks.make_task(cfg["task"]["name"], **cfg["task"]["params"])


def build_data(cfg: dict, seed: int, test: bool = True) -> Data:
    task = build_task(cfg)
    d = cfg["data"]
    tr = tasks.sample_dataset(task, *d["train_lengths"], d["train_count"], seed, "data")
    # held-out sets may repeat training strings unless dedup is requested
    seen = {tuple(w) for w in tr} if d.get("dedup") else None
    va = tasks.sample_dataset(task, *d["valid_lengths"], d["valid_count"], seed, "valid",
                              exclude=seen)
    te = (tasks.sample_dataset(task, *d["test_lengths"], 0, seed, "test",
                               per_length=d["test_per_length"], exclude=seen) if test else [])
    return Data(task, tr, va, te, tasks.TaskDistribution(task, *d["valid_lengths"]))


def encode(strings, alphabet) -> list[list[int]]:
    idx = {a: i for i, a in enumerate(alphabet)}
    try:
        return [[idx[a] for a in w] for w in strings]
    except KeyError as exc:
        raise ValueError(f"symbol {exc} is not in the model alphabet") from exc


# evaluation

@dataclass
class CeReport:
    overall: float
    bins: dict = field(default_factory=dict)  # length -> CE difference
    counts: dict = field(default_factory=dict)


def model_scorer(model: neural.StackRnn, alphabet) -> Callable[[Sequence], np.ndarray]:
    """Per-string nats (EOS included) under a trained model."""
    def score(strings):
        out = np.zeros(len(strings))
        groups: dict[int, list[int]] = {}
        for k, w in enumerate(strings):
            groups.setdefault(len(w), []).append(k)
        for _, ks in sorted(groups.items()):
            for i in range(0, len(ks), 64):
                part = ks[i:i + 64]
                out[part] = model.sequence_losses(encode([strings[k] for k in part], alphabet))
        return out
    return score


def oracle_scorer(task: tasks.Task, lengths: tuple[int, int] | None = None):
    """Scores by the true density: conditional on length when ``lengths`` is None."""
    dist = tasks.TaskDistribution(task, *lengths) if lengths else None

    def score(strings):
        if dist is None:
            return np.array([-task.log_prob_given_length(w) for w in strings])
        return np.array([-dist.log_prob(w) for w in strings])
    return score


def ce_difference(score, dataset: Sequence[Sequence[str]], task: tasks.Task,
                  lengths: tuple[int, int] | None = None, binned: bool = True) -> CeReport:
    """Model minus true per-symbol cross-entropy, overall and per string length.

    The overall lower bound uses the uniform length distribution over
    ``lengths`` (default: the dataset's range); each length bin uses the
    length-conditional density as its own lower bound.
    """
    if not dataset:
        raise ValueError("empty dataset")
    lens = [len(w) for w in dataset]
    lengths = lengths or (min(lens), max(lens))
    nats = np.asarray(score(dataset), dtype=np.float64)
    cond = np.array([-task.log_prob_given_length(w) for w in dataset])
    dist = tasks.TaskDistribution(task, *lengths)
    # fewer valid lengths than the range spans is fine; the uniform choice is over valid ones
    true_nats = cond + math.log(len(dist.lengths))
    symbols = np.array(lens) + 1.0
    report = CeReport((nats.sum() - true_nats.sum()) / symbols.sum())
    if binned:
        for n in sorted(set(lens)):
            sel = np.array(lens) == n
            report.bins[n] = float((nats[sel].sum() - cond[sel].sum()) / symbols[sel].sum())
            report.counts[n] = int(sel.sum())
    return report


# runs

@dataclass
class RunResult:
    run_id: str
    seed: int
    params: dict
    status: str
    best_val: float
    best_epoch: int | None
    message: str = ""
    log: list = field(default_factory=list)
    seconds: float = 0.0
    trial: int = 0
    restart: int = 0


def schedule_for(cfg: dict, overrides: dict | None = None) -> tuple[neural.Schedule, float | None]:
    opts = dict(cfg.get("train", {}))
    opts.update(overrides or {})
    target = opts.pop("target", None)
    return neural.Schedule.from_dict(opts), target


def build_model(cfg: dict, alphabet) -> neural.StackRnn:
    m = cfg["model"]
    return neural.StackRnn(len(alphabet), int(m["hidden_size"]), m["stack"])


def train_run(cfg: dict, data: Data, seed: int, params: dict | None = None,
              run_id: str = "run", out_dir: str | None = None,
              deadline: float | None = None) -> tuple[RunResult, neural.StackRnn]:
    """Train one (config, seed); never raises for numerical failures."""
    start = time.perf_counter()
    sched, target = schedule_for(cfg, params)
    model = build_model(cfg, data.alphabet)
    va = data.valid
    lb = tasks.lower_bound_xent(va, data.valid_dist)
    log_path = ckpt = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, f"{run_id}.log.csv")
        ckpt = os.path.join(out_dir, f"{run_id}.ckpt.npz")
    try:
        res = neural.train(model, encode(data.train, data.alphabet), encode(va, data.alphabet),
                           lb, sched, seed=seed, log_path=log_path, checkpoint_path=ckpt,
                           target=target, deadline=deadline)
        status, msg = res.status, res.message
    except Exception as exc:  # a failed run is recorded, not fatal to a sweep
        res = neural.TrainResult(seed=seed)
        status, msg = "error", f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
    if ckpt and res.best_epoch is not None:
        neural.save_checkpoint(ckpt, model, extra={
            "alphabet": list(data.alphabet), "config": cfg, "seed": seed,
            "best_epoch": res.best_epoch, "val_ce_diff": res.best_val})
    result = RunResult(run_id, seed, dict(params or {}), status, res.best_val, res.best_epoch,
                       msg, res.log, time.perf_counter() - start)
    return result, model


def search_points(cfg: dict, seed: int) -> list[dict]:
    """Hyperparameter settings: a grid when every entry is a list, else random draws."""
    space = {k: v for k, v in cfg["search"].items()
             if k not in ("trials", "restarts", "policy")}
    if not space:
        return [{}]
    if all(isinstance(v, list) for v in space.values()):
        keys = sorted(space)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(space[k] for k in keys))]
    rng = make_rng(seed, "search")
    points = []
    for _ in range(int(cfg["search"]["trials"])):
        p = {}
        for k in sorted(space):
            v = space[k]
            if isinstance(v, dict) and "log_uniform" in v:
                a, b = v["log_uniform"]
                p[k] = float(math.exp(rng.uniform(math.log(a), math.log(b))))
            elif isinstance(v, dict) and "uniform" in v:
                p[k] = float(rng.uniform(*v["uniform"]))
            elif isinstance(v, list):
                p[k] = v[int(rng.integers(len(v)))]
            else:
                p[k] = v
        points.append(p)
    return points


def select(runs: Sequence[RunResult], policy: str = "best") -> dict:
    """Pick the winner: the single best restart, or the setting with the best mean.

    Ties and order are resolved by run id, so the choice does not depend on
    the order runs finished in.
    """
    ok = sorted((r for r in runs if r.status == "ok" and math.isfinite(r.best_val)),
                key=lambda r: r.run_id)
    if not ok:
        return {"policy": policy, "run_id": None, "value": None}
    if policy == "best":
        best = min(ok, key=lambda r: (r.best_val, r.run_id))
        return {"policy": policy, "run_id": best.run_id, "trial": best.trial,
                "params": best.params, "value": best.best_val}
    by_trial: dict[int, list[RunResult]] = {}
    for r in ok:
        by_trial.setdefault(r.trial, []).append(r)
    means = {t: float(np.mean([r.best_val for r in rs])) for t, rs in by_trial.items()}
    trial = min(means, key=lambda t: (means[t], t))
    best = min(by_trial[trial], key=lambda r: (r.best_val, r.run_id))
    return {"policy": policy, "trial": trial, "params": best.params, "value": means[trial],
            "run_id": best.run_id, "best_restart_value": best.best_val}


def _job(args):
    cfg, data_seed, seed, params, run_id, out_dir, trial, restart = args
    data = build_data(cfg, data_seed, test=False)
    res, _ = train_run(cfg, data, seed, params, run_id, out_dir)
    res.trial, res.restart = trial, restart
    return res


def sweep(cfg: dict, seed: int, out_dir: str | None = None, jobs: int = 1,
          progress: Callable[[RunResult], None] | None = None) -> tuple[list[RunResult], dict]:
    """Every search point times ``restarts`` runs; data are shared, inits differ."""
    points = search_points(cfg, seed)
    restarts = int(cfg["search"]["restarts"])
    work = []
    for t, p in enumerate(points):
        for r in range(restarts):
            work.append((cfg, seed, derive_seed(seed, t, r), p, f"t{t:03d}r{r:02d}", out_dir, t, r))
    runs: list[RunResult] = []
    if jobs > 1 and len(work) > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(jobs) as pool:
            for res in pool.imap_unordered(_job, work):
                runs.append(res)
                if progress:
                    progress(res)
    else:
        for w in work:
            res = _job(w)
            runs.append(res)
            if progress:
                progress(res)
    runs.sort(key=lambda r: r.run_id)
    return runs, select(runs, cfg["search"]["policy"])


# output files

def result_rows(run: RunResult, chash: str) -> list[dict]:
    rows = []
    for row in run.log:
        for metric in ("train_loss", "val_ce_diff", "lr"):
            rows.append({"run_id": run.run_id, "config_hash": chash, "seed": run.seed,
                         "step": row["epoch"], "metric": metric, "value": row[metric],
                         "seconds": row["seconds"]})
    return rows


def report_rows(report: CeReport, run_id: str, chash: str, seed: int, seconds: float):
    rows = [{"run_id": run_id, "config_hash": chash, "seed": seed, "step": "all",
             "metric": "test_ce_diff", "value": report.overall, "seconds": seconds}]
    for n, v in report.bins.items():
        rows.append({"run_id": run_id, "config_hash": chash, "seed": seed, "step": n,
                     "metric": "test_ce_diff", "value": v, "seconds": seconds})
    return rows


def write_results(path: str, rows: Sequence[dict], append: bool = False) -> None:
    exists = append and os.path.exists(path)
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        if not exists:
            w.writeheader()
        for r in rows:
            w.writerow(r)


def write_manifest(path: str, **content) -> None:
    doc = {"version": MANIFEST_VERSION}
    doc.update(content)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def run_summary(r: RunResult) -> dict:
    return {"run_id": r.run_id, "seed": r.seed, "params": r.params, "status": r.status,
            "best_val_ce_diff": r.best_val if math.isfinite(r.best_val) else None,
            "best_epoch": r.best_epoch, "epochs": len(r.log), "seconds": r.seconds,
            "trial": r.trial, "restart": r.restart,
            "message": r.message.splitlines()[0] if r.message else ""}
