"""Pool-based active learning driven by informativeness scores, plus the
experiment battery built on it (batch-size, dataset-switch and noise sweeps).

One seed of :func:`run_active_learning`:

1. split the dataset, label a class-stratified 10% of the pool and train M0;
2. prepare the strategy context (autoencoder + online forest for deep
   features, Borda direction calibration for GLCM/shape features);
3. repeat: score the unlabeled pool, query the top ``batch_size`` ids,
   fine-tune, evaluate; until the AUC target or ``max_fraction`` is reached;
4. train the fully supervised (FSL) reference on the whole pool.
"""
from __future__ import annotations

import copy
import csv
import functools
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import deepsel
from . import features as F
from .metrics import UndefinedMetricError, paired_t_test, roc_auc
from .nnet import Classifier, TrainConfig, TrainingError, train_autoencoder, train_classifier
from .saliency import saliency_batch
from .strategies import (PYRAD_FAMILY, StrategyContext, StrategyId, deep_latents,
                         score_pool, select_top_n)
from .synthdata import (DatasetSpec, Oracle, evaluation_labels, generate_dataset,
                        inject_noise, split)

log = logging.getLogger(__name__)

INCREMENT = 0.1
NOISE_SIGMAS = (0.005, 0.01, 0.05, 0.1)

# desk-scale task used by the experiment battery
STANDARD_DATASET = DatasetSpec(n_images=200, size=32, positive_fraction=0.3, contrast=0.1,
                               noise_sigma=0.05, vendor="A", task="effusion_like", seed=0)
STANDARD_TRAIN = TrainConfig(lr=3e-3, max_epochs=60, patience=10, augment_folds=1,
                             translation=5.0)


class ConfigError(ValueError):
    pass


def _train_dict(cfg):
    return cfg.to_dict() if isinstance(cfg, TrainConfig) else dict(cfg)


@dataclass
class ALConfig:
    strategy: str = "deep_features"
    batch_size: int = 16
    auc_target: float | None = None
    max_fraction: float = 1.0
    seeds: list = field(default_factory=lambda: list(range(10)))
    increment: float = INCREMENT
    init_fraction: float = 0.1
    dataset: dict = field(default_factory=lambda: STANDARD_DATASET.to_dict())
    dataset_b: dict | None = None
    switch_fraction: float | None = None
    noise_sigma: float = 0.0
    saliency: str = "deep_taylor"
    train: dict = field(default_factory=lambda: STANDARD_TRAIN.to_dict())
    finetune_epochs: int = 20
    retrain_scratch: bool = False
    dropout_p: float = 0.2
    input_offset: float | str = 0.5
    mc_samples: int = 20
    aggregate: str = "sum"
    K: int = 10
    probe_epochs: int = 5
    ae_epochs: int = 150
    refresh_rf: bool = False
    pseudo_labels: bool = False
    calibration_size: int = 20
    stop_at_crossing: bool = False

    def validate(self):
        StrategyId.parse(self.strategy)
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.auc_target is not None and not 0.0 <= self.auc_target <= 1.0:
            raise ConfigError("auc_target must lie in [0, 1]")
        if not 0.0 < self.max_fraction <= 1.0:
            raise ConfigError("max_fraction must lie in (0, 1]")
        if not 0.0 < self.init_fraction < 1.0:
            raise ConfigError("init_fraction must lie in (0, 1)")
        if self.switch_fraction is not None:
            if self.dataset_b is None:
                raise ConfigError("switch_fraction needs dataset_b")
            if not 0.0 < self.switch_fraction <= 1.0:
                raise ConfigError("switch_fraction must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.saliency not in ("deep_taylor", "grad_cam", "grad_input"):
            raise ConfigError(f"unknown saliency method {self.saliency!r}")
        if self.input_offset != "image_mean" and not isinstance(self.input_offset, (int, float)):
            raise ConfigError("input_offset must be a number or 'image_mean'")
        if self.aggregate not in ("sum", "mean"):
            raise ConfigError("aggregate must be 'sum' or 'mean'")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        try:
            self.dataset_spec().validate()
            if self.dataset_b is not None:
                DatasetSpec.from_dict(self.dataset_b).validate()
            TrainConfig.from_dict(self.train)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def dataset_spec(self):
        return DatasetSpec.from_dict(self.dataset)

    def train_config(self, seed=0, **over):
        return replace(TrainConfig.from_dict(self.train), seed=seed, **over)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        d = dict(d)
        if "train" in d:
            d["train"] = _train_dict(d["train"])
        return cls(**d).validate()


# results ------------------------------------------------------------------------

@dataclass
class SeedRun:
    seed: int
    states: list            # dicts: iteration, n_labeled, fraction, val, test
    fsl: dict               # reference metric: {"val", "test"}
    queries: int
    selections: list        # per iteration, the ids queried
    aborted: str | None = None
    switch_iteration: int | None = None
    context_log: dict = field(default_factory=dict)

    def milestones(self, increment=INCREMENT):
        """AUCs of the first model state at or beyond each reporting fraction."""
        out = []
        for m in _milestones(increment):
            hit = next((s for s in self.states if s["fraction"] >= m - 1e-9), None)
            if hit is not None:
                out.append((m, hit["val"], hit["test"]))
        return out

    def crossing(self):
        """(labeled fraction, iteration) of the first state reaching the FSL test AUC.

        Runs that never get there report fraction 1.0 and the iteration count
        needed to label the whole pool.
        """
        for s in self.states:
            if s["test"] >= self.fsl["test"]:
                return s["fraction"], s["iteration"]
        return 1.0, self.states[-1].get("iterations_to_full", self.states[-1]["iteration"])


def _milestones(increment):
    n = int(round(1.0 / increment))
    return [round(increment * k, 10) for k in range(1, n + 1)]


@dataclass
class LearningCurve:
    strategy: str
    runs: list
    increment: float = INCREMENT
    switch_fraction: float | None = None
    metric: str = "auc"

    @property
    def ok_runs(self):
        return [r for r in self.runs if r.aborted is None]

    @property
    def aborted_seeds(self):
        return [r.seed for r in self.runs if r.aborted is not None]

    def fractions(self):
        return _milestones(self.increment)

    def mean_curve(self, column="test"):
        """(fractions, seed-mean metric) at the reporting fractions."""
        col = 2 if column == "test" else 1
        per = {}
        for r in self.ok_runs:
            for row in r.milestones(self.increment):
                per.setdefault(row[0], []).append(row[col])
        fr = sorted(per)
        return np.array(fr), np.array([np.mean(per[f]) for f in fr])

    def fsl_reference(self):
        return float(np.mean([r.fsl["test"] for r in self.ok_runs]))

    def crossing_fractions(self):
        return np.array([r.crossing()[0] for r in self.ok_runs])

    def iterations_to_cross(self):
        return np.array([r.crossing()[1] for r in self.ok_runs])

    @property
    def crossing_fraction(self):
        """First reporting fraction whose seed-mean AUC reaches the mean FSL AUC."""
        fr, auc = self.mean_curve()
        ref = self.fsl_reference()
        hit = [f for f, a in zip(fr, auc) if a >= ref]
        return float(hit[0]) if hit else 1.0

    def aulc(self, column="test"):
        fr, auc = self.mean_curve(column)
        return float(np.trapezoid(auc, fr)) if len(fr) > 1 else 0.0

    def final_auc(self):
        return float(np.mean([r.states[-1]["test"] for r in self.ok_runs]))

    def rows(self):
        for r in self.ok_runs:
            for f, av, at in r.milestones(self.increment):
                yield [self.strategy, r.seed, f"{f:.2f}", f"{av:.6f}", f"{at:.6f}"]


def write_curve_csv(path, curves, header=None):
    """Long-form curve table; AUC curves use ``auc_val``/``auc_test`` columns,
    other metrics add a ``metric`` column."""
    metric = curves[0].metric if curves else "auc"
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        if metric == "auc":
            w.writerow(["strategy", "seed", "fraction", "auc_val", "auc_test"])
        else:
            w.writerow(["strategy", "seed", "fraction", "metric", "value_val", "value_test"])
        for c in curves:
            for row in c.rows():
                w.writerow(row if metric == "auc" else row[:3] + [metric] + row[3:])


def summarize(curves, reference="random"):
    """Crossing fractions, FSL references and paired p-values against ``reference``."""
    out = {"strategies": {}}
    ref = next((c for c in curves if c.strategy == reference), None)
    for c in curves:
        entry = {
            "crossing_fraction_mean": float(np.mean(c.crossing_fractions())) if c.ok_runs
            else None,
            "crossing_fraction_of_mean_curve": c.crossing_fraction if c.ok_runs else None,
            "crossing_fractions": [float(v) for v in c.crossing_fractions()],
            "fsl_reference": {str(r.seed): r.fsl for r in c.ok_runs},
            "final_auc": c.final_auc() if c.ok_runs else None,
            "aulc": c.aulc() if c.ok_runs else None,
            "aborted_seeds": c.aborted_seeds,
        }
        if ref is not None and c is not ref:
            a, b = _paired(c, ref)
            try:
                entry[f"p_value_vs_{reference}"] = paired_t_test(a, b) if len(a) >= 2 else None
            except UndefinedMetricError:
                entry[f"p_value_vs_{reference}"] = None
        out["strategies"][c.strategy] = entry
    return out


def _paired(a, b):
    ca = {r.seed: r.crossing()[0] for r in a.ok_runs}
    cb = {r.seed: r.crossing()[0] for r in b.ok_runs}
    common = sorted(set(ca) & set(cb))
    return np.array([ca[s] for s in common]), np.array([cb[s] for s in common])


# shared per-seed setup (cached: identical for every strategy of a seed) -------------

@functools.lru_cache(maxsize=8)
def _dataset(spec):
    return generate_dataset(spec)


def _auc(model, X, y):
    try:
        return roc_auc(model.predict_proba(X), y)
    except UndefinedMetricError:
        return 0.5


class _Task:
    """Split, evaluation sets and (possibly noisy) pool pixels of one dataset and seed."""

    def __init__(self, spec, seed, noise_sigma, ratios=(0.7, 0.1, 0.2)):
        self.spec = spec
        self.ds = _dataset(spec)
        self.pool = split(self.ds, ratios, seed=seed)
        self.pool_ids = list(self.pool.unlabeled)
        px = self.ds.images(self.pool_ids)
        if noise_sigma > 0:
            px = inject_noise(px, noise_sigma, np.random.default_rng([seed, 7919]))
        self.pool_px = {i: p for i, p in zip(self.pool_ids, px)}
        vi, ti = list(self.pool.validation), list(self.pool.test)
        self.val = (self.ds.images(vi), evaluation_labels(self.ds, vi))
        self.test = (self.ds.images(ti), evaluation_labels(self.ds, ti))

    def images(self, ids):
        return np.array([self.pool_px[i] for i in ids]) if ids else \
            np.zeros((0, self.spec.size, self.spec.size))

    def evaluate(self, model):
        return _auc(model, *self.val), _auc(model, *self.test)


_CACHE = {}


def _cached(key, fn):
    if key not in _CACHE:
        _CACHE[key] = fn()
    return _CACHE[key]


def clear_cache():
    _CACHE.clear()
    _dataset.cache_clear()


def _key(*parts):
    return json.dumps(parts, sort_keys=True, default=str)


def _init_ids(task, fraction, seed):
    """Class-stratified initial subset of the pool (ids only; labels come from the oracle)."""
    ids = task.pool_ids
    y = evaluation_labels(task.ds, ids)
    n = max(2, int(round(fraction * len(ids))))
    rng = np.random.default_rng([seed, 17])
    pos = [i for i, v in zip(ids, y) if v == 1]
    neg = [i for i, v in zip(ids, y) if v == 0]
    n_pos = int(round(n * len(pos) / len(ids)))
    n_pos = min(max(n_pos, 1 if pos else 0), len(pos))
    n_neg = min(n - n_pos, len(neg))
    chosen = list(rng.choice(pos, n_pos, replace=False)) + list(rng.choice(neg, n_neg, replace=False))
    order = {i: k for k, i in enumerate(ids)}
    return sorted(chosen, key=order.get)


def _model_key(cfg):
    return [cfg.dropout_p, cfg.input_offset]


def _model_for(cfg, seed):
    spec = cfg.dataset_spec()
    return Classifier(size=spec.size, dropout_p=cfg.dropout_p, seed=seed,
                      input_offset=cfg.input_offset)


def _base(cfg, task, seed, init_ids, init_labels):
    key = _key("base", cfg.dataset, cfg.train, cfg.noise_sigma, _model_key(cfg), seed,
               init_ids)

    def fit():
        model, _ = train_classifier(_model_for(cfg, seed), task.images(init_ids), init_labels,
                                    cfg.train_config(seed), val=task.val)
        return model
    return _cached(key, fit)


def _fsl(cfg, task, seed):
    key = _key("fsl", cfg.dataset, cfg.train, cfg.noise_sigma, _model_key(cfg), seed)

    def fit():
        y = evaluation_labels(task.ds, task.pool_ids)
        model, _ = train_classifier(_model_for(cfg, seed), task.images(task.pool_ids), y,
                                    cfg.train_config(seed), val=task.val)
        va, te = task.evaluate(model)
        return {"val": va, "test": te}
    return _cached(key, fit)


def _representation_maps(strategy, model, images, cfg):
    if strategy.on_raw_image:
        return np.asarray(images, dtype=float)
    return saliency_batch(model, images, cfg.saliency)[0]


def _deep_context(cfg, strategy, task, seed, base, init_ids, init_labels, pool_ids):
    key = _key("deep", cfg.dataset, cfg.train, cfg.noise_sigma, _model_key(cfg), seed,
               cfg.saliency, strategy.representation, cfg.K, cfg.probe_epochs,
               cfg.ae_epochs, init_ids)

    def build():
        imgs = task.images(pool_ids)
        maps = _representation_maps(strategy, base, imgs, cfg)
        from .nnet import prepare_map
        ae, losses = train_autoencoder(np.array([prepare_map(m) for m in maps]),
                                       epochs=cfg.ae_epochs, seed=seed)
        Z = deep_latents(ae, maps)
        # the training stage queries its own oracle so the main loop's budget is untouched
        ssl = deepsel.run_self_supervised_training(
            pool_ids, Z, imgs, Oracle(task.ds), base, (task.images(init_ids), init_labels),
            task.val, K=cfg.K, cfg=cfg.train_config(seed), seed=seed,
            pseudo_labels=cfg.pseudo_labels, probe_epochs=cfg.probe_epochs)
        return ae, ssl.forest, {"ssl_iterations": len(ssl.journal),
                                "ssl_queries": ssl.queries, "ae_mse": [losses[0], losses[-1]],
                                "journal": ssl.journal}
    return _cached(key, build)


def _calibrate(cfg, strategy, task, seed, base, init_ids, init_labels, pool_ids):
    family = PYRAD_FAMILY[strategy.name]
    key = _key("calib", cfg.dataset, cfg.train, cfg.noise_sigma, _model_key(cfg), seed,
               cfg.saliency, strategy.representation, family, cfg.calibration_size, init_ids)

    def build():
        rng = np.random.default_rng([seed, 31])
        n = min(cfg.calibration_size, len(pool_ids))
        probe = [pool_ids[i] for i in sorted(rng.choice(len(pool_ids), n, replace=False))]
        oracle = Oracle(task.ds)
        labels = oracle.labels(probe)
        train = (task.images(init_ids), init_labels)
        tc = cfg.train_config(seed)
        deltas, control = [], None
        for pid, lab in zip(probe, labels):
            d, control = deepsel.probe_delta_auc(base, train, (task.images([pid]), [lab]),
                                                 task.val, tc, cfg.probe_epochs, control)
            deltas.append(d)
        maps = _representation_maps(strategy, base, task.images(probe), cfg)
        dirs = F.calibrate_directions(F.feature_matrix(maps, family), np.array(deltas))
        return family, dirs
    return _cached(key, build)


def _threads():
    try:
        return max(1, int(os.environ.get("IDEAL_THREADS", "1")))
    except ValueError:
        return 1


# one seed ---------------------------------------------------------------------------

def run_seed(cfg, seed):
    """Run one seed of the loop; failures are caught and reported in ``aborted``."""
    strategy = StrategyId.parse(cfg.strategy)
    try:
        return _run_seed(cfg, strategy, seed)
    except (TrainingError, ValueError, FloatingPointError) as exc:
        log.warning("seed %s aborted: %s", seed, exc)
        return SeedRun(seed, [], {}, 0, [], aborted=f"{type(exc).__name__}: {exc}")


def _run_seed(cfg, strategy, seed):
    task = _Task(cfg.dataset_spec(), seed, cfg.noise_sigma)
    task_b = None
    if cfg.dataset_b is not None and cfg.switch_fraction is not None \
            and cfg.switch_fraction < 1.0:
        task_b = _Task(DatasetSpec.from_dict(cfg.dataset_b), seed, cfg.noise_sigma)
    oracle = Oracle(task.ds)
    pool_size = len(task.pool_ids)
    init_ids = _init_ids(task, cfg.init_fraction, seed)
    init_labels = oracle.labels(init_ids)
    labeled = dict(zip(init_ids, (int(v) for v in init_labels)))
    unlabeled = [i for i in task.pool_ids if i not in labeled]
    model = _base(cfg, task, seed, init_ids, init_labels)
    fsl = _fsl(cfg, task, seed)

    context = StrategyContext(saliency_method=cfg.saliency, mc_samples=cfg.mc_samples,
                              aggregate=cfg.aggregate, seed=seed)
    ctx_log = {}
    if strategy.name == "deep_features":
        ae, forest, info = _deep_context(cfg, strategy, task, seed, model, init_ids,
                                         init_labels, unlabeled)
        if cfg.refresh_rf:
            # the cached forest is shared between runs; refreshing works on a copy
            forest = copy.deepcopy(forest)
            refresh_oracle = Oracle(task.ds)
            ctx_log["refresh_queries"] = 0
        context.deep[strategy.representation] = (ae, forest)
        ctx_log.update({k: v for k, v in info.items() if k != "journal"})
    elif strategy.name in ("pyrad_glcm", "pyrad_shape"):
        fam, dirs = _calibrate(cfg, strategy, task, seed, model, init_ids, init_labels,
                               unlabeled)
        context.directions[fam] = dirs
        ctx_log["directions"] = {fam: dirs}

    active, active_oracle = task, oracle
    images = {i: task.pool_px[i] for i in task.pool_ids}
    va, te = active.evaluate(model)
    states = [{"iteration": 0, "n_labeled": len(labeled), "fraction": len(labeled) / pool_size,
               "val": va, "test": te}]
    selections = []
    switch_it = None
    it = 0
    while unlabeled:
        frac = len(labeled) / pool_size
        if frac >= cfg.max_fraction - 1e-12 and it > 0:
            break
        if task_b is not None and switch_it is None and frac >= cfg.switch_fraction - 1e-12:
            # switch: the rest of the queries come from dataset B's pool
            switch_it = it
            active, active_oracle = task_b, Oracle(task_b.ds)
            room = pool_size - len(labeled)
            unlabeled = list(task_b.pool_ids[:room])
            images.update({i: task_b.pool_px[i] for i in unlabeled})
        it += 1
        pool_imgs = np.array([images[i] for i in unlabeled])
        context.seed = int(np.random.default_rng([seed, it]).integers(2 ** 31))
        sheet = score_pool(strategy, model, unlabeled, pool_imgs, context)
        n = min(cfg.batch_size, len(unlabeled))
        batch = select_top_n(sheet, n, reversed=strategy.reversed)
        for i in batch:
            labeled[i] = active_oracle.label(i)
        chosen = set(batch)
        unlabeled = [i for i in unlabeled if i not in chosen]
        selections.append(list(batch))
        ids = list(labeled)
        X = np.array([images[i] for i in ids])
        y = np.array([labeled[i] for i in ids])
        tc = cfg.train_config(seed * 1000 + it)
        if cfg.retrain_scratch:
            model, _ = train_classifier(_model_for(cfg, seed), X, y, tc, val=active.val)
        else:
            model, _ = train_classifier(model, X, y, tc, val=active.val,
                                        epochs=cfg.finetune_epochs)
        if cfg.refresh_rf and strategy.name == "deep_features" and len(unlabeled) >= cfg.K:
            # one more self-supervised round under the current model, on its own oracle
            rest = np.array([images[i] for i in unlabeled])
            Z = deep_latents(ae, _representation_maps(strategy, model, rest, cfg))
            ssl_oracle = refresh_oracle if active is task else Oracle(active.ds)
            _, _, _, _, nq = deepsel.ssl_round(
                Z, range(len(unlabeled)), unlabeled, rest, ssl_oracle, model, (X, y),
                active.val, forest, cfg.K, tc, seed * 1000 + it, cfg.pseudo_labels,
                cfg.probe_epochs)
            ctx_log["refresh_queries"] += nq
        va, te = active.evaluate(model)
        states.append({"iteration": it, "n_labeled": len(labeled),
                       "fraction": len(labeled) / pool_size, "val": va, "test": te})
        if cfg.auc_target is not None and va >= cfg.auc_target:
            break
        if cfg.stop_at_crossing and te >= fsl["test"]:
            break
    remaining = pool_size - states[0]["n_labeled"]
    states[-1]["iterations_to_full"] = math.ceil(remaining / cfg.batch_size)
    queries = oracle.count + (active_oracle.count if active_oracle is not oracle else 0)
    return SeedRun(seed, states, fsl, queries, selections, switch_iteration=switch_it,
                   context_log=ctx_log)


def _run_job(args):
    cfg_dict, seed = args
    return run_seed(ALConfig.from_dict(cfg_dict), seed)


def run_active_learning(cfg):
    """All seeds of one configuration -> LearningCurve."""
    if isinstance(cfg, dict):
        cfg = ALConfig.from_dict(cfg)
    cfg.validate()
    jobs = [(cfg.to_dict(), s) for s in cfg.seeds]
    threads = min(_threads(), len(jobs))
    if threads > 1:
        with ProcessPoolExecutor(threads) as ex:
            runs = list(ex.map(_run_job, jobs))
    else:
        runs = [run_seed(cfg, s) for s in cfg.seeds]
    return LearningCurve(str(StrategyId.parse(cfg.strategy)), runs, cfg.increment,
                         cfg.switch_fraction)


# experiment battery --------------------------------------------------------------------

def batch_size_sweep(cfg, sizes):
    """Crossing fraction and iterations-to-cross per batch size (seed means)."""
    if not sizes:
        raise ValueError("sizes must be non-empty")
    table = []
    for b in sizes:
        curve = run_active_learning(replace(cfg, batch_size=int(b)))
        table.append({"batch_size": int(b),
                      "crossing_fraction": float(np.mean(curve.crossing_fractions())),
                      "iterations_to_cross": float(np.mean(curve.iterations_to_cross())),
                      "curve": curve})
    fr = [row["crossing_fraction"] for row in table]
    if any(b > a + 1e-12 for a, b in zip(fr[1:], fr[:-1])):
        warnings.warn("crossing fraction is not non-decreasing in batch size")
    return table


def dataset_switch_run(cfg, spec_a, spec_b, switch_fraction=0.5):
    a = spec_a.to_dict() if isinstance(spec_a, DatasetSpec) else dict(spec_a)
    b = spec_b.to_dict() if isinstance(spec_b, DatasetSpec) else dict(spec_b)
    return run_active_learning(replace(cfg, dataset=a, dataset_b=b,
                                       switch_fraction=switch_fraction))


def noise_sweep(cfg, sigmas=NOISE_SIGMAS):
    return {float(s): run_active_learning(replace(cfg, noise_sigma=float(s))) for s in sigmas}
