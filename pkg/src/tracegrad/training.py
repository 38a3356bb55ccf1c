"""Training objective, optimizer loop, metrics and the ablation runner.

The objective is ``loss_H + mu * loss_T`` with
``mu = lam * loss_H / loss_T`` where the ratio is a constant for
differentiation, so the trace term is rescaled to the Hamiltonian loss
without adding a gradient path through the scale itself.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .errors import ConfigurationError, DivergenceError, ParameterError, UsageError
from .model import GraphBatch, Model, ModelConfig, SampleGraph
from .structures import OrbitalBasisSpec, PairBlockSet

CHALLENGING_FRACTION = 0.05
DEGENERACY_TOL = 1e-9
SYMMETRY_TOL = 1e-10
DEFAULT_LAMBDA = 0.3

ARMS = (
    ("baseline", "off", False),
    ("+Trace", "off", True),
    ("+Gate", "gate", False),
    ("+Grad", "grad", False),
    ("+TraceGate", "gate", True),
    ("+TraceGrad", "grad", True),
)


@dataclass
class TrainConfig:
    lam: float = DEFAULT_LAMBDA
    lr: float = 2e-3
    epochs: int = 400
    batch: int = 32
    seed: int = 0
    threads: int = 1
    decay_patience: int = 40
    decay_factor: float = 0.5
    min_lr: float = 1e-5
    log_every: int = 1

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0) or not math.isfinite(self.lam):
            raise ConfigurationError(f"lam must lie in [0, 1], got {self.lam}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch < 1 or self.threads < 1:
            raise ConfigurationError("batch and threads must be >= 1")
        if not (0 < self.decay_factor <= 1):
            raise ConfigurationError("decay_factor must lie in (0, 1]")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    loss_H: float
    loss_T: float
    mu: float
    total: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _check_targets(h_pred: Node, t_pred: Node | None, targets: dict):
    if targets is None:
        raise ParameterError("batch carries no targets")
    if h_pred.shape != targets["H"].shape:
        raise ParameterError(f"predicted blocks {h_pred.shape} do not match targets {targets['H'].shape}")
    if t_pred is not None and t_pred.shape != targets["T"].shape:
        raise ParameterError(f"predicted traces {t_pred.shape} do not match targets {targets['T'].shape}")


def loss_sums(h_pred: Node, t_pred: Node | None, targets: dict) -> tuple[Node, Node | None]:
    """(sum of squared block errors, sum of absolute trace errors) over valid entries."""
    _check_targets(h_pred, t_pred, targets)
    diff = ad.mul(ad.sub(h_pred, targets["H"]), targets["H_mask"])
    sse = ad.sum_(ad.mul(diff, diff))
    if t_pred is None:
        return sse, None
    sae = ad.sum_(ad.mul(ad.abs_(ad.sub(t_pred, targets["T"])), targets["T_mask"]))
    return sse, sae


def compute_loss(h_pred: Node, t_pred: Node | None, targets: dict, lam: float) -> tuple[Node, LossBreakdown]:
    """Total loss on the tape plus its numeric breakdown."""
    sse, sae = loss_sums(h_pred, t_pred, targets)
    loss_h = ad.scale(sse, 1.0 / max(targets["H_mask"].sum(), 1.0))
    if sae is None:
        lh = float(loss_h.value)
        return loss_h, LossBreakdown(lh, 0.0, 0.0, lh)
    loss_t = ad.scale(sae, 1.0 / max(targets["T_mask"].sum(), 1.0))
    lh, lt = float(loss_h.value), float(loss_t.value)
    if lam == 0.0 or lt == 0.0:
        return loss_h, LossBreakdown(lh, lt, 0.0, lh)
    mu = ad.scale(ad.mul(ad.detach(loss_h), ad.pow_(ad.detach(loss_t), -1.0)), lam)
    total = ad.add(loss_h, ad.mul(mu, loss_t))
    return total, LossBreakdown(lh, lt, float(mu.value), float(total.value))


def mu_value(loss_h: float, loss_t: float, lam: float) -> float:
    return 0.0 if lam == 0.0 or loss_t == 0.0 else lam * loss_h / loss_t


# ---------------------------------------------------------------------------
# Gradients with deterministic chunk reduction
# ---------------------------------------------------------------------------


@dataclass
class _Chunk:
    tape: Tape
    params: dict
    sse: Node
    sae: Node | None
    n_h: float
    n_t: float


def _forward_chunk(model: Model, params: dict, samples: list) -> _Chunk:
    tape = Tape()
    p = model.lift_params(tape, params)
    batch = model.collate(samples)
    h, t, _ = model.forward(tape, batch, p)
    sse, sae = loss_sums(h, t, batch.targets)
    return _Chunk(tape, p, sse, sae, float(batch.targets["H_mask"].sum()), float(batch.targets["T_mask"].sum()))


def _backward_chunk(ch: _Chunk, names: list, w_h: float, w_t: float) -> list:
    obj = ad.scale(ch.sse, w_h)
    if ch.sae is not None and w_t != 0.0:
        obj = ad.add(obj, ad.scale(ch.sae, w_t))
    grads = [g.value for g in ch.tape.grad(obj, [ch.params[n] for n in names])]
    ch.tape.release()
    return grads


def loss_and_grad(model: Model, params: dict, samples: list, lam: float, threads: int = 1, pool=None):
    """(LossBreakdown, {name: gradient}) for one minibatch.

    The batch is split into ``threads`` chunks, each on its own tape.  The
    global losses fix ``mu`` first; each chunk then backpropagates its share
    and the gradients are summed in chunk order, so the result does not
    depend on scheduling.
    """
    chunks = [list(c) for c in np.array_split(np.arange(len(samples)), min(threads, len(samples))) if len(c)]
    groups = [[samples[i] for i in c] for c in chunks]
    run = pool.map if pool is not None and len(groups) > 1 else map
    fwd = list(run(lambda g: _forward_chunk(model, params, g), groups))
    n_h = sum(c.n_h for c in fwd)
    n_t = sum(c.n_t for c in fwd)
    loss_h = sum(float(c.sse.value) for c in fwd) / max(n_h, 1.0)
    has_t = fwd[0].sae is not None
    loss_t = sum(float(c.sae.value) for c in fwd) / max(n_t, 1.0) if has_t else 0.0
    mu = mu_value(loss_h, loss_t, lam) if has_t else 0.0
    names = sorted(params)
    w_h, w_t = 1.0 / max(n_h, 1.0), mu / max(n_t, 1.0)
    parts = list(run(lambda c: _backward_chunk(c, names, w_h, w_t), fwd))
    grads = {}
    for k, n in enumerate(names):
        g = parts[0][k].copy()
        for other in parts[1:]:
            g += other[k]
        grads[n] = g
    return LossBreakdown(loss_h, loss_t, mu, loss_h + mu * loss_t), grads


# ---------------------------------------------------------------------------
# Optimizer and training loop
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        if state is not None:
            self.load_state(state)

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            out[k] = p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out

    def state(self) -> dict:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["t"] = np.array([float(self.t)])
        out["lr"] = np.array([self.lr])
        return out

    def load_state(self, state: dict):
        for k in self.m:
            self.m[k] = np.array(state[f"m.{k}"])
            self.v[k] = np.array(state[f"v.{k}"])
        self.t = int(state["t"][0])
        self.lr = float(state["lr"][0])


@dataclass
class EpochLog:
    epoch: int
    loss_H: float
    loss_T: float
    mu: float
    total: float
    val_mae_all: float | None
    lr: float
    seconds: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    log: list
    best_epoch: int
    best_val: float | None
    optimizer: Adam
    initial: LossBreakdown | None = None
    resume_state: dict = field(default_factory=dict)


def _mae_all_fast(model: Model, params: dict, samples: list, batch: int = 64) -> float:
    """Entry-weighted block MAE straight from the padded layout."""
    err, cnt = 0.0, 0.0
    saved = model.params
    model.params = params
    try:
        for s in range(0, len(samples), batch):
            b = model.collate(samples[s : s + batch])
            tape = Tape()
            h, _, _ = model.forward(tape, b)
            err += float(np.sum(np.abs(h.value - b.targets["H"]) * b.targets["H_mask"]))
            cnt += float(b.targets["H_mask"].sum())
            tape.release()
    finally:
        model.params = saved
    return err / max(cnt, 1.0)


def train(
    model: Model,
    train_samples: list,
    cfg: TrainConfig,
    val_samples: list | None = None,
    *,
    optimizer: Adam | None = None,
    start_epoch: int = 0,
    callback: Callable[[EpochLog], None] | None = None,
    resume_state: dict | None = None,
) -> TrainResult:
    """Adam over the total loss; keeps the best-validation parameters.

    Shuffling uses a stream keyed by (seed, epoch), so a run resumed at
    ``start_epoch`` with the saved optimizer state follows the same path.
    """
    if not train_samples:
        raise ParameterError("training set is empty")
    if model.config.trace_head is False and cfg.lam > 0:
        raise ConfigurationError("lam > 0 needs a model with a trace head")
    params = {k: v.copy() for k, v in model.params.items()}
    opt = optimizer if optimizer is not None else Adam(params, cfg.lr)
    log: list[EpochLog] = []
    best_params = {k: v.copy() for k, v in params.items()}
    best_val, best_epoch, stale = None, start_epoch - 1, 0
    if resume_state:
        best_val, best_epoch, stale = resume_state["best_val"], resume_state["best_epoch"], resume_state["stale"]
        if "best_params" in resume_state:
            best_params = {k: v.copy() for k, v in resume_state["best_params"].items()}
    initial = None
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            t0 = time.perf_counter()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_samples))
            sums = np.zeros(4)
            n_batches = 0
            for s in range(0, len(order), cfg.batch):
                group = [train_samples[i] for i in order[s : s + cfg.batch]]
                br, grads = loss_and_grad(model, params, group, cfg.lam, cfg.threads, pool)
                if initial is None:
                    initial = br
                if not all(math.isfinite(x) for x in (br.loss_H, br.loss_T, br.total)) or not all(
                    np.all(np.isfinite(g)) for g in grads.values()
                ):
                    raise DivergenceError(f"non-finite loss or gradient at epoch {epoch}", epoch)
                params = opt.step(params, grads)
                sums += (br.loss_H, br.loss_T, br.mu, br.total)
                n_batches += 1
            sums /= max(n_batches, 1)
            val = _mae_all_fast(model, params, val_samples) if val_samples else None
            if val is not None and not math.isfinite(val):
                raise DivergenceError(f"non-finite validation error at epoch {epoch}", epoch)
            if val is None or best_val is None or val < best_val:
                best_val, best_epoch, stale = val, epoch, 0
                best_params = {k: v.copy() for k, v in params.items()}
            else:
                stale += 1
                if cfg.decay_patience and stale >= cfg.decay_patience:
                    opt.lr = max(opt.lr * cfg.decay_factor, cfg.min_lr)
                    stale = 0
            entry = EpochLog(epoch, *sums.tolist(), val, opt.lr, time.perf_counter() - t0)
            log.append(entry)
            if callback is not None:
                callback(entry)
    finally:
        if pool is not None:
            pool.shutdown()
    state = {"best_val": best_val, "best_epoch": best_epoch, "stale": stale}
    return TrainResult(params, best_params, log, best_epoch, best_val, opt, initial, state)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    mae_all: float
    mae_cha_s: float | None
    mae_cha_b: float
    mae_block: dict
    mae_eps: float
    sim_psi: float
    per_sample_mae: list = field(default_factory=list)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["mae_block"] = {f"{a}x{b}": v for (a, b), v in sorted(self.mae_block.items())}
        return d

    def rows(self, arm: str = "") -> list:
        """One (arm, metric, value) row per scalar metric."""
        out = [(arm, k, getattr(self, k)) for k in ("mae_all", "mae_cha_s", "mae_cha_b", "mae_eps", "sim_psi")]
        out += [(arm, f"mae_block[{a}x{b}]", v) for (a, b), v in sorted(self.mae_block.items())]
        return out


def _occupied_groups(eps: np.ndarray, m: int, tol: float) -> list:
    """Index ranges of (near-)degenerate eigenvalue groups covering 0..m-1."""
    groups, start = [], 0
    n = eps.size
    while start < m:
        stop = start + 1
        while stop < n and eps[stop] - eps[stop - 1] < tol:
            stop += 1
        groups.append((start, min(stop, m), stop))
        start = stop
    return groups


def eigen_metrics(h_pred: np.ndarray, h_true: np.ndarray, m: int | None = None, tol: float = DEGENERACY_TOL):
    """(mae_eps, sim_psi) over the lowest ``m`` eigenpairs (S = identity).

    Inside a degenerate group of the reference spectrum the cosines of
    the principal angles between the two eigenspaces replace the
    individual overlaps.
    """
    h_pred = np.asarray(h_pred, dtype=np.float64)
    h_true = np.asarray(h_true, dtype=np.float64)
    if h_pred.shape != h_true.shape or h_pred.ndim != 2 or h_pred.shape[0] != h_pred.shape[1]:
        raise ParameterError("eigen_metrics needs two square matrices of equal shape")
    for name, h in (("predicted", h_pred), ("reference", h_true)):
        if np.max(np.abs(h - h.T), initial=0.0) > SYMMETRY_TOL:
            raise ParameterError(f"{name} matrix is not symmetric")
    n = h_true.shape[0]
    m = n // 2 if m is None else m
    if not (1 <= m <= n):
        raise ParameterError(f"occupied count {m} outside [1, {n}]")
    ep, vp = np.linalg.eigh(h_pred)
    et, vt = np.linalg.eigh(h_true)
    mae_eps = float(np.mean(np.abs(ep[:m] - et[:m])))
    sims = []
    for a, b, full in _occupied_groups(et, m, tol):
        if full - a == 1:
            sims.append(abs(float(vp[:, a] @ vt[:, a])))
        else:
            s = np.linalg.svd(vp[:, a:full].T @ vt[:, a:full], compute_uv=False)
            sims.extend(np.clip(s[: b - a], 0.0, 1.0).tolist())
    return mae_eps, float(np.mean(sims))


def select_challenging(per_sample_mae: Sequence[float], fraction: float = CHALLENGING_FRACTION) -> list:
    """Indices of the worst ``fraction`` of samples (at least one), worst first."""
    err = np.asarray(per_sample_mae, dtype=np.float64)
    if err.size == 0:
        raise ParameterError("no samples to select from")
    k = max(1, int(math.ceil(fraction * err.size)))
    return [int(i) for i in np.argsort(-err, kind="stable")[:k]]


def save_selection(path, indices: Sequence[int], meta: dict | None = None):
    with open(path, "w") as fh:
        json.dump({"format": "tracegrad-selection", "indices": list(map(int, indices)), "meta": meta or {}}, fh)


def load_selection(path) -> list:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "tracegrad-selection":
        raise UsageError(f"{path} is not a sample selection file")
    return [int(i) for i in doc["indices"]]


def evaluate(
    predict: Callable[[list], list],
    records: list,
    basis: OrbitalBasisSpec,
    challenging: Sequence[int] | None = None,
    require_challenging: bool = False,
    occupied: Callable[[int], int] | None = None,
) -> MetricReport:
    """Metric suite for a predictor mapping a list of systems to PairBlockSets."""
    if not records:
        raise ParameterError("evaluation set is empty")
    if require_challenging and challenging is None:
        raise UsageError("challenging-sample selection required but not provided")
    preds = predict([r.system for r in records])
    abs_sum, count = 0.0, 0
    block_sum, block_cnt = {}, {}
    per_sample, per_count = [], []
    eps_list, sim_list = [], []
    for rec, pred in zip(records, preds):
        pb = pred[0] if isinstance(pred, tuple) else pred
        s_sum, s_cnt = 0.0, 0
        for (i, j, p, q), target in rec.blocks.items():
            try:
                got = pb.blocks[(i, j)][(p, q)]
            except KeyError:
                raise ParameterError(f"prediction lacks block {(i, j, p, q)}") from None
            if got.shape != target.shape:
                raise ParameterError(f"block {(i, j, p, q)} has shape {got.shape}, expected {target.shape}")
            e = np.abs(got - target)
            key = ((target.shape[0] - 1) // 2, (target.shape[1] - 1) // 2)
            block_sum[key] = block_sum.get(key, 0.0) + float(e.sum())
            block_cnt[key] = block_cnt.get(key, 0) + e.size
            s_sum += float(e.sum())
            s_cnt += e.size
        per_sample.append(s_sum / max(s_cnt, 1))
        per_count.append(s_cnt)
        abs_sum += s_sum
        count += s_cnt
        ht = rec.blocks.assemble(rec.system, basis)
        hp = pb.assemble(rec.system, basis)
        hp = 0.5 * (hp + hp.T) if np.max(np.abs(hp - hp.T)) <= SYMMETRY_TOL else hp
        m = occupied(ht.shape[0]) if occupied is not None else None
        e_mae, sim = eigen_metrics(hp, ht, m)
        eps_list.append(e_mae)
        sim_list.append(sim)
    mae_block = {k: block_sum[k] / block_cnt[k] for k in sorted(block_sum)}
    mae_cha_s = None
    if challenging is not None:
        idx = [int(i) for i in challenging]
        if any(i < 0 or i >= len(records) for i in idx):
            raise UsageError("challenging-sample selection does not match the dataset")
        num = sum(per_sample[i] * per_count[i] for i in idx)
        mae_cha_s = num / max(sum(per_count[i] for i in idx), 1)
    return MetricReport(
        mae_all=abs_sum / max(count, 1),
        mae_cha_s=mae_cha_s,
        mae_cha_b=max(mae_block.values()),
        mae_block=mae_block,
        mae_eps=float(np.mean(eps_list)),
        sim_psi=float(np.mean(sim_list)),
        per_sample_mae=per_sample,
    )


def model_predictor(model: Model, batch: int = 64) -> Callable[[list], list]:
    def predict(systems):
        out = []
        for s in range(0, len(systems), batch):
            out.extend(model.predict_batch([model.prepare(x) for x in systems[s : s + batch]]))
        return [pb for pb, _ in out]

    return predict


def oracle_predictor(oracle, basis: OrbitalBasisSpec) -> Callable[[list], list]:
    from .data import oracle_blocks

    return lambda systems: [oracle_blocks(x, basis, oracle) for x in systems]


def zero_predictor(basis: OrbitalBasisSpec) -> Callable[[list], list]:
    from .structures import build_graph

    def predict(systems):
        out = []
        for x in systems:
            g = build_graph(x)
            blocks = {}
            for i, j in zip(g.src.tolist(), g.dst.tolist()):
                di, dj = basis.degrees(x.species[i]), basis.degrees(x.species[j])
                blocks[(i, j)] = {
                    (p, q): np.zeros((2 * lp + 1, 2 * lq + 1)) for p, lp in enumerate(di) for q, lq in enumerate(dj)
                }
            out.append(PairBlockSet(blocks))
        return out

    return predict


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


@dataclass
class ArmResult:
    arm: str
    seed: int
    mode: str
    lam: float
    report: MetricReport
    initial: LossBreakdown | None
    best_epoch: int
    seconds: float


def arm_configs(model_cfg: ModelConfig, train_cfg: TrainConfig, lam_star: float = DEFAULT_LAMBDA):
    """(name, ModelConfig, TrainConfig) for the six arms."""
    out = []
    for name, mode, traced in ARMS:
        mc = dataclasses.replace(model_cfg, mode=mode, trace_head=True)
        tc = dataclasses.replace(train_cfg, lam=lam_star if traced else 0.0)
        out.append((name, mc, tc))
    return out


def run_ablation(
    splits: dict,
    basis: OrbitalBasisSpec,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int] = (0,),
    lam_star: float = DEFAULT_LAMBDA,
    arms: Sequence[str] | None = None,
    progress: Callable[[str], None] | None = None,
) -> list:
    """Train and evaluate every arm for every seed.

    The baseline arm of each seed fixes the challenging-sample selection
    used for all arms of that seed.  Arms share the seed, so parameters
    that exist in every arm start from the same values.
    """
    for name in ("train", "val", "test"):
        if not splits.get(name):
            raise ParameterError(f"split {name!r} is empty")
    wanted = set(arms) if arms is not None else None
    results = []
    for seed in seeds:
        selection = None
        for name, mc, tc in arm_configs(model_cfg, train_cfg, lam_star):
            if wanted is not None and name not in wanted and name != "baseline":
                continue
            t0 = time.perf_counter()
            model = Model(mc, basis, seed=seed)
            tr = [model.prepare(r.system, r.blocks) for r in splits["train"]]
            va = [model.prepare(r.system, r.blocks) for r in splits["val"]]
            res = train(model, tr, dataclasses.replace(tc, seed=seed), va)
            model.params = res.best_params
            pred = model_predictor(model)
            if selection is None:
                base = evaluate(pred, splits["test"], basis)
                selection = select_challenging(base.per_sample_mae)
            report = evaluate(pred, splits["test"], basis, challenging=selection)
            results.append(
                ArmResult(name, seed, mc.mode, tc.lam, report, res.initial, res.best_epoch, time.perf_counter() - t0)
            )
            if progress is not None:
                progress(f"seed {seed} {name:<11} test mae_all {report.mae_all:.6f} ({time.perf_counter() - t0:.1f}s)")
    return results


def summarize_ablation(results: list) -> dict:
    """Median test metrics per arm across seeds."""
    by_arm = {}
    for r in results:
        by_arm.setdefault(r.arm, []).append(r.report)
    out = {}
    for arm, reps in by_arm.items():
        out[arm] = {
            k: float(np.median([getattr(x, k) for x in reps]))
            for k in ("mae_all", "mae_cha_b", "mae_eps", "sim_psi")
        }
        cha = [x.mae_cha_s for x in reps if x.mae_cha_s is not None]
        out[arm]["mae_cha_s"] = float(np.median(cha)) if cha else None
    return out


def format_table(summary: dict) -> str:
    cols = ("mae_all", "mae_cha_s", "mae_cha_b", "mae_eps", "sim_psi")
    lines = [f"{'arm':<12}" + "".join(f"{c:>14}" for c in cols)]
    for arm, row in summary.items():
        cells = "".join(f"{'-':>14}" if row[c] is None else f"{row[c]:>14.6g}" for c in cols)
        lines.append(f"{arm:<12}{cells}")
    return "\n".join(lines)


def block_table(report: MetricReport) -> str:
    """Per-block MAE as a matrix indexed by (lp, lq)."""
    degs = sorted({a for a, _ in report.mae_block} | {b for _, b in report.mae_block})
    lines = ["lp\\lq" + "".join(f"{d:>12}" for d in degs)]
    for a in degs:
        cells = "".join(
            f"{report.mae_block[(a, b)]:>12.6g}" if (a, b) in report.mae_block else f"{'-':>12}" for b in degs
        )
        lines.append(f"{a:<5}{cells}")
    return "\n".join(lines)


def lambda_sweep(
    model_cfg: ModelConfig,
    basis: OrbitalBasisSpec,
    train_samples: list,
    val_samples: list,
    train_cfg: TrainConfig,
    lambdas: Sequence[float] = tuple(round(0.1 * k, 1) for k in range(1, 11)),
) -> list:
    """[(lam, best validation mae_all)] for the trace-supervised gradient arm."""
    out = []
    for lam in lambdas:
        mc = dataclasses.replace(model_cfg, mode="grad", trace_head=True)
        model = Model(mc, basis, seed=train_cfg.seed)
        res = train(model, train_samples, dataclasses.replace(train_cfg, lam=lam), val_samples)
        out.append((lam, res.best_val))
    return out


def write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, default=float)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Inference scaling
# ---------------------------------------------------------------------------


@dataclass
class ScalingReport:
    sizes: list
    seconds: list
    edges: list
    slope: float
    intercept: float
    r2: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def scaling_benchmark(
    model: Model, sizes: Sequence[int] = (16, 32, 64, 128), repeats: int = 5, seed: int = 0
) -> ScalingReport:
    """Median single-system inference time per size and a linear fit t = a*N + b."""
    from scipy.stats import linregress

    from .data import random_system

    times, edges = [], []
    for n in sizes:
        system = random_system(int(n), np.random.default_rng([seed, int(n)]), len(model.species), model.config.cutoff)
        sg = model.prepare(system)
        model.predict_batch([sg])  # warm caches
        runs = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.predict_batch([model.prepare(system)])
            runs.append(time.perf_counter() - t0)
        times.append(float(np.median(runs)))
        edges.append(int(sg.graph.n_edges))
    fit = linregress(np.asarray(sizes, dtype=float), np.asarray(times))
    return ScalingReport(list(map(int, sizes)), times, edges, float(fit.slope), float(fit.intercept), float(fit.rvalue**2))
