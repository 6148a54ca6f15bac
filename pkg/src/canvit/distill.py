"""Passive-to-active dense latent distillation at desk scale.

A frozen analytic teacher stands in for the passive ViT: it maps local pixel
statistics of each teacher cell through a fixed random network. The student
reconstructs standardized teacher features from glimpse sequences, trained with
dual rollouts (F-IID + R-IID) and truncated BPTT over K-glimpse chunks.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import policies as pol
from . import tensorcore as tc
from .model import ModelConfig, ModelParams, ModelState, StepOutput, init_state, step
from .scene import extract_glimpses
from .tensorcore import Tape, Tensor

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-8


class TrainingDiverged(RuntimeError):
    pass


# ---- synthetic scenes and teacher ----------------------------------------------------


def make_scene(rng: np.random.Generator, side: int = 64) -> np.ndarray:
    """Random piecewise-smooth RGB scene in [0, 1]: gradient background, flat and striped shapes."""
    c = (np.arange(side) + 0.5) / side * 2 - 1
    yy, xx = np.meshgrid(c, c, indexing="ij")
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * xx + np.sin(theta) * yy + 1.5) / 3
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    img = c0 + t[..., None] * (c1 - c0)
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(-0.8, 0.8, 2)
        r = rng.uniform(0.15, 0.5)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        color = rng.uniform(0, 1, 3)
        if rng.random() < 0.4:
            freq = rng.uniform(4, 12)
            phi = rng.uniform(0, np.pi)
            stripes = 0.5 + 0.5 * np.sin(freq * np.pi * (np.cos(phi) * xx + np.sin(phi) * yy))
            color = color + stripes[..., None] * (rng.uniform(0, 1, 3) - color)
        img = np.where(mask[..., None], color, img)
    return np.clip(img, 0.0, 1.0)


def make_scenes(seed: int, n: int, side: int = 64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([make_scene(rng, side) for _ in range(n)])


@dataclass
class TeacherTargets:
    Z_star: np.ndarray  # [..., H, W, D]
    z_star: np.ndarray  # [..., D]


class SyntheticTeacher:
    """Frozen per-cell features from local statistics in scene context.

    Inputs per cell: mean color, within-cell contrast e (mean squared difference of
    horizontally/vertically adjacent pixels inside the cell), and e*x^2, e*y^2 with
    (x, y) the cell center; plus scene-level context shared by all cells (mean color
    and mean contrast of the whole scene). Position enters only through even
    functions gated by contrast, so flat scenes give spatially constant features and
    mirrored scenes give mirrored feature grids. The context inputs mix with the
    local ones inside the tanh layer, so a cell's features cannot be recovered from
    a zoomed-in view of that cell alone.
    """

    n_local = 6
    n_context = 4
    n_inputs = n_local + n_context
    context_gain = 2.0  # scene statistics vary less than cell statistics; this evens their pull

    def __init__(self, grid: int = 8, d_teacher: int = 16, hidden: int = 32, seed: int = 1234):
        rng = np.random.default_rng(seed)
        self.grid = grid
        self.d_teacher = d_teacher
        self.w1 = rng.normal(0.0, 1.5 / math.sqrt(self.n_inputs), size=(self.n_inputs, hidden))
        self.b1 = rng.normal(0.0, 0.5, size=hidden)
        self.w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, d_teacher))

    def cell_stats(self, scenes: np.ndarray) -> np.ndarray:
        scenes = np.asarray(scenes, dtype=np.float64)
        single = scenes.ndim == 3
        if single:
            scenes = scenes[None]
        B, S, _, _ = scenes.shape
        g = self.grid
        if S % g:
            raise ValueError(f"scene side {S} not divisible by teacher grid {g}")
        c = S // g
        cells = scenes.reshape(B, g, c, g, c, 3).transpose(0, 1, 3, 2, 4, 5)  # B g g c c 3
        mean = cells.mean(axis=(3, 4))
        dx = np.diff(cells, axis=4) ** 2
        dy = np.diff(cells, axis=3) ** 2
        e = (dx.sum(axis=(3, 4, 5)) + dy.sum(axis=(3, 4, 5))) / (2 * c * (c - 1) * 3) * 60.0
        ctr = (np.arange(g) + 0.5) / g * 2 - 1
        yy, xx = np.meshgrid(ctr, ctr, indexing="ij")
        local = np.concatenate([2 * mean - 1, e[..., None], (e * xx ** 2)[..., None],
                                (e * yy ** 2)[..., None]], axis=-1)
        ctx = local[..., :4].mean(axis=(1, 2)) * self.context_gain  # scene mean color and contrast
        f = np.concatenate([local, np.broadcast_to(ctx[:, None, None], (B, g, g, 4))], axis=-1)
        return f[0] if single else f

    def __call__(self, scenes: np.ndarray) -> TeacherTargets:
        f = self.cell_stats(scenes)
        Z = np.tanh(f @ self.w1 + self.b1) @ self.w2
        return TeacherTargets(Z, Z.mean(axis=(-3, -2)))


def synthetic_teacher(scene, grid: int = 8, d_teacher: int = 16, seed: int = 1234) -> TeacherTargets:
    px = getattr(scene, "pixels", scene)
    return SyntheticTeacher(grid, d_teacher, seed=seed)(px)


# ---- standardization -----------------------------------------------------------------


@dataclass
class StandardizationStats:
    mean: np.ndarray  # [H, W, D]
    var: np.ndarray
    cls_mean: np.ndarray  # [D]
    cls_var: np.ndarray

    @classmethod
    def fit(cls, targets: TeacherTargets) -> "StandardizationStats":
        Z, z = targets.Z_star, targets.z_star
        return cls(Z.mean(0), np.maximum(Z.var(0), VAR_FLOOR),
                   z.mean(0), np.maximum(z.var(0), VAR_FLOOR))

    def _check(self, targets: TeacherTargets):
        if targets.Z_star.shape[-3:] != self.mean.shape:
            raise ValueError(f"targets {targets.Z_star.shape} do not match stats {self.mean.shape}")
        if targets.z_star.shape[-1] != self.cls_mean.shape[-1]:
            raise ValueError("CLS target dimension does not match stats")

    def standardize(self, targets: TeacherTargets) -> TeacherTargets:
        self._check(targets)
        return TeacherTargets((targets.Z_star - self.mean) / np.sqrt(self.var),
                              (targets.z_star - self.cls_mean) / np.sqrt(self.cls_var))

    def destandardize(self, targets: TeacherTargets) -> TeacherTargets:
        self._check(targets)
        return TeacherTargets(targets.Z_star * np.sqrt(self.var) + self.mean,
                              targets.z_star * np.sqrt(self.cls_var) + self.cls_mean)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"stats.mean": self.mean, "stats.var": self.var,
                "stats.cls_mean": self.cls_mean, "stats.cls_var": self.cls_var}

    @classmethod
    def from_arrays(cls, arrays) -> "StandardizationStats":
        return cls(arrays["stats.mean"], arrays["stats.var"],
                   arrays["stats.cls_mean"], arrays["stats.cls_var"])


# ---- loss ----------------------------------------------------------------------------


def reconstruction_terms(Z_hat: Tensor, z_hat: Tensor, Z_star, z_star) -> tuple[Tensor, Tensor]:
    """Per-scene patch term (1/HW)||Z_hat - Z*||_F^2 and CLS term ||z_hat - z*||^2, each [B]."""
    Z_hat, z_hat = tc.as_tensor(Z_hat), tc.as_tensor(z_hat)
    Z_star, z_star = np.asarray(Z_star), np.asarray(z_star)
    if Z_hat.shape[-3:-1] != Z_star.shape[-3:-1]:
        raise ValueError(f"decoded grid {Z_hat.shape[-3:-1]} != target grid {Z_star.shape[-3:-1]}")
    H, W = Z_hat.shape[-3:-1]
    dZ = Z_hat - Z_star
    dz = z_hat - z_star
    patch = tc.scale(tc.sum_(tc.mul(dZ, dZ), axis=(-3, -2, -1)), 1.0 / (H * W))
    return patch, tc.sum_(tc.mul(dz, dz), axis=-1)


def loss(Z_hats, z_hats, Z_star, z_star, T: int | None = None) -> Tensor:
    """Time- and batch-averaged reconstruction loss over a list of per-step decodes."""
    T = len(Z_hats) if T is None else T
    if T < 1 or len(Z_hats) != T or len(z_hats) != T:
        raise ValueError("need exactly T >= 1 decoded steps")
    total = None
    for Zh, zh in zip(Z_hats, z_hats):
        Zh, zh = tc.as_tensor(Zh), tc.as_tensor(zh)
        if Zh.ndim == 3:
            Zh, zh = Zh.reshape(1, *Zh.shape), zh.reshape(1, -1)
        p, c = reconstruction_terms(Zh, zh, Z_star, z_star)
        term = tc.mean(p + c)
        total = term if total is None else total + term
    return tc.scale(total, 1.0 / T)


# ---- configuration and ablations -----------------------------------------------------


@dataclass
class TrainConfig:
    K: int = 2
    p_stop: float = 0.5
    batch_size: int = 16
    steps: int = 300
    lr: float = 2e-3
    lr_init: float = 1e-7
    warmup_frac: float = 0.01
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    fiid: bool = True
    n_riid: int = 1
    dense_loss: bool = True
    s_min: float = pol.S_MIN
    grid: int = 8
    seed: int = 0
    eval_T: int = 4
    log_every: int = 25

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0 < self.p_stop <= 1:
            raise ValueError("p_stop must lie in (0, 1]")
        if not self.fiid and self.n_riid < 1:
            raise ValueError("need at least one rollout per scene")

    @property
    def rollout_kinds(self) -> list[str]:
        return (["fiid"] if self.fiid else []) + ["riid"] * self.n_riid

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_frac * self.steps)))


ABLATIONS = ("no_reads", "rw_stride", "no_dense_loss", "no_fiid", "second_riid", "k1",
             "no_vpe", "d_can", "canvas_qkvo")


def apply_ablation(name: str, mcfg: ModelConfig, tcfg: TrainConfig,
                   value=None) -> tuple[ModelConfig, TrainConfig]:
    """Return configs with one named ablation applied (``value`` for the overrides)."""
    if name == "no_reads":
        return replace(mcfg, reads_enabled=False), tcfg
    if name == "rw_stride":
        return replace(mcfg, rw_stride=int(value)), tcfg
    if name == "no_dense_loss":
        return mcfg, replace(tcfg, dense_loss=False)
    if name == "no_fiid":
        return mcfg, replace(tcfg, fiid=False, n_riid=1)
    if name == "second_riid":
        return mcfg, replace(tcfg, fiid=False, n_riid=2)
    if name == "k1":
        return mcfg, replace(tcfg, K=1, p_stop=0.25)
    if name == "no_vpe":
        return replace(mcfg, vpe_enabled=False), tcfg
    if name == "d_can":
        return replace(mcfg, d_can=int(value)), tcfg
    if name == "canvas_qkvo":
        return replace(mcfg, canvas_qkvo=True), tcfg
    raise ValueError(f"unknown ablation {name!r}")


# ---- optimizer -----------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, params: dict[str, Tensor], tcfg: TrainConfig):
        self.params = params
        self.cfg = tcfg
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def lr_at(self, step_idx: int) -> float:
        c = self.cfg
        if step_idx < c.warmup_steps:
            return c.lr_init + (c.lr - c.lr_init) * step_idx / c.warmup_steps
        return c.lr

    def step(self, lr: float):
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            if p.ndim >= 2 and c.weight_decay:
                p.data = p.data * (1 - lr * c.weight_decay)
            p.data = p.data - lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.adam_eps)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    return math.sqrt(sum(float((t.grad ** 2).sum()) for t in params.values() if t.grad is not None))


def clip_grads(params: dict[str, Tensor], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm:
        f = max_norm / (norm + 1e-6)
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * f
    return norm


# ---- truncated BPTT ------------------------------------------------------------------


def tbptt_rollout(state: ModelState, glimpses, viewpoints, params: ModelParams, cfg: ModelConfig,
                  K: int, step_loss: Callable[[int, StepOutput], Tensor | None],
                  record: bool = True) -> tuple[ModelState, list[int]]:
    """Run len(glimpses) steps in K-step chunks, backpropagating each chunk's loss.

    State crosses chunk boundaries detached, so no gradient flows between chunks.
    Returns the final (detached) state and the tape length of every chunk. With
    ``record=False`` nothing is taped (evaluation).
    """
    tape_sizes = []
    T = len(glimpses)
    for start in range(0, T, K):
        with (Tape() if record else contextlib.nullcontext(Tape())) as tape:
            total = None
            for t in range(start, min(start + K, T)):
                out = step(state, glimpses[t], viewpoints[t], params, cfg)
                term = step_loss(t, out)
                if term is not None:
                    total = term if total is None else total + term
                state = out.state
        tape_sizes.append(len(tape))
        if total is not None and total.requires_grad:
            tape.backward(total)
        state = state.detach()
    return state, tape_sizes


def _viewpoint_table(rng, kind: str, B: int, T: int, s_min: float) -> np.ndarray:
    """[T, B, 3] viewpoints; F-IID rollouts open with the full scene."""
    vps = pol.sample_iid_viewpoints(rng, T * B, s_min).reshape(B, T, 3).transpose(1, 0, 2).copy()
    if kind == "fiid":
        vps[0] = (0.0, 0.0, 1.0)
    return vps


def run_rollout(scenes: np.ndarray, targets: TeacherTargets, lengths: np.ndarray, kind: str,
                params: ModelParams, cfg: ModelConfig, tcfg: TrainConfig, rng,
                weight: float = 1.0, train: bool = True) -> dict:
    """One rollout per scene with per-scene lengths; accumulates gradients if ``train``.

    Each scene's loss is its time average over its own length; the batch objective is
    ``weight`` times the batch mean of those.
    """
    B = scenes.shape[0]
    lengths = np.asarray(lengths)
    T = int(lengths.max())
    vps = _viewpoint_table(rng, kind, B, T, tcfg.s_min)
    glimpses = [extract_glimpses(scenes, vps[t], cfg.glimpse_px) for t in range(T)]
    patch_sum = np.zeros(B)
    cls_sum = np.zeros(B)

    def step_loss(t, out):
        w = np.where(t < lengths, 1.0 / lengths, 0.0)
        patch, cls = reconstruction_terms(out.Z_hat, out.z_hat, targets.Z_star, targets.z_star)
        patch_sum[:] += w * patch.data
        cls_sum[:] += w * cls.data
        per_scene = cls + patch if tcfg.dense_loss else cls
        return tc.scale(tc.sum_(tc.mul(per_scene, w)), weight / B) if train else None

    state = init_state(params, cfg, tcfg.grid, tcfg.grid, B)
    _, tape_sizes = tbptt_rollout(state, glimpses, list(vps), params, cfg,
                                  tcfg.K if train else T, step_loss, record=train)
    return {"patch": float(patch_sum.mean()), "cls": float(cls_sum.mean()), "tape_sizes": tape_sizes}


def train_step(scenes: np.ndarray, targets: TeacherTargets, params: ModelParams, cfg: ModelConfig,
               tcfg: TrainConfig, opt: AdamW, rng, step_idx: int) -> dict:
    """One optimizer step over a batch: dual rollouts, TBPTT, clipping, AdamW."""
    named = opt.params
    for t in named.values():
        t.grad = None
    kinds = tcfg.rollout_kinds
    B = scenes.shape[0]
    metrics: dict = {"step": step_idx}
    per_kind: dict[str, list] = {}
    tape_sizes = []
    for kind in kinds:
        lengths = pol.sample_rollout_length(rng, tcfg.K, tcfg.p_stop, size=B)
        r = run_rollout(scenes, targets, lengths, kind, params, cfg, tcfg, rng, 1.0 / len(kinds))
        per_kind.setdefault(kind, []).append(r)
        tape_sizes.extend(r["tape_sizes"])
    total = 0.0
    for kind in ("riid", "fiid"):
        rs = per_kind.get(kind)
        for part in ("patch", "cls"):
            v = float(np.mean([r[part] for r in rs])) if rs else float("nan")
            metrics[f"loss_{part}_{kind}"] = v
        if rs:
            total += sum(r["cls"] + (r["patch"] if tcfg.dense_loss else 0.0) for r in rs)
    metrics["loss"] = total / len(kinds)
    if not math.isfinite(metrics["loss"]):
        raise TrainingDiverged(f"non-finite loss at step {step_idx}: {metrics}")
    lr = opt.lr_at(step_idx)
    metrics["grad_norm"] = clip_grads(named, tcfg.clip_norm)
    if not math.isfinite(metrics["grad_norm"]):
        raise TrainingDiverged(f"non-finite gradient norm at step {step_idx}")
    opt.step(lr)
    metrics["lr"] = lr
    metrics["max_tape"] = max(tape_sizes)
    return metrics


# ---- evaluation and the pretraining loop ---------------------------------------------


def evaluate(params: ModelParams, cfg: ModelConfig, tcfg: TrainConfig, scenes: np.ndarray,
             targets: TeacherTargets, seed: int = 12345, chunk: int = 64) -> dict:
    """Held-out loss under fixed-seed R-IID and F-IID rollouts of length eval_T."""
    rng = np.random.default_rng(seed)
    out = {}
    for kind in ("riid", "fiid"):
        acc = {"patch": 0.0, "cls": 0.0}
        for i in range(0, len(scenes), chunk):
            sl = slice(i, i + chunk)
            tg = TeacherTargets(targets.Z_star[sl], targets.z_star[sl])
            n = len(scenes[sl])
            lengths = np.full(n, tcfg.eval_T)
            r = run_rollout(scenes[sl], tg, lengths, kind, params, cfg, tcfg, rng, train=False)
            acc["patch"] += r["patch"] * n
            acc["cls"] += r["cls"] * n
        out[f"patch_{kind}"] = acc["patch"] / len(scenes)
        out[f"cls_{kind}"] = acc["cls"] / len(scenes)
    out["patch"] = (out["patch_riid"] + out["patch_fiid"]) / 2
    out["cls"] = (out["cls_riid"] + out["cls_fiid"]) / 2
    out["total"] = out["patch"] + out["cls"]
    return out


METRIC_COLUMNS = ("step", "loss_patch_riid", "loss_patch_fiid", "loss_cls_riid", "loss_cls_fiid",
                  "grad_norm", "lr")


@dataclass
class PretrainResult:
    params: ModelParams
    stats: StandardizationStats
    history: list[dict] = field(default_factory=list)
    eval_initial: dict = field(default_factory=dict)
    eval_final: dict = field(default_factory=dict)


def prepare_targets(teacher: SyntheticTeacher, train_scenes, heldout_scenes=None):
    raw = teacher(train_scenes)
    stats = StandardizationStats.fit(raw)
    train_t = stats.standardize(raw)
    held_t = stats.standardize(teacher(heldout_scenes)) if heldout_scenes is not None else None
    return stats, train_t, held_t


def micro_pretrain(train_scenes: np.ndarray, cfg: ModelConfig, tcfg: TrainConfig,
                   heldout_scenes: np.ndarray | None = None, teacher: SyntheticTeacher | None = None,
                   metrics_path=None, params: ModelParams | None = None) -> PretrainResult:
    if cfg.d_teacher is None:
        raise ValueError("model config needs d_teacher")
    teacher = teacher or SyntheticTeacher(tcfg.grid, cfg.d_teacher)
    if teacher.grid != tcfg.grid or teacher.d_teacher != cfg.d_teacher:
        raise ValueError("teacher grid/dim must match the training canvas grid and d_teacher")
    stats, train_t, held_t = prepare_targets(teacher, train_scenes, heldout_scenes)
    ss = np.random.SeedSequence(tcfg.seed)
    init_seed, data_seed, roll_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    params = params or ModelParams.init(cfg, seed=init_seed)
    named = params.named()
    opt = AdamW(named, tcfg)
    data_rng = np.random.default_rng(data_seed)
    roll_rng = np.random.default_rng(roll_seed)
    result = PretrainResult(params, stats)
    if heldout_scenes is not None:
        result.eval_initial = evaluate(params, cfg, tcfg, heldout_scenes, held_t)

    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)

    n = len(train_scenes)
    order = data_rng.permutation(n)
    pos = 0
    initial_loss = None
    high_streak = 0
    try:
        for s in range(tcfg.steps):
            if pos + tcfg.batch_size > n:
                order, pos = data_rng.permutation(n), 0
            idx = order[pos:pos + tcfg.batch_size]
            pos += tcfg.batch_size
            batch_t = TeacherTargets(train_t.Z_star[idx], train_t.z_star[idx])
            m = train_step(train_scenes[idx], batch_t, params, cfg, tcfg, opt, roll_rng, s)
            result.history.append(m)
            if initial_loss is None:
                initial_loss = m["loss"]
            high_streak = high_streak + 1 if m["loss"] > 10 * initial_loss else 0
            if high_streak >= 100:
                raise TrainingDiverged(f"loss above 10x initial for 100 steps (step {s})")
            if writer is not None:
                writer.writerow([_fmt(m[c]) for c in METRIC_COLUMNS])
            if tcfg.log_every and s % tcfg.log_every == 0:
                log.info("step %d loss %.4f grad %.3f lr %.2e", s, m["loss"], m["grad_norm"], m["lr"])
    finally:
        if fh is not None:
            fh.close()
    if heldout_scenes is not None:
        result.eval_final = evaluate(params, cfg, tcfg, heldout_scenes, held_t)
    return result


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if not math.isfinite(v) else repr(float(v))


# ---- full-model gradient check ---------------------------------------------------------


def model_grad_check(cfg: ModelConfig, seed: int = 0, grid: tuple[int, int] = (3, 3), T: int = 2,
                     max_elements: int | None = 6, tol: float = 1e-4) -> tc.GradCheckReport:
    """Finite-difference check of the loss of a T-step rollout w.r.t. every parameter tensor.

    Random glimpses, viewpoints and targets; ``max_elements`` entries per tensor are probed.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams.init(cfg, seed)
    H, W = grid
    glimpses = [rng.uniform(size=(1, cfg.glimpse_px, cfg.glimpse_px, 3)) for _ in range(T)]
    vps = [pol.sample_iid_viewpoints(rng, 1) for _ in range(T)]
    Z_star = rng.normal(size=(1, H, W, cfg.d_teacher))
    z_star = rng.normal(size=(1, cfg.d_teacher))
    named = params.named()
    names = list(named)

    def f(*_):
        state = init_state(params, cfg, H, W, 1)
        Zs, zs = [], []
        for g, v in zip(glimpses, vps):
            out = step(state, g, v, params, cfg)
            Zs.append(out.Z_hat)
            zs.append(out.z_hat)
            state = out.state
        return loss(Zs, zs, Z_star, z_star)

    return tc.grad_check(f, [named[n] for n in names], max_elements=max_elements,
                         rng=np.random.default_rng(seed + 1), tol=tol)
