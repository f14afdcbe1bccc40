"""Objective, gradient accumulation with global boundary statistics, WSD schedule,
checkpointing and per-position loss profiling."""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .model import DLCM, BaselineConfig, BaselineLM, DLCMConfig, config_hash
from .mup import init_parameters, param_groups, plan_for
from .numerics import IGNORE_INDEX, NonFiniteError, cross_entropy
from .segmenter import (
    GlobalStats,
    ShardStats,
    accumulate_global_stats,
    aux_grad_coefficient,
    aux_loss,
    exact_sum,
)
from .tokens import TokenBatch, pack_batches, stack_windows

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, checkpoint: str | None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: DLCMConfig | BaselineConfig = field(default_factory=DLCMConfig)
    seq_len: int = 256
    micro_batch: int = 8
    accum_steps: int = 1
    total_tokens: int = 2_000_000
    warmup_steps: int = 20
    decay_frac: float = 0.1
    eta_token: float = 3e-3
    eta_concept: float = 3e-3
    eta_others: float = 3e-3
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    grad_clip: float | None = 1.0
    parser: str = "global"
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if not 0 < self.decay_frac <= 1:
            raise ValueError(f"decay window fraction must lie in (0, 1], got {self.decay_frac}")
        if self.accum_steps < 1:
            raise ValueError("accum_steps (K) must be >= 1")
        if self.parser not in ("global", "normal"):
            raise ValueError(f"unknown parser arm {self.parser!r}")

    @property
    def tokens_per_step(self) -> int:
        return self.seq_len * self.micro_batch * self.accum_steps

    @property
    def total_steps(self) -> int:
        return max(1, self.total_tokens // self.tokens_per_step)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_kind"] = "dlcm" if isinstance(self.model, DLCMConfig) else "baseline"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        kind = d.pop("model_kind", "dlcm")
        mcls = DLCMConfig if kind == "dlcm" else BaselineConfig
        names = {f.name for f in fields(mcls)}
        d["model"] = mcls(**{k: v for k, v in d["model"].items() if k in names})
        d["betas"] = tuple(d.get("betas", (0.9, 0.95)))
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# objective -----------------------------------------------------------------------


def total_loss(logits, targets, stats: GlobalStats, R: float, lam: float):
    """L = L_CE + lambda * L_aux. Returns (total, ce, aux)."""
    if not bool((targets != IGNORE_INDEX).any()):
        raise ValueError("every target is ignored; nothing to predict")
    ce = cross_entropy(logits, targets)
    aux = aux_loss(stats.G, stats.F, R)
    return ce + lam * aux, ce, aux


def wsd_schedule(step: int, total: int, warmup: int = 0, decay_frac: float = 0.1, floor: float = 0.1) -> float:
    """Warmup-stable-decay multiplier: linear 0 -> 1, flat 1, then linear down to ``floor`` at ``total``."""
    if step > total:
        raise ValueError(f"step {step} beyond schedule end {total}")
    if warmup and step < warmup:
        return step / warmup
    decay_start = total - decay_frac * total
    if step <= decay_start or total == 0:
        return 1.0
    frac = (step - decay_start) / (total - decay_start)
    return 1.0 - (1.0 - floor) * frac


# gradient accumulation -----------------------------------------------------------


@dataclass
class MicroBatch:
    ids: torch.Tensor
    targets: torch.Tensor
    doc: torch.Tensor
    valid: torch.Tensor

    @classmethod
    def from_windows(cls, windows: Sequence[TokenBatch]) -> "MicroBatch":
        return cls(*(torch.as_tensor(a) for a in stack_windows(windows)))

    @property
    def n_targets(self) -> int:
        return int((self.targets != IGNORE_INDEX).sum())


@dataclass
class StepResult:
    loss: float
    loss_ce: float
    loss_aux: float
    stats: GlobalStats
    n_targets: int
    per_seq_aux: list = field(default_factory=list)


def accumulate_gradients(
    model: DLCM,
    micro_batches: Sequence[MicroBatch],
    R: float,
    lam: float,
    parser: str = "global",
    generator: torch.Generator | None = None,
    frozen_b: Sequence[torch.Tensor] | None = None,
) -> StepResult:
    """Forward/backward over K micro-batches, leaving the summed gradients in ``.grad``.

    ``global``: G and F are reduced over every token of all micro-batches and a
    single aux gradient is applied at the end. Because the aux loss is linear in
    G with slope depending on F only, that gradient is ``lam * c(F) * grad(sum_p) / T``
    where ``grad(sum_p)`` is accumulated per micro-batch.

    ``normal``: each sequence (window) gets its own aux loss from its own G, F,
    averaged over all sequences of the step.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    n_tgt = sum(mb.n_targets for mb in micro_batches)
    n_seq = sum(mb.ids.shape[0] for mb in micro_batches)
    if n_tgt == 0:
        raise ValueError("every target is ignored; nothing to predict")
    side = [torch.zeros_like(p) for p in params] if parser == "global" else None
    shards, ce_parts, per_seq = [], [], []
    for k, mb in enumerate(micro_batches):
        b = None if frozen_b is None else frozen_b[k]
        out = model(mb.ids, mb.doc, mb.valid, phase="train", generator=generator, b=b)
        tok_ce = cross_entropy(out.logits, mb.targets, reduction="none").view_as(mb.targets)
        keep = mb.targets != IGNORE_INDEX
        if not bool(torch.isfinite(tok_ce.detach()[keep]).all()) or not bool(torch.isfinite(out.p.detach()).all()):
            raise NonFiniteError(f"micro-batch {k} forward", float("nan"))
        ce_parts.append(exact_sum(tok_ce.detach()[keep].tolist()))
        ce_term = tok_ce.sum() / n_tgt
        shards.append(ShardStats.from_tensors(out.p, out.b, mb.valid))
        pv = out.p * mb.valid
        if parser == "global":
            ce_term.backward(retain_graph=True)
            g = torch.autograd.grad(pv.sum(), params, allow_unused=True)
            for acc, gi in zip(side, g):
                if gi is not None:
                    acc.add_(gi)
        else:
            counts = mb.valid.sum(dim=1).to(pv.dtype)
            G_i = pv.sum(dim=1) / counts
            F_i = (out.b & mb.valid).sum(dim=1).to(pv.dtype) / counts
            aux_i = aux_loss(G_i, F_i.detach(), R)
            per_seq.extend(aux_i.detach().tolist())
            (ce_term + lam * aux_i.sum() / n_seq).backward()
    stats = accumulate_global_stats(shards)
    if parser == "global":
        coef = lam * aux_grad_coefficient(stats.F, R) / stats.token_count
        for p, acc in zip(params, side):
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            p.grad.add_(acc, alpha=coef)
        l_aux = float(aux_loss(stats.G, stats.F, R))
    else:
        l_aux = float(exact_sum(per_seq) / len(per_seq))
    l_ce = float(sum(ce_parts, Fraction(0)) / n_tgt)
    return StepResult(l_ce + lam * l_aux, l_ce, l_aux, stats, n_tgt, per_seq)


def baseline_gradients(model: BaselineLM, micro_batches: Sequence[MicroBatch]) -> StepResult:
    n_tgt = sum(mb.n_targets for mb in micro_batches)
    ce_parts = []
    for mb in micro_batches:
        logits = model(mb.ids, mb.doc, mb.valid)
        tok_ce = cross_entropy(logits, mb.targets, reduction="none").view_as(mb.targets)
        kept = tok_ce.detach()[mb.targets != IGNORE_INDEX]
        if not bool(torch.isfinite(kept).all()):
            raise NonFiniteError("baseline forward", float("nan"))
        ce_parts.append(exact_sum(kept.tolist()))
        (tok_ce.sum() / n_tgt).backward()
    l_ce = float(sum(ce_parts, Fraction(0)) / n_tgt)
    stats = GlobalStats(1, Fraction(0), 0)
    return StepResult(l_ce, l_ce, 0.0, stats, n_tgt)


# data stream ---------------------------------------------------------------------


def window_stream(corpus, L: int, seed: int) -> Iterator[TokenBatch]:
    """Endless FIFO of packed windows; each epoch reshuffles with ``seed + epoch``."""
    epoch = 0
    while True:
        yield from pack_batches(corpus, L, seed=seed + epoch)
        epoch += 1


def step_batches(corpus, cfg: TrainConfig, start_step: int = 0) -> Iterator[list[MicroBatch]]:
    stream = window_stream(corpus, cfg.seq_len, cfg.seed)
    per_step = cfg.micro_batch * cfg.accum_steps
    for _ in range(start_step * per_step):
        next(stream)
    while True:
        windows = [next(stream) for _ in range(per_step)]
        yield [MicroBatch.from_windows(windows[i : i + cfg.micro_batch])
               for i in range(0, per_step, cfg.micro_batch)]


# model construction ----------------------------------------------------------------


def build_model(cfg: TrainConfig):
    torch.manual_seed(cfg.seed)
    model = DLCM(cfg.model) if isinstance(cfg.model, DLCMConfig) else BaselineLM(cfg.model)
    plan = plan_for(cfg.model, eta_token=cfg.eta_token, eta_concept=cfg.eta_concept, eta_others=cfg.eta_others)
    init_parameters(model, plan, torch.Generator().manual_seed(cfg.seed))
    opt = torch.optim.AdamW(param_groups(model, plan, cfg.weight_decay), betas=cfg.betas)
    return model, opt, plan


# checkpoints -----------------------------------------------------------------------

_FORMAT = "dlcm-checkpoint-1"
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_NP = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def _pack(named: Sequence[tuple[str, torch.Tensor]], blob: io.BytesIO) -> list[dict]:
    entries = []
    for name, t in named:
        t = t.detach().cpu().contiguous()
        code = _DTYPES[t.dtype]
        raw = t.numpy().astype(_NP[code], copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(t.shape), "offset": blob.tell(),
                        "nbytes": len(raw)})
        blob.write(raw)
    return entries


def _unpack(entries: list[dict], data: bytes) -> dict[str, torch.Tensor]:
    out = {}
    for e in entries:
        end = e["offset"] + e["nbytes"]
        if end > len(data):
            raise CheckpointError(f"tensor {e['name']!r} runs past end of blob ({end} > {len(data)} bytes)")
        arr = np.frombuffer(data[e["offset"] : end], dtype=_NP[e["dtype"]]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy())
    return out


def save_checkpoint(path, model, optimizer=None, train_cfg: TrainConfig | None = None, step: int = 0,
                    tokens_seen: int = 0, generator: torch.Generator | None = None) -> Path:
    """Write ``manifest.json`` + ``tensors.bin`` (little-endian, names = module paths)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = io.BytesIO()
    names = [n for n, _ in model.named_parameters()]
    tensors = _pack(list(model.named_parameters()), blob)
    opt_entries, opt_scalars = [], {}
    if optimizer is not None:
        index = {id(p): n for n, p in model.named_parameters()}
        named = []
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p, {})
                for key in ("exp_avg", "exp_avg_sq"):
                    if key in st:
                        named.append((f"{index[id(p)]}::{key}", st[key]))
                if "step" in st:
                    opt_scalars[index[id(p)]] = float(st["step"])
        opt_entries = _pack(named, blob)
    manifest = {
        "format": _FORMAT,
        "model_kind": "dlcm" if isinstance(model, DLCM) else "baseline",
        "config": asdict(model.cfg),
        "config_hash": config_hash(model.cfg),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "step": step,
        "tokens_seen": tokens_seen,
        "rng_state": base64.b64encode(generator.get_state().numpy().tobytes()).decode() if generator else None,
        "param_names": names,
        "tensors": tensors,
        "optimizer": {"tensors": opt_entries, "steps": opt_scalars},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (path / "tensors.bin").write_bytes(blob.getvalue())
    return path


def load_checkpoint(path, expected_hash: str | None = None, optimizer_for=None):
    """Rebuild the model from a checkpoint directory.

    Returns ``(model, info)``; ``info`` carries step, tokens, rng state and the
    raw optimizer tensors. A config-hash mismatch refuses the load.
    """
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable manifest in {path}: {e}") from None
    if manifest.get("format") != _FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    kind = manifest["model_kind"]
    cfg = (DLCMConfig if kind == "dlcm" else BaselineConfig)(**manifest["config"])
    h = config_hash(cfg)
    if h != manifest["config_hash"] or (expected_hash is not None and expected_hash != h):
        raise CheckpointError(f"config hash mismatch: manifest {manifest['config_hash']}, "
                              f"config {h}, expected {expected_hash}")
    data = (path / "tensors.bin").read_bytes()
    tensors = _unpack(manifest["tensors"], data)
    opt_tensors = _unpack(manifest["optimizer"]["tensors"], data)
    dtype = tensors[manifest["tensors"][0]["name"]].dtype if manifest["tensors"] else torch.float64
    model = DLCM(cfg, dtype) if kind == "dlcm" else BaselineLM(cfg, dtype)
    own = dict(model.named_parameters())
    if set(own) != set(tensors):
        raise CheckpointError(f"parameter names differ: missing {sorted(set(own) - set(tensors))}, "
                              f"unexpected {sorted(set(tensors) - set(own))}")
    with torch.no_grad():
        for n, p in own.items():
            if tuple(p.shape) != tuple(tensors[n].shape):
                raise CheckpointError(f"shape mismatch for {n}: {tuple(p.shape)} vs {tuple(tensors[n].shape)}")
            p.copy_(tensors[n])
    info = dict(manifest)
    info["optimizer_tensors"] = opt_tensors
    return model, info


def restore_optimizer(optimizer, model, info) -> None:
    index = {id(p): n for n, p in model.named_parameters()}
    tensors, steps = info["optimizer_tensors"], info["optimizer"]["steps"]
    for group in optimizer.param_groups:
        for p in group["params"]:
            n = index[id(p)]
            if n in steps:
                optimizer.state[p] = {
                    "step": torch.tensor(steps[n], dtype=torch.float32),
                    "exp_avg": tensors[f"{n}::exp_avg"].to(p.dtype),
                    "exp_avg_sq": tensors[f"{n}::exp_avg_sq"].to(p.dtype),
                }


def restore_generator(info) -> torch.Generator:
    g = torch.Generator()
    if info.get("rng_state"):
        state = np.frombuffer(base64.b64decode(info["rng_state"]), dtype=np.uint8).copy()
        g.set_state(torch.from_numpy(state))
    return g


# training loop -----------------------------------------------------------------------


def train(cfg: TrainConfig, corpus, resume_from=None, max_steps: int | None = None, log_path=None,
          model=None, callback=None):
    """Run the optimisation; returns ``(model, trajectory)``.

    The trajectory is a list of per-step dicts with step, tokens, loss_ce,
    loss_aux, G, F, realized_R, lr and wallclock_s. ``max_steps`` stops early
    (used for interrupted-run tests) without changing the schedule.
    """
    is_dlcm = isinstance(cfg.model, DLCMConfig)
    if resume_from is not None:
        model, info = load_checkpoint(resume_from)
        _, opt, plan = build_model(cfg)
        opt = torch.optim.AdamW(param_groups(model, plan, cfg.weight_decay), betas=cfg.betas)
        restore_optimizer(opt, model, info)
        gen = restore_generator(info)
        start = info["step"]
    else:
        built, opt, plan = build_model(cfg)
        model = model or built
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        start = 0
    total = cfg.total_steps
    end = min(total, max_steps) if max_steps is not None else total
    R = cfg.model.target_R if is_dlcm else 1.0
    lam = cfg.model.lambda_aux if is_dlcm else 0.0
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    last_ckpt = str(resume_from) if resume_from else None
    trajectory: list[dict] = []
    recent: list[float] = []
    over = 0
    t0 = time.perf_counter()
    logf = open(log_path, "a") if log_path else None
    try:
        batches = step_batches(corpus, cfg, start)
        for step in range(start, end):
            mult = wsd_schedule(step, total - 1 if total > 1 else 1, cfg.warmup_steps, cfg.decay_frac)
            for g in opt.param_groups:
                g["lr"] = g["base_lr"] * mult
            mbs = next(batches)
            opt.zero_grad(set_to_none=True)
            try:
                if is_dlcm:
                    res = accumulate_gradients(model, mbs, R, lam, cfg.parser, gen)
                else:
                    res = baseline_gradients(model, mbs)
            except NonFiniteError as e:
                raise TrainingDiverged(f"{e} at step {step}", last_ckpt) from e
            if not math.isfinite(res.loss):
                raise TrainingDiverged(f"non-finite loss at step {step}", last_ckpt)
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            tokens = (step + 1) * cfg.tokens_per_step
            entry = {
                "step": step,
                "tokens": tokens,
                "loss_ce": res.loss_ce,
                "loss_aux": res.loss_aux,
                "G": res.stats.G if is_dlcm else None,
                "F": res.stats.F if is_dlcm else None,
                "realized_R": res.stats.realized_R if is_dlcm else None,
                "lr": mult * cfg.eta_token,
                "wallclock_s": time.perf_counter() - t0,
            }
            trajectory.append(entry)
            if logf and step % cfg.log_every == 0:
                logf.write(json.dumps(entry) + "\n")
                logf.flush()
            if callback:
                callback(entry)
            recent.append(res.loss)
            recent = recent[-200:]
            med = statistics.median(recent)
            over = over + 1 if res.loss > 10 * med else 0
            if over >= 50:
                raise TrainingDiverged(f"loss above 10x running median for 50 steps (step {step})", last_ckpt)
            if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                last_ckpt = str(save_checkpoint(out_dir / f"ckpt_{step + 1:06d}", model, opt, cfg, step + 1,
                                                tokens, gen))
    finally:
        if logf:
            logf.close()
    return model, trajectory


# analysis -----------------------------------------------------------------------------


@torch.no_grad()
def loss_by_concept_position(model: DLCM, windows: Sequence[TokenBatch], baseline=None, max_pos: int = 20,
                             batch: int = 8) -> dict:
    """Mean CE by position inside the (inferred) concept, for DLCM and optionally a baseline."""
    sums = {"dlcm": np.zeros(max_pos), "baseline": np.zeros(max_pos)}
    counts = np.zeros(max_pos, dtype=np.int64)
    for i in range(0, len(windows), batch):
        mb = MicroBatch.from_windows(windows[i : i + batch])
        out = model(mb.ids, mb.doc, mb.valid, phase="infer")
        pos = (torch.arange(mb.ids.shape[1])[None] - out.smap.seg_start).numpy()
        keep = (mb.targets != IGNORE_INDEX).numpy() & (pos < max_pos)
        ce = cross_entropy(out.logits, mb.targets, reduction="none").view_as(mb.targets).numpy()
        np.add.at(sums["dlcm"], pos[keep], ce[keep])
        if baseline is not None:
            bl = cross_entropy(baseline(mb.ids, mb.doc, mb.valid), mb.targets, reduction="none")
            np.add.at(sums["baseline"], pos[keep], bl.view_as(mb.targets).numpy()[keep])
        np.add.at(counts, pos[keep], 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        dl = sums["dlcm"] / counts
        bl = sums["baseline"] / counts if baseline is not None else np.full(max_pos, np.nan)
    return {
        "position": list(range(max_pos)),
        "count": counts.tolist(),
        "dlcm": dl.tolist(),
        "baseline": bl.tolist(),
        "delta": (dl - bl).tolist(),
    }


@torch.no_grad()
def evaluate(model, windows: Sequence[TokenBatch], batch: int = 8, phase: str = "infer") -> dict:
    """Mean CE over ``windows`` and (for DLCM) the inferred tokens per concept."""
    ce_sum, n, tok, seg = 0.0, 0, 0, 0
    for i in range(0, len(windows), batch):
        mb = MicroBatch.from_windows(windows[i : i + batch])
        if isinstance(model, DLCM):
            out = model(mb.ids, mb.doc, mb.valid, phase=phase, generator=torch.Generator().manual_seed(i))
            logits = out.logits
            tok += int(mb.valid.sum())
            seg += int((out.b & mb.valid).sum())
        else:
            logits = model(mb.ids, mb.doc, mb.valid)
        ce_sum += float(cross_entropy(logits, mb.targets, reduction="sum"))
        n += mb.n_targets
    return {"loss_ce": ce_sum / n, "tokens_per_concept": tok / seg if seg else None}



def full_model_gradcheck(cfg: DLCMConfig, L: int = 16, batch: int = 2, seed: int = 0, eps: float = 1e-6,
                         init_std: float = 0.3) -> tuple[float, str]:
    """Central-difference check of every parameter of a small DLCM under frozen boundaries.

    The objective is CE + lambda * L_aux with F held fixed. A larger init std
    than training keeps gradients well above round-off.
    """
    from torch.func import functional_call

    from .numerics import finite_difference_check

    g = torch.Generator().manual_seed(seed)
    model = DLCM(cfg)
    with torch.no_grad():
        for n, p in model.named_parameters():
            if p.dim() >= 2:
                p.normal_(0.0, init_std, generator=g)
            elif not n.endswith("gate_logit"):
                p.uniform_(0.5, 1.5, generator=g)
    ids = torch.randint(0, cfg.vocab_size, (batch, L), generator=g)
    doc = torch.zeros(batch, L, dtype=torch.long)
    doc[:, L // 2 :] = 1
    valid = torch.ones(batch, L, dtype=torch.bool)
    targets = torch.randint(0, cfg.vocab_size, (batch, L), generator=g)
    targets[:, L // 2 - 1] = IGNORE_INDEX
    b = torch.rand(batch, L, generator=g) < 1.0 / cfg.target_R
    F_fixed = float((b | (torch.arange(L) == 0) | (torch.arange(L) == L // 2)).double().mean())

    def objective(params):
        out = functional_call(model, params, (ids, doc, valid), {"phase": "train", "b": b})
        G = out.p.mean()
        return cross_entropy(out.logits, targets) + cfg.lambda_aux * aux_loss(G, F_fixed, cfg.target_R)

    params = {n: p.detach().clone() for n, p in model.named_parameters()}
    return finite_difference_check(objective, params, eps=eps)
