"""Decoupled maximal-update parametrization for token- and concept-width components.

Hidden matrices are initialised with std ``sigma_base / sqrt(s)`` and trained
with learning rate ``eta / s`` and Adam epsilon ``eps / s``, where ``s`` is the
width multiplier of the component the matrix reads from. Embeddings, gains
and biases keep ``sigma_base`` and ``eta_others``. Logits are divided by
``s_token``; the unembedding ("readout") is drawn with std
``sigma_base * sqrt(s_token)`` so that the scaled logits stay O(1) at init,
and it trains with ``eta_others`` so its per-step logit change is
width-independent too.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

GROUPS = ("token_hidden", "concept_hidden", "readout", "others")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class GroupEntry:
    group: str
    shape_key: str
    init_std: float
    lr: float
    adam_eps: float


@dataclass(frozen=True)
class MuPPlan:
    d_base: int
    d_token: int
    d_concept: int
    sigma_base: float
    s_token: float
    s_concept: float
    entries: tuple[GroupEntry, ...]

    @property
    def output_scale(self) -> float:
        return 1.0 / self.s_token

    def entry(self, group: str) -> GroupEntry:
        for e in self.entries:
            if e.group == group:
                return e
        raise KeyError(group)

    def to_json(self) -> str:
        return json.dumps(
            {
                "d_base": self.d_base,
                "s_token": self.s_token,
                "s_concept": self.s_concept,
                "output_scale": self.output_scale,
                "groups": [asdict(e) for e in self.entries],
            },
            indent=2,
        )


def make_mup_plan(
    d_base: int,
    d_token: int,
    d_concept: int,
    sigma_base: float = 0.02,
    eta_token: float = 3e-3,
    eta_concept: float = 3e-3,
    eta_others: float = 3e-3,
    adam_eps: float = 1e-8,
) -> MuPPlan:
    if min(d_base, d_token, d_concept) <= 0:
        raise PlanError("all widths must be positive")
    if d_base > min(d_token, d_concept):
        warnings.warn(f"d_base={d_base} exceeds a component width; multipliers < 1", RuntimeWarning)
    s_tok = d_token / d_base
    s_con = d_concept / d_base
    entries = (
        GroupEntry("token_hidden", "d_token", sigma_base / math.sqrt(s_tok), eta_token / s_tok, adam_eps / s_tok),
        GroupEntry("concept_hidden", "d_concept", sigma_base / math.sqrt(s_con), eta_concept / s_con,
                   adam_eps / s_con),
        GroupEntry("readout", "d_token", sigma_base * math.sqrt(s_tok), eta_others, adam_eps),
        GroupEntry("others", "embedding", sigma_base, eta_others, adam_eps),
    )
    return MuPPlan(d_base, d_token, d_concept, sigma_base, s_tok, s_con, entries)


def plan_for(cfg, **eta) -> MuPPlan:
    """Plan for a DLCMConfig or BaselineConfig (the baseline has no concept side)."""
    d_token = getattr(cfg, "d_token", None) or cfg.d
    d_concept = getattr(cfg, "d_concept", d_token)
    return make_mup_plan(cfg.d_base, d_token, d_concept, cfg.sigma_base, **eta)


_CONCEPT_PREFIXES = ("backbone.", "cross_attn.W_K.", "cross_attn.W_V.")


def group_of(name: str, param: torch.Tensor) -> str:
    """Assign a parameter (by module path) to exactly one plan group."""
    if name == "unemb":
        return "readout"
    if param.dim() < 2 or name == "embed.weight":
        return "others"
    if name.startswith(_CONCEPT_PREFIXES):
        return "concept_hidden"
    return "token_hidden"


def group_table(model: nn.Module) -> dict[str, str]:
    return {n: group_of(n, p) for n, p in model.named_parameters()}


def check_exhaustive(model: nn.Module, plan: MuPPlan, names=None) -> None:
    """Every parameter name must land in exactly one group the plan knows."""
    known = {e.group for e in plan.entries}
    params = dict(model.named_parameters())
    for n in names or params:
        if n not in params:
            raise PlanError(f"checkpoint tensor {n!r} is not a model parameter")
        hits = [g for g in GROUPS if g == group_of(n, params[n])]
        if len(hits) != 1 or hits[0] not in known:
            raise PlanError(f"parameter {n!r} maps to groups {hits}")


def init_parameters(model: nn.Module, plan: MuPPlan, generator: torch.Generator | None = None) -> None:
    """Truncated (3 sigma) Gaussian init per the plan; gains 1, biases 0.

    Zero-initialised output layers (the learned boundary predictor) stay zero.
    """
    with torch.no_grad():
        for name, p in model.named_parameters():
            group = group_of(name, p)
            if p.dim() < 2:
                if name.endswith("gate_logit"):
                    continue
                if name.endswith("bias"):
                    p.zero_()
                else:
                    p.fill_(1.0)
                continue
            if "predictor.fc2" in name:
                p.zero_()
                continue
            std = plan.entry(group).init_std
            nn.init.trunc_normal_(p, 0.0, std, -3 * std, 3 * std, generator=generator)


def param_groups(model: nn.Module, plan: MuPPlan, weight_decay: float = 0.1) -> list[dict]:
    """AdamW parameter groups: per-plan (lr, eps), decay on matrices only."""
    buckets: dict[tuple[str, bool], list] = {}
    for name, p in model.named_parameters():
        g = group_of(name, p)
        buckets.setdefault((g, p.dim() >= 2), []).append(p)
    out = []
    for (g, is_matrix), ps in sorted(buckets.items()):
        e = plan.entry(g)
        out.append({
            "params": ps,
            "lr": e.lr,
            "base_lr": e.lr,
            "eps": e.adam_eps,
            "weight_decay": weight_decay if is_matrix else 0.0,
            "group_name": g,
        })
    return out


def _rms(x: torch.Tensor) -> float:
    return float(x.detach().pow(2).mean().sqrt())


def coordinate_check(
    widths=(64, 128, 256, 512),
    d_base: int = 64,
    seed: int = 0,
    output_scaling: bool = True,
    steps: int = 10,
    L: int = 64,
    batch: int = 4,
    concept_ratio: int = 2,
    eta: float = 3e-3,
    n_layers: int = 1,
    corpus=None,
) -> dict:
    """Activation/logit RMS at init and after ``steps`` muP-scaled AdamW steps, per width.

    Returns per-width measurements and max/min ratios across widths.
    """
    from .model import DLCM, DLCMConfig
    from .tokens import pack_batches, stack_windows
    from .corpora import periodic_corpus

    corpus = corpus or periodic_corpus(n_docs=8, doc_len=L * batch, seed=seed)
    windows = list(pack_batches(corpus, L, seed=seed))[:batch]
    ids, targets, doc, valid = (torch.as_tensor(a) for a in stack_windows(windows))
    per_width = {}
    for w in widths:
        heads = max(1, w // 32)
        cfg = DLCMConfig(d_token=w, d_concept=concept_ratio * w, n_enc=n_layers, n_backbone=n_layers,
                         n_dec=n_layers, heads_token=heads, heads_concept=max(1, concept_ratio * w // 32),
                         d_base=d_base, output_scaling=output_scaling)
        torch.manual_seed(seed)
        model = DLCM(cfg)
        plan = plan_for(cfg, eta_token=eta, eta_concept=eta, eta_others=eta)
        g = torch.Generator().manual_seed(seed)
        init_parameters(model, plan, g)
        opt = torch.optim.AdamW(param_groups(model, plan), betas=(0.9, 0.95))

        def measure():
            with torch.no_grad():
                out = model(ids, doc, valid, phase="infer", keep_hidden=True)
            m = {k: _rms(v) for k, v in out.hidden.items()}
            m["logits"] = _rms(out.logits[valid])
            return m

        init = measure()
        for _ in range(steps):
            gen = torch.Generator().manual_seed(seed)
            out = model(ids, doc, valid, phase="train", generator=gen)
            loss = torch.nn.functional.cross_entropy(
                out.logits.reshape(-1, out.logits.shape[-1]), targets.reshape(-1), ignore_index=-1)
            opt.zero_grad()
            loss.backward()
            opt.step()
        per_width[w] = {"init": init, "trained": measure()}

    def ratio(phase, key):
        vals = [per_width[w][phase][key] for w in widths]
        return max(vals) / min(vals)

    keys = list(per_width[widths[0]]["init"])
    return {
        "widths": list(widths),
        "d_base": d_base,
        "output_scaling": output_scaling,
        "per_width": per_width,
        "init_ratio": {k: ratio("init", k) for k in keys},
        "trained_ratio": {k: ratio("trained", k) for k in keys},
        "init_logit_ratio": ratio("init", "logits"),
        "max_trained_activation_ratio": max(ratio("trained", k) for k in keys if k != "logits"),
    }


def expected_logit_rms_exponent(output_scaling: bool) -> float:
    """Width exponent of init logit RMS when the unembedding keeps a fixed init std."""
    return -0.5 if output_scaling else 0.5

