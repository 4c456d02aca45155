"""Teacher-student objective: centred/sharpened distributions, the masked,
temporal and local distillation terms, EMA teacher and the training step.

Loss helpers return ``None`` when a term has no valid summands. ``None`` is
"inactive", which is different from a genuine zero loss, and
:func:`total_loss` drops such terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import NonFiniteLossError
from .viewgen import NORM_MEAN, NORM_STD, ViewBatch

EPS = 1e-12


@dataclass
class DistillState:
    center: torch.Tensor
    tau_s: float = 0.1
    tau_t: float = 0.04
    momentum: float = 0.996
    lambda_local: float = 1.0
    lambda_mask: float = 0.5
    lambda_temp: float = 0.5
    center_rate: float = 0.9

    def __post_init__(self):
        if self.tau_s <= 0 or self.tau_t <= 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"EMA momentum must be in [0, 1], got {self.momentum}")
        if min(self.lambda_local, self.lambda_mask, self.lambda_temp) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def initial(cls, dim, dtype=torch.float32, **kwargs):
        return cls(center=torch.zeros(dim, dtype=dtype), **kwargs)

    @property
    def lambdas(self):
        return (self.lambda_local, self.lambda_mask, self.lambda_temp)


# ---------------------------------------------------------------------------
# distributions
# ---------------------------------------------------------------------------


def teacher_distribution(z, c, tau_t: float):
    """``softmax((z - c) / tau_t)`` with no gradient path back to ``z``."""
    z = torch.as_tensor(z)
    with torch.no_grad():
        return torch.softmax((z - torch.as_tensor(c, dtype=z.dtype)) / tau_t, dim=-1)


def student_distribution(z, tau_s: float):
    return torch.softmax(torch.as_tensor(z) / tau_s, dim=-1)


def student_log_distribution(z, tau_s: float):
    """``log p``; the training losses use this so tiny probabilities keep exact logs."""
    return torch.log_softmax(torch.as_tensor(z) / tau_s, dim=-1)


def cross_entropy(q, p=None, *, log_p=None, eps: float = EPS):
    """``H(q, p) = -sum_u q(u) log p(u)`` over the last axis.

    Pass ``log_p`` for an exact result; probabilities given as ``p`` are
    clamped at ``eps`` before the log.
    """
    q = torch.as_tensor(q)
    if log_p is None:
        if p is None:
            raise TypeError("cross_entropy needs p or log_p")
        log_p = torch.log(torch.as_tensor(p).clamp_min(eps))
    return -(q * torch.as_tensor(log_p)).sum(dim=-1)


def entropy(q):
    q = torch.as_tensor(q)
    return -torch.xlogy(q, q).sum(dim=-1)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def _mean(terms):
    if not terms:
        return None
    return torch.stack(terms).mean()


def loss_mask(teacher_dists: dict, student_dists: dict):
    """Mean of ``H(q_t, p_{t,k})`` over every object view with a same-frame target."""
    terms = []
    for (t, k), p in student_dists.items():
        if t not in teacher_dists:
            raise KeyError(f"no teacher target for frame {t}")
        terms.append(cross_entropy(teacher_dists[t], p))
    return _mean(terms)


def build_positive_set(track_ids: dict, valid_teacher_frames) -> list[tuple[int, int, int]]:
    """All ``(t, k, t')`` with ``t' != t`` where the same track is visible at ``t'``."""
    valid = set(valid_teacher_frames)
    frames_of = {}
    for (t, _k), tid in track_ids.items():
        frames_of.setdefault(tid, set()).add(t)
    pairs = []
    for (t, k), tid in sorted(track_ids.items()):
        for t2 in sorted(frames_of[tid]):
            if t2 != t and t2 in valid:
                pairs.append((t, k, t2))
    return pairs


def loss_temp(teacher_dists: dict, student_dists: dict, pairs):
    """Mean over cross-time positives of ``H(q_{t'}, p_{t,k})``."""
    return _mean([cross_entropy(teacher_dists[t2], student_dists[(t, k)]) for t, k, t2 in pairs])


def loss_local(teacher_dists: dict, local_dists: dict):
    """Mean of ``H(q_t, p_{t,r})`` over all local views."""
    return _mean([cross_entropy(teacher_dists[t], p) for (t, _r), p in local_dists.items()])


def total_loss(l_local, l_mask, l_temp, lambdas=(1.0, 0.5, 0.5)):
    """Weighted sum skipping inactive (``None``) and zero-weighted terms.

    Returns ``None`` if every term is inactive and zero if active terms all
    carry zero weight.
    """
    total = None
    active = [v for v in (l_local, l_mask, l_temp) if v is not None]
    for value, lam in zip((l_local, l_mask, l_temp), lambdas):
        if value is None or lam == 0:
            continue
        term = lam * value
        total = term if total is None else total + term
    if total is None and active:
        return torch.zeros_like(torch.as_tensor(active[0]))
    return total


# ---------------------------------------------------------------------------
# teacher and centre updates
# ---------------------------------------------------------------------------


def _as_param_list(obj):
    if isinstance(obj, nn.Module):
        return list(obj.parameters())
    if isinstance(obj, dict):
        return [obj[k] for k in sorted(obj)]
    return list(obj)


@torch.no_grad()
def ema_update(teacher, student, mu: float):
    """``teacher <- mu * teacher + (1 - mu) * student`` elementwise, in place."""
    t_params, s_params = _as_param_list(teacher), _as_param_list(student)
    if len(t_params) != len(s_params):
        raise ValueError(f"parameter count mismatch: {len(t_params)} vs {len(s_params)}")
    for pt, ps in zip(t_params, s_params):
        if pt.shape != ps.shape:
            raise ValueError(f"parameter shape mismatch: {tuple(pt.shape)} vs {tuple(ps.shape)}")
    for pt, ps in zip(t_params, s_params):
        pt.mul_(mu).add_(ps.detach(), alpha=1.0 - mu)
    return teacher


@torch.no_grad()
def update_center(c, teacher_logits, rate: float):
    """EMA of the batch-mean teacher logits; an empty batch leaves ``c`` unchanged."""
    teacher_logits = torch.as_tensor(teacher_logits)
    if teacher_logits.numel() == 0 or teacher_logits.shape[0] == 0:
        return c
    return rate * c + (1.0 - rate) * teacher_logits.mean(dim=0)


def cosine_momentum(step: int, total_steps: int, base: float, final: float = 1.0) -> float:
    if total_steps <= 0:
        return base
    progress = min(1.0, step / total_steps)
    return final - (final - base) * (math.cos(math.pi * progress) + 1.0) / 2.0


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    if total_steps <= warmup:
        return base_lr
    progress = min(1.0, (step - warmup) / (total_steps - warmup))
    return min_lr + (base_lr - min_lr) * (math.cos(math.pi * progress) + 1.0) / 2.0


def make_optimizer(model: nn.Module, lr: float = 1e-3, weight_decay: float = 0.04):
    """AdamW; biases, norm parameters and embeddings are not decayed."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or name.endswith(("cls_token", "pos_embed")):
            no_decay.append(p)
        else:
            decay.append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=lr,
    )


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------


def _stack(images, dtype, mean=NORM_MEAN, std=NORM_STD):
    arr = np.stack(images).astype(np.float32)
    arr = (arr - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)


def batch_losses(student, teacher, state: DistillState, batches: list[ViewBatch], *, need_mask=True, need_local=True):
    """Loss terms for a list of tubes, pooled over all tubes.

    Returns ``(terms, teacher_logits)`` where ``terms`` maps
    ``L_local``, ``L_mask`` and ``L_temp`` to tensors or ``None``.
    """
    dtype = next(student.parameters()).dtype
    t_keys, t_imgs, valid = [], [], []
    for b, vb in enumerate(batches):
        for t, img in sorted(vb.teacher_views.items()):
            t_keys.append((b, t))
            t_imgs.append(img)
            valid.append((b, t))
        for t, img in sorted(vb.fallback_views.items()):
            t_keys.append((b, t))
            t_imgs.append(img)

    teacher_logits = torch.zeros(0, state.center.shape[-1], dtype=dtype)
    q = {}
    if t_imgs:
        with torch.no_grad():
            teacher_logits = teacher(_stack(t_imgs, dtype)).logits.detach()
        dists = teacher_distribution(teacher_logits, state.center.to(dtype), state.tau_t)
        q = {key: dists[i] for i, key in enumerate(t_keys)}
    valid_set = set(valid)

    m_keys, m_imgs = [], []
    if need_mask:
        for b, vb in enumerate(batches):
            for t, k, img in vb.student_masked_views:
                if (b, t) in valid_set:
                    m_keys.append((b, t, k))
                    m_imgs.append(img)
    p_mask = {}
    if m_imgs:
        out = student(_stack(m_imgs, dtype)).logits
        dists = student_log_distribution(out, state.tau_s)
        p_mask = {key: dists[i] for i, key in enumerate(m_keys)}

    l_keys, l_imgs = [], []
    if need_local:
        for b, vb in enumerate(batches):
            for lv in vb.local_views:
                if (b, lv.t) in q:
                    l_keys.append((b, lv.t, lv.r))
                    l_imgs.append(lv.image)
    p_local = {}
    if l_imgs:
        out = student(_stack(l_imgs, dtype)).logits
        dists = student_log_distribution(out, state.tau_s)
        p_local = {key: dists[i] for i, key in enumerate(l_keys)}

    # pooled over tubes: flatten (b, t) into a single frame key
    # p_mask and p_local hold log-probabilities
    mask_terms = [cross_entropy(q[(b, t)], log_p=lp) for (b, t, k), lp in p_mask.items()]
    local_terms = [cross_entropy(q[(b, t)], log_p=lp) for (b, t, r), lp in p_local.items()]
    temp_terms = []
    for b, vb in enumerate(batches):
        frames = {t for (bb, t) in valid_set if bb == b}
        ids = {tk: tid for tk, tid in vb.track_ids.items() if (b, tk[0], tk[1]) in p_mask}
        for t, k, t2 in build_positive_set(ids, frames):
            temp_terms.append(cross_entropy(q[(b, t2)], log_p=p_mask[(b, t, k)]))
    terms = {"L_local": _mean(local_terms), "L_mask": _mean(mask_terms), "L_temp": _mean(temp_terms)}
    return terms, teacher_logits


def _dump_batch(batches, dump_dir, step):
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"nonfinite_step{step}.npz"
    arrays = {}
    for b, vb in enumerate(batches):
        for t, img in vb.teacher_views.items():
            arrays[f"b{b}_teacher_t{t}"] = img
        for t, k, img in vb.student_masked_views:
            arrays[f"b{b}_student_t{t}_k{k}"] = img
        for lv in vb.local_views:
            arrays[f"b{b}_local_t{lv.t}_r{lv.r}"] = lv.image
    np.savez_compressed(path, **arrays)
    return path


def train_step(student, teacher, state: DistillState, micro_batches, optimizer, *, momentum=None, step=0, dump_dir=None):
    """One optimiser step over ``micro_batches`` (a list of tube lists).

    Gradients are accumulated with each micro-batch weighted equally. After
    the step the teacher takes an EMA update and the centre is refreshed from
    every teacher logit seen in the step. Returns the averaged loss scalars;
    inactive terms are reported as ``None``.
    """
    mu = state.momentum if momentum is None else momentum
    need_mask = state.lambda_mask > 0 or state.lambda_temp > 0
    need_local = state.lambda_local > 0
    optimizer.zero_grad(set_to_none=True)
    sums = {"L_local": [], "L_mask": [], "L_temp": [], "total": []}
    all_teacher_logits = []
    stepped = False
    n = len(micro_batches)
    for batches in micro_batches:
        terms, t_logits = batch_losses(student, teacher, state, batches, need_mask=need_mask, need_local=need_local)
        all_teacher_logits.append(t_logits)
        total = total_loss(terms["L_local"], terms["L_mask"], terms["L_temp"], state.lambdas)
        if total is not None and not torch.isfinite(total):
            path = _dump_batch(batches, dump_dir, step) if dump_dir is not None else None
            values = {k: (None if v is None else float(v.detach())) for k, v in terms.items()}
            raise NonFiniteLossError(f"non-finite loss at step {step}: {values}", path)
        for name, value in terms.items():
            if value is not None:
                sums[name].append(float(value.detach()))
        if total is not None:
            sums["total"].append(float(total.detach()))
            if total.requires_grad:
                (total / n).backward()
                stepped = True
    if stepped:
        optimizer.step()
    ema_update(teacher, student, mu)
    logits = torch.cat(all_teacher_logits) if all_teacher_logits else torch.zeros(0)
    state.center = update_center(state.center, logits.to(state.center.dtype), state.center_rate)
    return {name: (sum(v) / len(v) if v else None) for name, v in sums.items()}
