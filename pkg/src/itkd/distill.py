"""Interchange-transfer distillation losses.

Teacher-side feature values enter every loss as constants. The shared
autoencoder, the buffer layers and the fusion layer are trainable and
receive gradient from both the teacher and the student branch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import Parameter, ShapeError, ops
from .autodiff.tensor import Tensor
from .detector import HEAD_NAMES, REGRESSION_SLICES, TargetBatch
from .nn import Conv, l1_mean, pointwise, to_rows

KD_COMPONENTS = ("it", "cr", "attn")
HEAD_KD_BASELINES = ("hinton-kl", "plain-l1")
BUFFER_POLICIES = ("s2t", "t2s", "mid")
RECONSTRUCTION_MODES = ("interchange", "self")
AXIS_POLICIES = ("object-all-channel", "formula-literal")


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    losses: frozenset = frozenset(KD_COMPONENTS)
    reconstruction: str = "interchange"
    attention_axis: str = "object-all-channel"
    buffer: str = "s2t"
    shared: bool = True
    temperature: float = 1.0
    # explicit filter counts; None derives (W/2, W/4, W/8) and (W/4, W/2, W) from the AE width W
    enc_filters: tuple[int, ...] | None = None
    dec_filters: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        object.__setattr__(self, "losses", frozenset(self.losses))
        unknown = self.losses - set(KD_COMPONENTS) - set(HEAD_KD_BASELINES)
        if unknown:
            raise ValueError(f"unknown loss components {sorted(unknown)}")
        if self.reconstruction not in RECONSTRUCTION_MODES:
            raise ValueError(f"unknown reconstruction mode {self.reconstruction!r}")
        if self.attention_axis not in AXIS_POLICIES:
            raise ValueError(f"unknown attention axis policy {self.attention_axis!r}")
        if self.buffer not in BUFFER_POLICIES:
            raise ValueError(f"unknown buffer policy {self.buffer!r}")

    def with_(self, **kw) -> "DistillConfig":
        return replace(self, **kw)

    @property
    def needs_autoencoder(self) -> bool:
        return bool({"it", "cr"} & self.losses)


def autoencoder_width(policy: str, c_s: int, c_t: int) -> int:
    if policy == "s2t":
        return c_t
    if policy == "t2s":
        return c_s
    if (c_s + c_t) % 2:
        raise ValueError(f"midpoint buffer needs an even C_s + C_t, got {c_s} + {c_t}")
    return (c_s + c_t) // 2


def default_filters(width: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    enc = tuple(max(1, width // d) for d in (2, 4, 8))
    dec = (max(1, width // 4), max(1, width // 2), width)
    return enc, dec


class Autoencoder:
    """Three 1x1 conv encoder stages and three 1x1 conv decoder stages."""

    def __init__(self, name: str, width: int, enc: Sequence[int], dec: Sequence[int],
                 rng: np.random.Generator):
        if dec[-1] != width:
            raise ValueError(f"decoder must end at the autoencoder width {width}, got {dec[-1]}")
        self.width = width
        widths = [width, *enc]
        self.enc = [Conv(f"{name}/enc{i}", widths[i], widths[i + 1], 1, rng) for i in range(len(enc))]
        widths = [enc[-1], *dec]
        self.dec = [Conv(f"{name}/dec{i}", widths[i], widths[i + 1], 1, rng,
                         gain=2.0 if i < len(dec) - 1 else 1.0) for i in range(len(dec))]

    def parameters(self) -> list[Parameter]:
        return [p for c in self.enc + self.dec for p in c.parameters()]


def encode_shared(x: Tensor, ae: Autoencoder) -> Tensor:
    if x.ndim != 4 or x.shape[1] != ae.width:
        raise ShapeError("encode_shared", f"expected {ae.width} input channels", [x.shape])
    for conv in ae.enc:
        x = ops.relu(conv(x))
    return x


def decode_shared(z: Tensor, ae: Autoencoder) -> Tensor:
    if z.ndim != 4 or z.shape[1] != ae.enc[-1].c_out:
        raise ShapeError("decode_shared", f"expected {ae.enc[-1].c_out} input channels", [z.shape])
    for i, conv in enumerate(ae.dec):
        z = conv(z)
        if i < len(ae.dec) - 1:
            z = ops.relu(z)
    return z


class Buffers:
    """1x1 channel adapters around the autoencoder.

    ``in_t``/``in_s`` map teacher/student maps to the autoencoder width;
    ``out_t``/``out_s`` map reconstructions back to teacher/student width.
    An adapter is ``None`` (identity) when the widths already agree.
    S->T keeps the autoencoder at C_t (``in_s`` is the student input buffer,
    ``out_s`` the teacher output buffer), T->S runs it at C_s and the
    midpoint policy at (C_s + C_t) / 2.
    """

    def __init__(self, policy: str, c_s: int, c_t: int, rng: np.random.Generator, prefix: str = "buffer"):
        self.policy = policy
        self.c_s, self.c_t = c_s, c_t
        w = autoencoder_width(policy, c_s, c_t)
        self.width = w
        self.in_t = Conv(f"{prefix}/teacher_in", c_t, w, 1, rng) if policy != "s2t" else None
        self.out_t = Conv(f"{prefix}/teacher_recon_out", w, c_t, 1, rng, gain=1.0) if policy != "s2t" else None
        self.in_s = Conv(f"{prefix}/student_in", c_s, w, 1, rng) if policy != "t2s" else None
        self.out_s = Conv(f"{prefix}/student_recon_out", w, c_s, 1, rng, gain=1.0) if policy != "t2s" else None

    def parameters(self) -> list[Parameter]:
        return [p for c in (self.in_t, self.out_t, self.in_s, self.out_s) if c is not None
                for p in c.parameters()]

    def set_identity(self) -> None:
        for c in (self.in_t, self.out_t, self.in_s, self.out_s):
            if c is not None:
                c.set_identity()


def _apply(conv: Conv | None, x: Tensor) -> Tensor:
    return x if conv is None else conv(x)


def buffer_student(m_s: Tensor, buffers: Buffers) -> Tensor:
    """Student map to autoencoder width (C_t under the default S->T policy)."""
    if m_s.shape[1] != buffers.c_s:
        raise ShapeError("buffer_student", f"expected {buffers.c_s} channels", [m_s.shape])
    return _apply(buffers.in_s, m_s)


def buffer_teacher(m_t: Tensor, buffers: Buffers) -> Tensor:
    if m_t.shape[1] != buffers.c_t:
        raise ShapeError("buffer_teacher", f"expected {buffers.c_t} channels", [m_t.shape])
    return _apply(buffers.in_t, m_t.detach())


class DistillModule:
    """Everything trainable that distillation adds on top of the student."""

    def __init__(self, cfg: DistillConfig, c_s: int, c_t: int, num_classes: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.buffers = Buffers(cfg.buffer, c_s, c_t, rng)
        w = self.buffers.width
        enc, dec = default_filters(w)
        enc = tuple(cfg.enc_filters) if cfg.enc_filters else enc
        dec = tuple(cfg.dec_filters) if cfg.dec_filters else dec
        self.ae_student = Autoencoder("ae", w, enc, dec, rng)
        self.ae_teacher = self.ae_student if cfg.shared else Autoencoder("ae_teacher", w, enc, dec, rng)
        c_all = num_classes + 8
        self.fusion = Conv("fusion/G", 2 * c_all, c_all, 1, rng, gain=1.0)

    def parameters(self) -> list[Parameter]:
        params = self.buffers.parameters() + self.ae_student.parameters()
        if self.ae_teacher is not self.ae_student:
            params += self.ae_teacher.parameters()
        return params + self.fusion.parameters()


def _check_spatial(name: str, m_t: Tensor, m_s: Tensor) -> None:
    if m_t.ndim != 4 or m_s.ndim != 4 or m_t.shape[0] != m_s.shape[0] or m_t.shape[2:] != m_s.shape[2:]:
        raise ShapeError(name, "teacher and student maps differ in batch or spatial size",
                         [m_t.shape, m_s.shape])


def compressed_representation_loss(m_t: Tensor, m_s: Tensor, kd: DistillModule) -> Tensor:
    """Mean-l1 between the encoded teacher and student maps."""
    _check_spatial("compressed_representation_loss", m_t, m_s)
    enc_t = encode_shared(buffer_teacher(m_t, kd.buffers), kd.ae_teacher)
    enc_s = encode_shared(buffer_student(m_s, kd.buffers), kd.ae_student)
    return l1_mean(enc_t, enc_s)


@dataclass
class TransferTerms:
    total: Tensor
    t2s: Tensor
    s2t: Tensor


def interchange_transfer_loss(m_t: Tensor, m_s: Tensor, kd: DistillModule,
                              mode: str = "interchange") -> TransferTerms:
    """Cross-reconstruction losses (or self-reconstruction with ``mode="self"``).

    t2s compares the student map with the (buffered) reconstruction decoded
    from the teacher's code; s2t compares the teacher map with the
    reconstruction decoded from the student's code.
    """
    if mode not in RECONSTRUCTION_MODES:
        raise ValueError(f"unknown reconstruction mode {mode!r}")
    _check_spatial("interchange_transfer_loss", m_t, m_s)
    b = kd.buffers
    m_t = m_t.detach()
    rec_t = decode_shared(encode_shared(buffer_teacher(m_t, b), kd.ae_teacher), kd.ae_teacher)
    rec_s = decode_shared(encode_shared(buffer_student(m_s, b), kd.ae_student), kd.ae_student)
    if mode == "interchange":
        t2s = l1_mean(m_s, _apply(b.out_s, rec_t))
        s2t = l1_mean(m_t, _apply(b.out_t, rec_s))
    else:
        t2s = l1_mean(m_t, _apply(b.out_t, rec_t))
        s2t = l1_mean(m_s, _apply(b.out_s, rec_s))
    return TransferTerms(ops.add(t2s, s2t), t2s, s2t)


# ---------------------------------------------------------------- head sequences and attention

def extract_sequences(outputs: dict[str, Tensor], rows: np.ndarray) -> dict[str, Tensor] | None:
    """Gather each head's channel vector at the given rows of the (N*H*W) grid.

    ``rows`` must already be in canonical order (scene-major, then cell
    index). Returns ``None`` when there are no objects.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return None
    if len(np.unique(rows)) != rows.size:
        raise ValueError("object centers must map to unique cells")
    seqs = {name: ops.gather_rows(to_rows(outputs[name]), rows) for name in HEAD_NAMES}
    seqs["all"] = ops.concat([seqs[n] for n in HEAD_NAMES], axis=1)
    return seqs


def self_attention(v: Tensor, axis: str = "channel") -> Tensor:
    """Scaled self-attention with the sequence itself as query, key and value.

    ``channel``: softmax(v^T v / sqrt(L)) is C x C and the output is v . A.
    ``object``: softmax(v v^T / sqrt(L)) is L x L and the output is A . v.
    Softmax runs along the last axis of the score matrix.
    """
    if v.ndim != 2 or v.shape[0] == 0:
        raise ShapeError("self_attention", "need an (L, C) sequence with L >= 1", [v.shape])
    scale = 1.0 / math.sqrt(v.shape[0])
    vt = ops.transpose2d(v)
    if axis == "channel":
        attn = ops.softmax(ops.scalar_mul(ops.matmul(vt, v), scale), axis=1)
        return ops.matmul(v, attn)
    if axis == "object":
        attn = ops.softmax(ops.scalar_mul(ops.matmul(v, vt), scale), axis=1)
        return ops.matmul(attn, v)
    raise ValueError(f"unknown attention axis {axis!r}")


@dataclass
class RelationAttention:
    inter: Tensor
    intra: Tensor
    fused: Tensor


def relation_aware_attention(seqs: dict[str, Tensor], fusion: Conv,
                             policy: str = "object-all-channel") -> RelationAttention:
    """Per-head attention (inter), attention over the concatenation (intra), fused by G."""
    if policy not in AXIS_POLICIES:
        raise ValueError(f"unknown attention axis policy {policy!r}")
    lengths = {seqs[n].shape[0] for n in HEAD_NAMES}
    if len(lengths) != 1:
        raise ShapeError("relation_aware_attention", "heads disagree on L",
                         [seqs[n].shape for n in HEAD_NAMES])
    per_head_axis = "object" if policy == "object-all-channel" else "channel"
    inter = ops.concat([self_attention(seqs[n], per_head_axis) for n in HEAD_NAMES], axis=1)
    v_all = seqs.get("all")
    if v_all is None:
        v_all = ops.concat([seqs[n] for n in HEAD_NAMES], axis=1)
    intra = self_attention(v_all, "channel")
    fused = pointwise(ops.concat([inter, intra], axis=1), fusion)
    return RelationAttention(inter, intra, fused)


def attentive_head_loss(out_t: dict[str, Tensor], out_s: dict[str, Tensor], batch: TargetBatch,
                        fusion: Conv, policy: str = "object-all-channel") -> Tensor:
    """Mean-l1 between teacher and student relation-aware attention, averaged over scenes.

    Scenes without objects contribute zero.
    """
    n = batch.num_scenes
    rows_t = {name: to_rows(Tensor(out_t[name].data)) for name in HEAD_NAMES}
    rows_s = {name: to_rows(out_s[name]) for name in HEAD_NAMES}
    total = None
    start = 0
    for count in batch.counts:
        idx = batch.rows[start:start + count]
        start += count
        if count == 0:
            continue
        v_t = {name: ops.gather_rows(rows_t[name], idx) for name in HEAD_NAMES}
        v_s = {name: ops.gather_rows(rows_s[name], idx) for name in HEAD_NAMES}
        f_t = relation_aware_attention(v_t, fusion, policy).fused
        f_s = relation_aware_attention(v_s, fusion, policy).fused
        term = l1_mean(f_t, f_s)
        total = term if total is None else ops.add(total, term)
    if total is None:
        return Tensor(0.0)
    return ops.scalar_mul(total, 1.0 / n)


# ---------------------------------------------------------------- head-KD baselines

def baseline_head_kd(out_t: dict[str, Tensor], out_s: dict[str, Tensor], kind: str,
                     temperature: float = 1.0) -> Tensor:
    """Whole-map head distillation used as a comparator.

    ``hinton-kl``: KL(teacher || student) between temperature-softened class
    distributions softmax(sigmoid(hm) / T), averaged over cells, plus mean-l1
    on the four regression heads. ``plain-l1``: mean-l1 on all five heads
    (heatmap compared after the sigmoid).
    """
    if kind not in HEAD_KD_BASELINES:
        raise ValueError(f"unknown head-KD baseline {kind!r}")
    for name in HEAD_NAMES:
        if out_t[name].shape != out_s[name].shape:
            raise ShapeError("baseline_head_kd", f"head {name} shapes differ",
                             [out_t[name].shape, out_s[name].shape])
    p_t = ops.sigmoid(Tensor(out_t["hm"].data))
    p_s = ops.sigmoid(out_s["hm"])
    if kind == "hinton-kl":
        inv_t = 1.0 / temperature
        log_q_t = ops.log_softmax(ops.scalar_mul(p_t, inv_t), axis=1)
        log_q_s = ops.log_softmax(ops.scalar_mul(p_s, inv_t), axis=1)
        q_t = Tensor(np.exp(log_q_t.data))
        n, _, h, w = p_t.shape
        kl = ops.scalar_mul(ops.sum(ops.mul(q_t, ops.sub(log_q_t, log_q_s))), 1.0 / (n * h * w))
        total = kl
    else:
        total = l1_mean(p_t, p_s)
    for name in REGRESSION_SLICES:
        total = ops.add(total, l1_mean(Tensor(out_t[name].data), out_s[name]))
    return total


# ---------------------------------------------------------------- total

def total_loss(l_sup: Tensor, components: dict[str, Tensor], cfg: DistillConfig) -> Tensor:
    """alpha * L_sup + beta * (sum of enabled KD components); disabled ones contribute 0."""
    kd = None
    for name in (*KD_COMPONENTS, *HEAD_KD_BASELINES):
        if name in cfg.losses and name in components:
            kd = components[name] if kd is None else ops.add(kd, components[name])
    out = ops.scalar_mul(l_sup, cfg.alpha)
    if kd is not None:
        out = ops.add(out, ops.scalar_mul(kd, cfg.beta))
    return out


@dataclass
class DistillLosses:
    sup: Tensor
    total: Tensor
    parts: dict[str, Tensor] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        out = {"sup": self.sup.item(), "total": self.total.item()}
        out.update({k: v.item() for k, v in self.parts.items()})
        return out


def distillation_losses(l_sup: Tensor, m_t: Tensor, out_t: dict[str, Tensor], m_s: Tensor,
                        out_s: dict[str, Tensor], batch: TargetBatch, kd: DistillModule) -> DistillLosses:
    """Evaluate every enabled component and combine them."""
    cfg = kd.cfg
    parts: dict[str, Tensor] = {}
    if "cr" in cfg.losses:
        parts["cr"] = compressed_representation_loss(m_t, m_s, kd)
    if "it" in cfg.losses:
        terms = interchange_transfer_loss(m_t, m_s, kd, cfg.reconstruction)
        parts["it"], parts["t2s"], parts["s2t"] = terms.total, terms.t2s, terms.s2t
    if "attn" in cfg.losses:
        parts["attn"] = attentive_head_loss(out_t, out_s, batch, kd.fusion, cfg.attention_axis)
    for kind in HEAD_KD_BASELINES:
        if kind in cfg.losses:
            parts[kind] = baseline_head_kd(out_t, out_s, kind, cfg.temperature)
    return DistillLosses(l_sup, total_loss(l_sup, parts, cfg), parts)
