"""Customization strategies over a frozen backbone.

Each strategy owns the frozen pieces it needs and exposes the same surface
to the federation engine:

``init_trainable(rng)``
    fresh global trainable :class:`ParameterSet`
``loss(trainable, batch)``
    differentiable training loss
``eval_loss(trainable, batch)``
    task cross-entropy used for validation
``decode(trainable, prompts, max_new)``
    greedy generations
``prefix_of(trainable)``
    :class:`KVPrefix` for FPT, ``None`` otherwise
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import (IGNORE, BackboneConfig, Batch, KVPrefix, ParameterSet, forward,
                       greedy_decode, init_backbone, lm_loss)
from .errors import ConfigurationError, DimensionError

METHODS = ("FPT", "FFFT", "FAT", "FKD")

# Trainable parameter counts (millions) at GPT-2 Medium scale, kept for
# reference only; desk-scale runs reproduce the ordering, not the values.
PAPER_SCALE_PARAMS_M = {"FPT": 25.0, "FFFT": 345.0, "FAT": 25.0, "FKD": 38.3}
PAPER_SCALE_FFFT_OVER_FPT = 345.0 / 25.0


# --- prefix optimizer -----------------------------------------------------

@dataclass(frozen=True)
class PrefixConfig:
    prefix_len: int = 10
    embed_dim: int = 32
    hidden: int = 32
    init_scale: float = 1.0


class PrefixOptimizer:
    """Embedding over prefix slots followed by a three-layer tanh MLP.

    Slot i's MLP output (length 2·L·d) is reshaped into that slot's key and
    value rows for every layer and head.
    """

    def __init__(self, params: ParameterSet, cfg: PrefixConfig, bound: BackboneConfig):
        self.params = params
        self.cfg = cfg
        self.bound = bound
        out = params["prefix.mlp.2.w"].shape[1]
        if out != self.out_dim(bound) or params["prefix.embedding"].shape[0] != cfg.prefix_len:
            raise ConfigurationError(
                f"prefix optimizer output {out} does not bind to backbone needing "
                f"{self.out_dim(bound)}")

    @staticmethod
    def out_dim(bound: BackboneConfig) -> int:
        return 2 * bound.n_layers * bound.n_heads * bound.head_dim

    @staticmethod
    def param_count(cfg: PrefixConfig, bound: BackboneConfig) -> int:
        p, e, h = cfg.prefix_len, cfg.embed_dim, cfg.hidden
        o = PrefixOptimizer.out_dim(bound)
        return p * e + (e * h + h) + (h * h + h) + (h * o + o)

    @classmethod
    def init_params(cls, cfg: PrefixConfig, bound: BackboneConfig,
                    rng: np.random.Generator) -> ParameterSet:
        if cfg.prefix_len < 1:
            raise ConfigurationError("prefix length must be >= 1")
        p, e, h = cfg.prefix_len, cfg.embed_dim, cfg.hidden
        o = cls.out_dim(bound)
        ps = ParameterSet()

        def add(name, arr):
            ps.add(name, Tensor(arr, name=name), "prefix")

        add("prefix.embedding", rng.normal(0.0, 1.0, size=(p, e)))
        add("prefix.mlp.0.w", rng.normal(0.0, math.sqrt(1.0 / e), size=(e, h)))
        add("prefix.mlp.0.b", np.zeros(h))
        add("prefix.mlp.1.w", rng.normal(0.0, math.sqrt(1.0 / h), size=(h, h)))
        add("prefix.mlp.1.b", np.zeros(h))
        add("prefix.mlp.2.w", rng.normal(0.0, cfg.init_scale / math.sqrt(h), size=(h, o)))
        add("prefix.mlp.2.b", np.zeros(o))
        return ps


def generate_prefix(opt: PrefixOptimizer) -> KVPrefix:
    ps, b = opt.params, opt.bound
    x = ps["prefix.embedding"]
    x = ad.tanh(ad.linear(x, ps["prefix.mlp.0.w"], ps["prefix.mlp.0.b"]))
    x = ad.tanh(ad.linear(x, ps["prefix.mlp.1.w"], ps["prefix.mlp.1.b"]))
    x = ad.linear(x, ps["prefix.mlp.2.w"], ps["prefix.mlp.2.b"])
    p = opt.cfg.prefix_len
    kv = ad.reshape(x, (p, 2, b.n_layers, b.n_heads, b.head_dim))
    kv = ad.transpose(kv, (1, 2, 3, 0, 4))
    return KVPrefix(kv[0], kv[1], b)


# --- adapters ---------------------------------------------------------------

class AdapterSet:
    """Bottleneck adapters after the attention and feed-forward sublayers."""

    POINTS = ("attn", "mlp")

    def __init__(self, params: ParameterSet, cfg: BackboneConfig):
        self.params = params
        self.cfg = cfg

    @staticmethod
    def param_count(cfg: BackboneConfig, bottleneck: int) -> int:
        d, b = cfg.model_dim, bottleneck
        return 2 * cfg.n_layers * (d * b + b * d + d + b)

    @classmethod
    def init_params(cls, cfg: BackboneConfig, bottleneck: int,
                    rng: np.random.Generator) -> ParameterSet:
        d, b = cfg.model_dim, bottleneck
        ps = ParameterSet()
        for i in range(cfg.n_layers):
            for pt in cls.POINTS:
                pre = f"adapters.{i}.{pt}."
                ps.add(pre + "down.w", Tensor(rng.normal(0.0, math.sqrt(2.0 / d), size=(d, b))),
                       "adapter")
                ps.add(pre + "down.b", Tensor(np.zeros(b)), "adapter")
                # zero up-projection: identity map at initialisation
                ps.add(pre + "up.w", Tensor(np.zeros((b, d))), "adapter")
                ps.add(pre + "up.b", Tensor(np.zeros(d)), "adapter")
        return ps

    def apply(self, x: Tensor, layer: int, point: str) -> Tensor:
        pre = f"adapters.{layer}.{point}."
        ps = self.params
        h = ad.relu(ad.linear(x, ps[pre + "down.w"], ps[pre + "down.b"]))
        return ad.add(x, ad.linear(h, ps[pre + "up.w"], ps[pre + "up.b"]))


# --- distillation -----------------------------------------------------------

@dataclass(frozen=True)
class DistillLossWeights:
    w_task: float = 1.0
    w_soft: float = 1.0
    w_hidden: float = 1.0
    temperature: float = 2.0

    def __post_init__(self):
        if min(self.w_task, self.w_soft, self.w_hidden) < 0:
            raise ConfigurationError("distillation weights must be nonnegative")
        if self.w_task + self.w_soft + self.w_hidden <= 0:
            raise ConfigurationError("distillation weights must not all be zero")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")


@dataclass
class ModelOutput:
    logits: Tensor
    hidden: list


@dataclass
class DistillLoss:
    total: Tensor
    task: float
    soft: float
    hidden: float


def distill_losses(teacher: ModelOutput, student: ModelOutput, targets, w: DistillLossWeights,
                   projection: Tensor | None = None, aligned: tuple = ((-1, -1),),
                   ignore_index: int = IGNORE) -> DistillLoss:
    """Task CE + T²·KL(teacher‖student) + MSE(project(student hidden), teacher hidden).

    All three terms average over the positions whose target is not ignored.
    """
    if w.w_hidden > 0 and not aligned:
        raise ConfigurationError("hidden loss weight is positive but no layers are aligned")
    V = student.logits.shape[-1]
    t = np.asarray(targets).reshape(-1)
    rows = np.nonzero(t != ignore_index)[0]
    s_logits = ad.reshape(student.logits, (-1, V))
    task = ad.cross_entropy(s_logits, t, ignore_index)

    T = w.temperature
    s_sel = ad.getitem(s_logits, rows)
    t_sel = teacher.logits.data.reshape(-1, V)[rows]
    tz = t_sel / T - (t_sel / T).max(axis=1, keepdims=True)
    pt = np.exp(tz)
    pt /= pt.sum(axis=1, keepdims=True)
    log_pt = np.log(np.clip(pt, 1e-300, None))
    log_ps = ad.log_softmax_rows(ad.scale(s_sel, 1.0 / T))
    # KL = sum p_t (log p_t - log p_s), averaged over positions
    cross = ad.tsum(ad.mul(Tensor(pt), log_ps))
    kl = ad.scale(ad.add(cross, Tensor(-(pt * log_pt).sum())), -1.0 / len(rows))
    soft = ad.scale(kl, T * T)

    hid_terms = []
    for si, ti in aligned:
        sh = student.hidden[si]
        th = teacher.hidden[ti].data
        sh = ad.getitem(ad.reshape(sh, (-1, sh.shape[-1])), rows)
        if projection is not None:
            sh = ad.matmul(sh, projection)
        th = th.reshape(-1, th.shape[-1])[rows]
        if sh.shape != th.shape:
            raise DimensionError(f"hidden alignment shapes {sh.shape} vs {th.shape}")
        diff = ad.sub(sh, Tensor(th))
        hid_terms.append(ad.tmean(ad.mul(diff, diff)))
    hidden = hid_terms[0] if hid_terms else Tensor(0.0)
    for h in hid_terms[1:]:
        hidden = ad.add(hidden, h)
    if len(hid_terms) > 1:
        hidden = ad.scale(hidden, 1.0 / len(hid_terms))

    total = ad.add(ad.add(ad.scale(task, w.w_task), ad.scale(soft, w.w_soft)),
                   ad.scale(hidden, w.w_hidden))
    return DistillLoss(total, task.item(), soft.item(), hidden.item())


@dataclass(frozen=True)
class StudentConfig:
    n_layers: int = 1
    n_heads: int = 2
    model_dim: int = 32
    ff_dim: int = 128


class StudentModel:
    """Smaller backbone plus one hidden-alignment projection (d_s × d_t)."""

    def __init__(self, params: ParameterSet, cfg: BackboneConfig):
        self.params = params
        self.cfg = cfg

    @staticmethod
    def make_config(student: StudentConfig, teacher: BackboneConfig) -> BackboneConfig:
        return replace(teacher, n_layers=student.n_layers, n_heads=student.n_heads,
                       model_dim=student.model_dim, ff_dim=student.ff_dim,
                       adapter_bottleneck=None)

    @classmethod
    def init_params(cls, scfg: BackboneConfig, tcfg: BackboneConfig,
                    rng: np.random.Generator) -> ParameterSet:
        ps = init_backbone(scfg, rng)
        proj = rng.normal(0.0, 1.0 / math.sqrt(scfg.model_dim),
                          size=(scfg.model_dim, tcfg.model_dim))
        ps.add("align.0.w", Tensor(proj, name="align.0.w"), "align")
        return ps

    @staticmethod
    def param_count(scfg: BackboneConfig, tcfg: BackboneConfig) -> int:
        return init_backbone(scfg, np.random.default_rng(0)).count() + scfg.model_dim * tcfg.model_dim


# --- strategies ------------------------------------------------------------

@dataclass
class TrainableInfo:
    names: list
    count: int

    @property
    def nbytes(self) -> int:
        return 8 * self.count


class Strategy:
    name = "?"

    def __init__(self, backbone: ParameterSet, cfg: BackboneConfig, eos_id: int, pad_id: int):
        self.backbone = backbone
        self.cfg = cfg
        self.eos_id = eos_id
        self.pad_id = pad_id

    def init_trainable(self, rng) -> ParameterSet:
        raise NotImplementedError

    def loss(self, trainable: ParameterSet, batch: Batch) -> Tensor:
        raise NotImplementedError

    def eval_loss(self, trainable: ParameterSet, batch: Batch) -> Tensor:
        return self.loss(trainable, batch)

    def decode(self, trainable: ParameterSet, prompts, max_new=None) -> list[list[int]]:
        raise NotImplementedError

    def prefix_of(self, trainable: ParameterSet) -> KVPrefix | None:
        return None

    def trainable_view(self, trainable: ParameterSet) -> TrainableInfo:
        return TrainableInfo(trainable.names(), trainable.count())


class PrefixTuning(Strategy):
    name = "FPT"

    def __init__(self, backbone, cfg, eos_id, pad_id, prefix: PrefixConfig = PrefixConfig()):
        super().__init__(backbone, cfg, eos_id, pad_id)
        self.pcfg = prefix

    def init_trainable(self, rng):
        return PrefixOptimizer.init_params(self.pcfg, self.cfg, rng)

    def prefix_of(self, trainable):
        return generate_prefix(PrefixOptimizer(trainable, self.pcfg, self.cfg))

    def loss(self, trainable, batch):
        return lm_loss(self.backbone, batch, self.cfg, prefix=self.prefix_of(trainable))

    def decode(self, trainable, prompts, max_new=None):
        with ad.no_grad():
            prefix = self.prefix_of(trainable)
        return greedy_decode(self.backbone, prompts, self.cfg, self.eos_id, self.pad_id,
                             prefix=prefix, max_new=max_new)


class AdapterTuning(Strategy):
    name = "FAT"

    def __init__(self, backbone, cfg, eos_id, pad_id, bottleneck: int = 16):
        super().__init__(backbone, cfg, eos_id, pad_id)
        self.bottleneck = bottleneck

    def init_trainable(self, rng):
        return AdapterSet.init_params(self.cfg, self.bottleneck, rng)

    def loss(self, trainable, batch):
        return lm_loss(self.backbone, batch, self.cfg, adapters=AdapterSet(trainable, self.cfg))

    def decode(self, trainable, prompts, max_new=None):
        return greedy_decode(self.backbone, prompts, self.cfg, self.eos_id, self.pad_id,
                             adapters=AdapterSet(trainable, self.cfg), max_new=max_new)


class FullFineTuning(Strategy):
    name = "FFFT"

    def init_trainable(self, rng):
        # starts from the pretrained weights, not from rng
        return self.backbone.clone(requires_grad=False)

    def loss(self, trainable, batch):
        return lm_loss(trainable, batch, self.cfg)

    def decode(self, trainable, prompts, max_new=None):
        return greedy_decode(trainable, prompts, self.cfg, self.eos_id, self.pad_id,
                             max_new=max_new)


class Distillation(Strategy):
    name = "FKD"

    def __init__(self, backbone, cfg, eos_id, pad_id, student: StudentConfig = StudentConfig(),
                 weights: DistillLossWeights = DistillLossWeights()):
        super().__init__(backbone, cfg, eos_id, pad_id)
        self.scfg = StudentModel.make_config(student, cfg)
        self.weights = weights

    def init_trainable(self, rng):
        return StudentModel.init_params(self.scfg, self.cfg, rng)

    def loss(self, trainable, batch):
        with ad.no_grad():
            t_logits, t_hidden = forward(self.backbone, batch.inputs, self.cfg, return_hidden=True)
        s_logits, s_hidden = forward(trainable, batch.inputs, self.scfg, return_hidden=True)
        out = distill_losses(ModelOutput(t_logits, t_hidden), ModelOutput(s_logits, s_hidden),
                             batch.targets, self.weights, projection=trainable["align.0.w"])
        return out.total

    def eval_loss(self, trainable, batch):
        return lm_loss(trainable, batch, self.scfg)

    def decode(self, trainable, prompts, max_new=None):
        return greedy_decode(trainable, prompts, self.scfg, self.eos_id, self.pad_id,
                             max_new=max_new)


def make_strategy(method: str, backbone: ParameterSet, cfg: BackboneConfig, eos_id: int,
                  pad_id: int, prefix: PrefixConfig = PrefixConfig(), bottleneck: int = 16,
                  student: StudentConfig = StudentConfig(),
                  weights: DistillLossWeights = DistillLossWeights()) -> Strategy:
    if method == "FPT":
        return PrefixTuning(backbone, cfg, eos_id, pad_id, prefix)
    if method == "FAT":
        return AdapterTuning(backbone, cfg, eos_id, pad_id, bottleneck)
    if method == "FFFT":
        return FullFineTuning(backbone, cfg, eos_id, pad_id)
    if method == "FKD":
        return Distillation(backbone, cfg, eos_id, pad_id, student, weights)
    raise ConfigurationError(f"unknown method {method!r}")


def trainable_view(method: str, backbone: ParameterSet, cfg: BackboneConfig,
                   prefix: PrefixConfig = PrefixConfig(), bottleneck: int = 16,
                   student: StudentConfig = StudentConfig()) -> TrainableInfo:
    """Names and scalar count of what ``method`` trains (and therefore uploads)."""
    strat = make_strategy(method, backbone, cfg, 0, 0, prefix, bottleneck, student)
    ps = strat.init_trainable(np.random.default_rng(0))
    return strat.trainable_view(ps)
