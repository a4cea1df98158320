"""Small pre-norm decoder-only transformer with KV-prefix and adapter hooks."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, InputError, LengthError

if TYPE_CHECKING:
    from .customization import AdapterSet

GROUPS = ("backbone", "adapter", "head", "prefix", "align")
IGNORE = -100


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 2
    n_heads: int = 4
    model_dim: int = 64
    ff_dim: int = 256
    vocab_size: int = 300
    max_seq_len: int = 96
    adapter_bottleneck: int | None = None

    def __post_init__(self):
        for f in ("n_layers", "n_heads", "model_dim", "ff_dim", "vocab_size", "max_seq_len"):
            if getattr(self, f) < 1:
                raise ConfigurationError(f"{f} must be positive")
        if self.model_dim % self.n_heads:
            raise ConfigurationError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.adapter_bottleneck is not None and self.adapter_bottleneck < 1:
            raise ConfigurationError("adapter_bottleneck must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


class ParameterSet:
    """Named tensors with a group tag per entry."""

    def __init__(self, entries: dict[str, Tensor] | None = None,
                 groups: dict[str, str] | None = None):
        self.entries: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        for name, t in (entries or {}).items():
            self.add(name, t, (groups or {}).get(name, "backbone"))

    def add(self, name: str, tensor: Tensor, group: str) -> None:
        if name in self.entries:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        if group not in GROUPS:
            raise ConfigurationError(f"unknown group {group!r}")
        self.entries[name] = tensor
        self.groups[name] = group

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def count(self) -> int:
        return sum(t.size for t in self.entries.values())

    def nbytes(self) -> int:
        return 8 * self.count()

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.entries.items()}

    def select(self, groups: Iterable[str]) -> "ParameterSet":
        groups = set(groups)
        return ParameterSet({k: t for k, t in self.entries.items() if self.groups[k] in groups},
                            self.groups)

    def clone(self, requires_grad: bool | None = None) -> "ParameterSet":
        out = ParameterSet()
        for k, t in self.entries.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out.add(k, Tensor(t.data.copy(), requires_grad=rg, name=k), self.groups[k])
        return out

    @classmethod
    def from_values(cls, values: dict[str, np.ndarray], groups: dict[str, str],
                    requires_grad: bool = False) -> "ParameterSet":
        out = cls()
        for k, v in values.items():
            out.add(k, Tensor(np.array(v, dtype=np.float64), requires_grad=requires_grad, name=k),
                    groups[k])
        return out

    def merged(self, other: "ParameterSet") -> "ParameterSet":
        out = ParameterSet(dict(self.entries), dict(self.groups))
        for k in other:
            out.add(k, other[k], other.groups[k])
        return out

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.zero_grad()

    # serialisation
    _MAGIC = b"FCKP1\n"

    def to_bytes(self, header: dict | None = None) -> bytes:
        entries = []
        blobs = []
        offset = 0
        for k, t in self.entries.items():
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            entries.append({"name": k, "group": self.groups[k], "shape": list(t.shape),
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        head = json.dumps({"meta": header or {}, "entries": entries}, sort_keys=True).encode()
        return self._MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["ParameterSet", dict]:
        if not blob.startswith(cls._MAGIC):
            raise InputError("not a parameter checkpoint")
        pos = len(cls._MAGIC)
        (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
        pos += 8
        head = json.loads(blob[pos:pos + hlen].decode())
        data = memoryview(blob)[pos + hlen:]
        out = cls()
        for e in head["entries"]:
            arr = np.frombuffer(data[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f8")
            out.add(e["name"], Tensor(arr.reshape(e["shape"]).astype(np.float64), name=e["name"]),
                    e["group"])
        return out, head["meta"]

    def save(self, path, header: dict | None = None) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(header))

    @classmethod
    def load(cls, path) -> tuple["ParameterSet", dict]:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class KVPrefix:
    """Per-layer key/value rows prepended inside attention.

    ``keys`` and ``values`` have shape (L, H, p, d/H).
    """

    def __init__(self, keys: Tensor, values: Tensor, cfg: BackboneConfig):
        if keys.ndim != 4 or keys.shape != values.shape:
            raise DimensionError(f"prefix keys/values shapes {keys.shape} / {values.shape}")
        L, H, p, dh = keys.shape
        if p < 1:
            raise ConfigurationError("prefix length must be >= 1")
        if (L, H, dh) != (cfg.n_layers, cfg.n_heads, cfg.head_dim):
            raise ConfigurationError(
                f"prefix shape {keys.shape} does not fit backbone "
                f"(L={cfg.n_layers}, H={cfg.n_heads}, d/H={cfg.head_dim})")
        self.keys = keys
        self.values = values
        self.prefix_len = p

    def flat(self) -> np.ndarray:
        return np.concatenate([self.keys.data.reshape(-1), self.values.data.reshape(-1)])


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> ParameterSet:
    """GPT-style init: N(0, 0.02) weights, residual projections scaled by 1/sqrt(2L)."""
    d, f, V = cfg.model_dim, cfg.ff_dim, cfg.vocab_size
    std = 0.02
    resid = std / math.sqrt(2 * cfg.n_layers)
    ps = ParameterSet()

    def w(*shape, s=std):
        return Tensor(rng.normal(0.0, s, size=shape))

    ps.add("tok_emb", w(V, d), "backbone")
    ps.add("pos_emb", w(cfg.max_seq_len, d, s=0.01), "backbone")
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        ps.add(p + "ln1.g", Tensor(np.ones(d)), "backbone")
        ps.add(p + "ln1.b", Tensor(np.zeros(d)), "backbone")
        ps.add(p + "attn.qkv.w", w(d, 3 * d), "backbone")
        ps.add(p + "attn.qkv.b", Tensor(np.zeros(3 * d)), "backbone")
        ps.add(p + "attn.proj.w", w(d, d, s=resid), "backbone")
        ps.add(p + "attn.proj.b", Tensor(np.zeros(d)), "backbone")
        ps.add(p + "ln2.g", Tensor(np.ones(d)), "backbone")
        ps.add(p + "ln2.b", Tensor(np.zeros(d)), "backbone")
        ps.add(p + "mlp.fc.w", w(d, f), "backbone")
        ps.add(p + "mlp.fc.b", Tensor(np.zeros(f)), "backbone")
        ps.add(p + "mlp.out.w", w(f, d, s=resid), "backbone")
        ps.add(p + "mlp.out.b", Tensor(np.zeros(d)), "backbone")
    ps.add("ln_f.g", Tensor(np.ones(d)), "backbone")
    ps.add("ln_f.b", Tensor(np.zeros(d)), "backbone")
    ps.add("head.w", w(d, V), "head")
    ps.add("head.b", Tensor(np.zeros(V)), "head")
    for name, t in ps.entries.items():
        t.name = name
    return ps


def _check_tokens(tokens: np.ndarray, cfg: BackboneConfig) -> None:
    if tokens.shape[-1] > cfg.max_seq_len:
        raise LengthError(f"sequence length {tokens.shape[-1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise InputError(f"token id outside vocabulary [0, {cfg.vocab_size})")


def _attention(x: Tensor, params: ParameterSet, layer: int, cfg: BackboneConfig,
               prefix: KVPrefix | None) -> Tensor:
    B, T, d = x.shape
    H, dh = cfg.n_heads, cfg.head_dim
    pre = f"layers.{layer}.attn."
    qkv = ad.linear(x, params[pre + "qkv.w"], params[pre + "qkv.b"])
    qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    p = 0
    if prefix is not None:
        p = prefix.prefix_len
        pk = ad.expand(prefix.keys[layer], (B,))
        pv = ad.expand(prefix.values[layer], (B,))
        k = ad.concat([pk, k], axis=2)
        v = ad.concat([pv, v], axis=2)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    # causal among real positions; every query sees all prefix slots
    mask = np.zeros((T, p + T), dtype=bool)
    mask[:, p:] = np.triu(np.ones((T, T), dtype=bool), k=1)
    att = ad.softmax_rows(ad.masked_fill(scores, mask, -1e30))
    out = ad.matmul(att, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, T, d))
    return ad.linear(out, params[pre + "proj.w"], params[pre + "proj.b"])


def forward(params: ParameterSet, tokens, cfg: BackboneConfig, prefix: KVPrefix | None = None,
            adapters: "AdapterSet | None" = None, return_hidden: bool = False):
    """Next-token logits for ``tokens`` of shape (T,) or (B, T).

    Returns logits of shape (T, V) or (B, T, V); with ``return_hidden`` also
    the residual stream after each block.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    _check_tokens(tokens, cfg)
    B, T = tokens.shape
    x = ad.embedding(params["tok_emb"], tokens)
    pos = ad.expand(params["pos_emb"][:T], (B,))
    x = ad.add(x, pos)
    hidden = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h = ad.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        a = _attention(h, params, i, cfg, prefix)
        if adapters is not None:
            a = adapters.apply(a, i, "attn")
        x = ad.add(x, a)
        h = ad.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        m = ad.gelu(ad.linear(h, params[pre + "mlp.fc.w"], params[pre + "mlp.fc.b"]))
        m = ad.linear(m, params[pre + "mlp.out.w"], params[pre + "mlp.out.b"])
        if adapters is not None:
            m = adapters.apply(m, i, "mlp")
        x = ad.add(x, m)
        hidden.append(x)
    x = ad.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    logits = ad.linear(x, params["head.w"], params["head.b"])
    if single:
        logits = logits[0]
        hidden = [h[0] for h in hidden]
    return (logits, hidden) if return_hidden else logits


@dataclass
class Batch:
    """Right-padded inputs and shifted targets (MR and padding ignored)."""

    inputs: np.ndarray
    targets: np.ndarray

    @property
    def n_targets(self) -> int:
        return int((self.targets != IGNORE).sum())


def make_batch(seqs: Sequence[tuple[np.ndarray, int]], pad_id: int) -> Batch:
    """Build a batch from (token ids, SEP index) pairs.

    Only positions predicting text tokens and EOS carry targets.
    """
    if not seqs:
        raise InputError("empty batch")
    T = max(len(s) for s, _ in seqs) - 1
    inputs = np.full((len(seqs), T), pad_id, dtype=np.int64)
    targets = np.full((len(seqs), T), IGNORE, dtype=np.int64)
    for b, (s, sep) in enumerate(seqs):
        n = len(s) - 1
        inputs[b, :n] = s[:-1]
        targets[b, :n] = s[1:]
        targets[b, :sep] = IGNORE
    return Batch(inputs, targets)


def lm_loss(params: ParameterSet, batch: Batch, cfg: BackboneConfig,
            prefix: KVPrefix | None = None, adapters: "AdapterSet | None" = None) -> Tensor:
    if batch.inputs.size == 0:
        raise InputError("empty batch")
    logits = forward(params, batch.inputs, cfg, prefix, adapters)
    return ad.cross_entropy(logits, batch.targets, IGNORE)


def _cached_step(params: ParameterSet, tokens: np.ndarray, pos: np.ndarray, cfg: BackboneConfig,
                 cache_k: np.ndarray, cache_v: np.ndarray, n_prefix: int,
                 adapters: "AdapterSet | None", rows: np.ndarray) -> np.ndarray:
    """Logits for ``tokens`` (B, T) sitting at absolute positions ``pos`` (B, T).

    Keys/values of the new tokens are written into the caches (L, B, H, p+S, dh)
    first (``rows`` picks the cache rows); each query then sees the prefix
    slots and every cached position up to its own.
    """
    B, T = tokens.shape
    H, dh, d = cfg.n_heads, cfg.head_dim, cfg.model_dim
    rows = rows[:, None]
    width = n_prefix + int(pos.max()) + 1
    # key slot j (past the prefix) is visible to a query at position q iff j - p <= q
    hidden_key = (np.arange(width)[None, None, :] - n_prefix) > pos[:, :, None]
    x = ad.add(ad.embedding(params["tok_emb"], tokens), Tensor(params["pos_emb"].data[pos]))
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h = ad.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        qkv = ad.linear(h, params[pre + "attn.qkv.w"], params[pre + "attn.qkv.b"]).data
        qkv = qkv.reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
        slots = n_prefix + pos
        cache_k[i][rows, :, slots] = qkv[1].transpose(0, 2, 1, 3)
        cache_v[i][rows, :, slots] = qkv[2].transpose(0, 2, 1, 3)
        k, v = cache_k[i][rows[:, 0], :, :width], cache_v[i][rows[:, 0], :, :width]
        scores = (qkv[0] @ np.swapaxes(k, 2, 3)) * (1.0 / math.sqrt(dh))
        scores = np.where(hidden_key[:, None], -1e30, scores)
        att = ad.softmax_rows(Tensor(scores)).data
        out = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        a = ad.linear(Tensor(out), params[pre + "attn.proj.w"], params[pre + "attn.proj.b"])
        if adapters is not None:
            a = adapters.apply(a, i, "attn")
        x = ad.add(x, a)
        h = ad.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        m = ad.gelu(ad.linear(h, params[pre + "mlp.fc.w"], params[pre + "mlp.fc.b"]))
        m = ad.linear(m, params[pre + "mlp.out.w"], params[pre + "mlp.out.b"])
        if adapters is not None:
            m = adapters.apply(m, i, "mlp")
        x = ad.add(x, m)
    x = ad.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return ad.linear(x, params["head.w"], params["head.b"]).data


def greedy_decode(params: ParameterSet, mr_tokens, cfg: BackboneConfig, eos_id: int,
                  pad_id: int = 0, prefix: KVPrefix | None = None,
                  adapters: "AdapterSet | None" = None, max_new: int | None = None,
                  forward_fn=None) -> list[list[int]]:
    """Argmax decoding for one or many prompts (each ending with SEP).

    Prompts of different lengths share one right-padded buffer.  By default
    keys and values are cached so each step only runs the newest token; a
    custom ``forward_fn`` falls back to re-running the whole buffer.
    Returns generated ids without the EOS.
    """
    single = len(mr_tokens) > 0 and np.isscalar(mr_tokens[0])
    prompts = [list(mr_tokens)] if single else [list(m) for m in mr_tokens]
    lens = [len(p) for p in prompts]
    limit = cfg.max_seq_len - min(lens)
    budget = limit if max_new is None else min(max_new, limit)
    out: list[list[int]] = [[] for _ in prompts]
    done = [False] * len(prompts)
    buf = np.full((len(prompts), cfg.max_seq_len), pad_id, dtype=np.int64)
    for b, p in enumerate(prompts):
        buf[b, :len(p)] = p
    _check_tokens(buf, cfg)
    cur = list(lens)

    def take(b, row_logits):
        nxt = int(np.argmax(row_logits))
        if nxt == eos_id:
            done[b] = True
            return
        out[b].append(nxt)
        if cur[b] >= cfg.max_seq_len:
            done[b] = True
            return
        buf[b, cur[b]] = nxt
        cur[b] += 1

    with ad.no_grad():
        if forward_fn is not None:
            for _ in range(budget):
                active = [b for b in range(len(prompts)) if not done[b]]
                if not active:
                    break
                width = max(cur[b] for b in active)
                logits = forward_fn(buf[active, :width]).data
                for j, b in enumerate(active):
                    take(b, logits[j, cur[b] - 1])
            return out[0] if single else out

        B, L, H, dh = len(prompts), cfg.n_layers, cfg.n_heads, cfg.head_dim
        p = prefix.prefix_len if prefix is not None else 0
        cache_k = np.zeros((L, B, H, p + cfg.max_seq_len, dh))
        cache_v = np.zeros_like(cache_k)
        if prefix is not None:
            cache_k[:, :, :, :p] = prefix.keys.data[:, None]
            cache_v[:, :, :, :p] = prefix.values.data[:, None]
        width = max(lens)
        pos = np.broadcast_to(np.arange(width), (B, width))
        logits = _cached_step(params, buf[:, :width], pos, cfg, cache_k, cache_v, p, adapters,
                              np.arange(B))
        if budget > 0:
            for b in range(B):
                take(b, logits[b, cur[b] - 1])
        for _ in range(budget - 1):
            active = np.array([b for b in range(B) if not done[b]], dtype=np.int64)
            if active.size == 0:
                break
            at = np.array([cur[b] - 1 for b in active])
            logits = _cached_step(params, buf[active, at][:, None], at[:, None], cfg,
                                  cache_k, cache_v, p, adapters, active)
            for j, b in enumerate(active):
                take(b, logits[j, 0])
    return out[0] if single else out


@dataclass
class TrainableView:
    trainable: ParameterSet
    frozen: ParameterSet

    @property
    def count(self) -> int:
        return self.trainable.count()


def set_trainable(params: ParameterSet, groups: Iterable[str],
                  require_nonempty: bool = False) -> TrainableView:
    """Flag entries of ``groups`` as trainable; all others are frozen."""
    groups = set(groups)
    bad = groups - set(GROUPS)
    if bad:
        raise ConfigurationError(f"unknown group tags {sorted(bad)}")
    tr, fr = ParameterSet(), ParameterSet()
    for name, t in params.entries.items():
        g = params.groups[name]
        if g in groups:
            if not t.requires_grad:
                t.requires_grad = True
                t.grad = np.zeros_like(t.data)
            tr.add(name, t, g)
        else:
            t.requires_grad = False
            t.grad = None
            fr.add(name, t, g)
    if require_nonempty and len(tr) == 0:
        raise ConfigurationError("training step requested with an empty trainable set")
    return TrainableView(tr, fr)


def pretrain(cfg: BackboneConfig, sequences: Sequence[tuple[np.ndarray, int]], pad_id: int,
             epochs: int, lr: float, batch_size: int, seed: int, log=None) -> ParameterSet:
    """Train a fresh backbone on all sequences; returns frozen parameters."""
    from .optim import Adam

    rng = np.random.default_rng([seed, 0xBB])
    params = init_backbone(cfg, rng)
    set_trainable(params, ("backbone", "head"))
    opt = Adam(params.values(), lr=lr)
    n = len(sequences)
    for ep in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        steps = 0
        for s in range(0, n, batch_size):
            batch = make_batch([sequences[i] for i in order[s:s + batch_size]], pad_id)
            params.zero_grad()
            loss = lm_loss(params, batch, cfg)
            loss.backward()
            opt.step({k: t.grad for k, t in params.entries.items()})
            total += loss.item()
            steps += 1
        if log is not None:
            log(f"pretrain epoch {ep + 1}/{epochs} loss {total / steps:.4f}")
    set_trainable(params, ())
    return params


def config_dict(cfg: BackboneConfig) -> dict:
    return asdict(cfg)
