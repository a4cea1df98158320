"""Round-synchronous federated training: broadcast, local epoch, upload, aggregate."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Batch, ParameterSet, make_batch
from .customization import Strategy
from .errors import ConfigurationError, DivergenceError
from .metrics import MetricReport, evaluate_generations, prefix_cosine
from .optim import make_optimizer

log = logging.getLogger(__name__)

Seq = tuple  # (token ids, SEP index)


@dataclass(frozen=True)
class AggregationRule:
    kind: str = "fedavg"
    prox_mu: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fedavg", "fedprox"):
            raise ConfigurationError(f"unknown aggregation rule {self.kind!r}")
        if self.prox_mu < 0:
            raise ConfigurationError("prox_mu must be >= 0")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class ClientState:
    client_id: int
    shard: list
    params: ParameterSet | None = None
    optimizer: object = None
    samples_count: int = 0

    def __post_init__(self):
        self.samples_count = len(self.shard)


@dataclass
class RoundRecord:
    round: int
    client_loss: list
    val_loss: float | None = None
    bleu: float | None = None
    rouge_l: float | None = None
    bytes_up: int = 0
    bytes_down: int = 0
    seconds: float = 0.0
    client_drift: float | None = None
    prefix_cosine: float | None = None

    FIELDS = ("round", "per_client_loss", "val_loss", "bleu", "rouge_l", "bytes_up",
              "bytes_down", "seconds", "client_drift", "prefix_cosine")

    def to_log(self, wall_clock: bool = False) -> dict:
        """Ordered dict for the round log; ``seconds`` is null unless requested."""
        return {
            "round": self.round,
            "per_client_loss": list(self.client_loss),
            "val_loss": self.val_loss,
            "bleu": self.bleu,
            "rouge_l": self.rouge_l,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "seconds": self.seconds if wall_clock else None,
            "client_drift": self.client_drift,
            "prefix_cosine": self.prefix_cosine,
        }


class EarlyStopper:
    """Stops once validation loss has failed to strictly decrease ``patience`` times in a row."""

    def __init__(self, patience: int = 3):
        if patience < 1:
            raise ConfigurationError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.since = 0
        self.best_round = None

    def update(self, val_loss: float, round_idx: int | None = None) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.since = 0
            self.best_round = round_idx
        else:
            self.since += 1
        return self.since >= self.patience


# --- batching ---------------------------------------------------------------

def iter_batches(seqs: Sequence[Seq], batch_size: int, rng: np.random.Generator,
                 pad_id: int) -> list[Batch]:
    """Shuffled mini-batches with light length bucketing.

    ``batch_size <= 0`` yields one batch holding the whole shard, in order.
    """
    n = len(seqs)
    if batch_size <= 0 or batch_size >= n:
        order = rng.permutation(n) if batch_size > 0 else np.arange(n)
        return [make_batch([seqs[i] for i in order], pad_id)]
    perm = rng.permutation(n)
    pool = batch_size * 4
    groups = []
    for s in range(0, n, pool):
        chunk = sorted(perm[s:s + pool], key=lambda i: (len(seqs[i][0]), i))
        groups.extend(chunk[j:j + batch_size] for j in range(0, len(chunk), batch_size))
    return [make_batch([seqs[i] for i in groups[j]], pad_id) for j in rng.permutation(len(groups))]


def evaluate_loss(strategy: Strategy, params: ParameterSet, seqs: Sequence[Seq], pad_id: int,
                  batch_size: int = 64) -> float:
    """Token-weighted mean task loss."""
    total = 0.0
    count = 0
    with ad.no_grad():
        for s in range(0, len(seqs), batch_size):
            b = make_batch(list(seqs[s:s + batch_size]), pad_id)
            n = b.n_targets
            total += strategy.eval_loss(params, b).item() * n
            count += n
    return total / count


# --- aggregation ------------------------------------------------------------

def aggregate(uploads: Sequence[tuple[int, int, dict]]) -> dict[str, np.ndarray]:
    """Samples-weighted mean of (client_id, n_samples, values) uploads.

    Summation runs in ascending client-id order, so the result does not depend
    on the order uploads arrive in.  Equal weights take the plain-mean path.
    """
    if not uploads:
        raise ConfigurationError("nothing to aggregate")
    ups = sorted(uploads, key=lambda u: u[0])
    names = list(ups[0][2])
    for cid, _, vals in ups:
        if list(vals) != names:
            raise ConfigurationError(f"client {cid} uploaded mismatched parameter names")
    counts = [n for _, n, _ in ups]
    total = sum(counts)
    out = {}
    equal = len(set(counts)) == 1
    for k in names:
        if equal:
            acc = ups[0][2][k].copy()
            for _, _, vals in ups[1:]:
                acc = acc + vals[k]
            out[k] = acc / len(ups)
        else:
            acc = (counts[0] / total) * ups[0][2][k]
            for (_, n, vals) in ups[1:]:
                acc = acc + (n / total) * vals[k]
            out[k] = acc
    return out


def _flatten(values: dict) -> np.ndarray:
    return np.concatenate([v.reshape(-1) for v in values.values()])


def local_epoch(strategy: Strategy, global_values: dict, groups: dict, shard: Sequence[Seq],
                rule: AggregationRule, opt: OptimizerConfig, rng: np.random.Generator,
                client_id: int = 0) -> tuple[dict, float]:
    """One epoch of local training from the broadcast values; returns (upload, mean loss)."""
    if not shard:
        raise ConfigurationError(f"client {client_id} has an empty shard")
    params = ParameterSet.from_values(global_values, groups, requires_grad=True)
    if len(params) == 0:
        raise ConfigurationError("training step requested with an empty trainable set")
    arrays = params.values()
    kw = {"beta1": opt.beta1, "beta2": opt.beta2} if opt.kind == "adam" else {}
    optimizer = make_optimizer(opt.kind, arrays, opt.lr, **kw)
    anchors = {k: Tensor(v) for k, v in global_values.items()} if rule.kind == "fedprox" else None
    losses = []
    for batch in iter_batches(shard, opt.batch_size, rng, strategy.pad_id):
        params.zero_grad()
        loss = strategy.loss(params, batch)
        total = loss
        if anchors is not None:
            prox = None
            for k, t in params.entries.items():
                diff = ad.sub(t, anchors[k])
                term = ad.tsum(ad.mul(diff, diff))
                prox = term if prox is None else ad.add(prox, term)
            total = ad.add(loss, ad.scale(prox, rule.prox_mu / 2.0))
        value = total.item()
        if not math.isfinite(value):
            raise DivergenceError(client_id, "non-finite loss")
        total.backward()
        grads = {k: t.grad for k, t in params.entries.items()}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(client_id, f"non-finite gradient for {k!r}")
        optimizer.step(grads)
        losses.append(loss.item())
    upload = {k: v.copy() for k, v in arrays.items()}
    for k, v in upload.items():
        if not np.all(np.isfinite(v)):
            raise DivergenceError(client_id, f"NaN/inf in uploaded entry {k!r}")
    return upload, float(np.mean(losses))


def run_round(global_values: dict, groups: dict, clients: Sequence[ClientState],
              strategy: Strategy, rule: AggregationRule, opt: OptimizerConfig, round_idx: int,
              seed: int, workers: int = 1) -> tuple[dict, RoundRecord, dict]:
    """Full-participation round.  Returns (new global, record, per-client uploads)."""
    for c in clients:
        if c.samples_count == 0:
            raise ConfigurationError(f"client {c.client_id} has an empty shard")
    t0 = time.perf_counter()

    def work(c: ClientState):
        rng = np.random.default_rng([seed, round_idx, c.client_id, 0xC11E])
        return local_epoch(strategy, global_values, groups, c.shard, rule, opt, rng, c.client_id)

    ordered = sorted(clients, key=lambda c: c.client_id)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, ordered))
    else:
        results = [work(c) for c in ordered]

    uploads = {c.client_id: r[0] for c, r in zip(ordered, results)}
    for cid, vals in uploads.items():
        if set(vals) != set(global_values):
            raise ConfigurationError(f"client {cid} upload names differ from the global set")
    new_global = aggregate([(c.client_id, c.samples_count, uploads[c.client_id]) for c in ordered])

    nbytes = 8 * sum(v.size for v in global_values.values())
    g = _flatten(new_global)
    drift = float(np.mean([np.linalg.norm(_flatten(uploads[c.client_id]) - g) for c in ordered]))
    rec = RoundRecord(
        round=round_idx,
        client_loss=[r[1] for r in results],
        bytes_up=len(clients) * nbytes,
        bytes_down=len(clients) * nbytes,
        client_drift=drift,
    )
    rec.seconds = time.perf_counter() - t0
    return new_global, rec, uploads


def mean_prefix_cosine(strategy: Strategy, groups: dict, uploads: dict, global_values: dict):
    with ad.no_grad():
        glob = strategy.prefix_of(ParameterSet.from_values(global_values, groups))
        if glob is None:
            return None
        local = [strategy.prefix_of(ParameterSet.from_values(uploads[c], groups))
                 for c in sorted(uploads)]
    return prefix_cosine(local, glob)[1]


# --- sessions ----------------------------------------------------------------

@dataclass
class EvalSet:
    prompts: list
    references: list
    detokenize: Callable


@dataclass
class SessionResult:
    records: list
    best_values: dict
    groups: dict
    best_round: int
    best_val: float
    rounds_run: int
    stopped_early: bool
    metrics: MetricReport | None = None
    final_prefix_cosine: float | None = None
    extra: dict = field(default_factory=dict)


def evaluate_test(strategy: Strategy, values: dict, groups: dict, test: EvalSet,
                  batch_size: int = 128) -> MetricReport:
    params = ParameterSet.from_values(values, groups)
    hyps = []
    for s in range(0, len(test.prompts), batch_size):
        hyps.extend(strategy.decode(params, test.prompts[s:s + batch_size]))
    return evaluate_generations([test.detokenize(h) for h in hyps], test.references)


def train_session(strategy: Strategy, shards: Sequence[Sequence[Seq]], val: Sequence[Seq],
                  test: EvalSet | None, rule: AggregationRule = AggregationRule(),
                  opt: OptimizerConfig = OptimizerConfig(), max_rounds: int = 30,
                  patience: int = 3, seed: int = 0, workers: int = 1, eval_every: int = 0,
                  on_round: Callable[[RoundRecord], None] | None = None,
                  init_values: dict | None = None, early_stopping: bool = True) -> SessionResult:
    """Loop rounds until early stopping or ``max_rounds``; test the best round.

    ``shards[k]`` is client k's list of encoded (ids, SEP index) sequences.
    """
    if max_rounds < 1:
        raise ConfigurationError("max_rounds must be >= 1")
    clients = [ClientState(k, list(s)) for k, s in enumerate(shards)]
    init = strategy.init_trainable(np.random.default_rng([seed, 0x1417]))
    groups = dict(init.groups)
    values = init_values if init_values is not None else {k: v.copy() for k, v in init.values().items()}
    stopper = EarlyStopper(patience)
    records = []
    best_values = values
    last_cos = None
    stopped = False
    for r in range(1, max_rounds + 1):
        t0 = time.perf_counter()
        values, rec, uploads = run_round(values, groups, clients, strategy, rule, opt, r, seed,
                                         workers)
        rec.val_loss = evaluate_loss(strategy, ParameterSet.from_values(values, groups), val,
                                     strategy.pad_id)
        rec.prefix_cosine = last_cos = mean_prefix_cosine(strategy, groups, uploads, values)
        if test is not None and eval_every > 0 and r % eval_every == 0:
            m = evaluate_test(strategy, values, groups, test)
            rec.bleu, rec.rouge_l = m.bleu, m.rouge_l
        improved = rec.val_loss < stopper.best
        stop = stopper.update(rec.val_loss, r)
        if improved:
            best_values = values
        rec.seconds = time.perf_counter() - t0
        records.append(rec)
        log.info("round %d val_loss %.4f loss %.4f", r, rec.val_loss, float(np.mean(rec.client_loss)))
        if on_round is not None:
            on_round(rec)
        if stop and early_stopping:
            stopped = True
            break
    result = SessionResult(records, best_values, groups, stopper.best_round, stopper.best,
                           len(records), stopped, final_prefix_cosine=last_cos)
    if test is not None:
        result.metrics = evaluate_test(strategy, best_values, groups, test)
    return result


def centralized_session(strategy: Strategy, train: Sequence[Seq], val: Sequence[Seq],
                        test: EvalSet | None, **kw) -> SessionResult:
    """Pooled-data baseline: the same machinery with a single client."""
    return train_session(strategy, [list(train)], val, test, **kw)


@dataclass
class CostReport:
    method: str
    trainable_count: int
    bytes_per_client: int
    bytes_up_per_round: int
    bytes_down_per_round: int
    rounds_to_stop: int


def account_costs(method: str, trainable_count: int, n_clients: int,
                  records: Sequence[RoundRecord]) -> CostReport:
    per = 8 * trainable_count
    return CostReport(method, trainable_count, per, n_clients * per, n_clients * per, len(records))
