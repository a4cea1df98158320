"""Acceptance suite: one PASS/FAIL line per criterion.

Desk-scale runs are shared through a session cache keyed by (config hash,
seed).  Set ``FEDCUSTOM_ACCEPT_DIR`` to keep the run directories.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES
from fedcustom.autodiff import Tensor, grad_check
from fedcustom.backbone import (BackboneConfig, KVPrefix, ParameterSet, forward, init_backbone,
                                make_batch, set_trainable)
from fedcustom.customization import make_strategy, trainable_view
from fedcustom.federation import (AggregationRule, ClientState, OptimizerConfig, local_epoch,
                                  run_round)
from fedcustom.harness import (SUITE_SEEDS, ExperimentConfig, prepare, run_experiment, summarize,
                               suite_recipes)
from fedcustom.metrics import corpus_bleu, cosine, rouge_l

pytestmark = pytest.mark.acceptance


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="session")
def root(tmp_path_factory):
    d = os.environ.get("FEDCUSTOM_ACCEPT_DIR")
    return Path(d) if d else tmp_path_factory.mktemp("acceptance")


class Runs:
    """Memoised desk-scale runs plus the wall time each one took."""

    def __init__(self, root: Path):
        self.root = root
        self.done = {}
        self.seconds = {}

    def config(self, pairs: dict, seed: int) -> ExperimentConfig:
        return ExperimentConfig.from_pairs(list({**pairs, "seed": seed}.items()))

    def run(self, pairs: dict, seed: int) -> dict:
        cfg = self.config(pairs, seed)
        key = (cfg.config_hash(), seed)
        if key not in self.done:
            t0 = time.perf_counter()
            res = run_experiment(cfg, out=str(self.root))
            self.seconds[key] = time.perf_counter() - t0
            self.done[key] = res
        return self.done[key].summary

    def row(self, pairs: dict, seeds=SUITE_SEEDS) -> dict:
        return summarize([self.run(pairs, s) for s in seeds])

    def time_of(self, pairs: dict, seeds=SUITE_SEEDS) -> float:
        return sum(self.seconds[(self.config(pairs, s).config_hash(), s)] for s in seeds)


@pytest.fixture(scope="session")
def runs(root):
    return Runs(root)


@pytest.fixture(scope="session")
def desk(root):
    """Corpus, vocabulary and pretrained backbone of the default desk config."""
    return prepare(ExperimentConfig.from_pairs([]), root / "_backbones")


# --- 1 ----------------------------------------------------------------------------------

def test_criterion_1_gradient_integrity(desk):
    cfg = BackboneConfig(vocab_size=len(desk.vocab))
    assert (cfg.n_layers, cfg.model_dim) == (2, 64)
    bb = init_backbone(cfg, np.random.default_rng(0))
    strat = make_strategy("FPT", bb, cfg, desk.vocab.eos_id, desk.vocab.pad_id)
    ps = strat.init_trainable(np.random.default_rng(1))
    set_trainable(ps, {"prefix"})
    batch = make_batch([desk.vocab.encode_example(e) for e in desk.corpus.train[:4]],
                       desk.vocab.pad_id)
    t0 = time.perf_counter()
    err = grad_check(lambda: strat.loss(ps, batch), list(ps.entries.values()), max_coords=24)
    secs = time.perf_counter() - t0
    assert not any(t.requires_grad for t in bb.entries.values())
    report(1, err < 1e-5 and secs < 60, f"max rel err {err:.2e} (< 1e-5), {secs:.1f}s (< 60s)")


# --- 2 ----------------------------------------------------------------------------------

def test_criterion_2_prefix_equivalence():
    cfg = BackboneConfig(n_layers=1, n_heads=2, model_dim=8, ff_dim=16, vocab_size=13,
                         max_seq_len=12)
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        ps = oracles.randomize(init_backbone(cfg, rng), rng)
        shape = (1, 2, 3, cfg.head_dim)
        pre = KVPrefix(Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape)), cfg)
        toks = rng.integers(0, cfg.vocab_size, size=int(rng.integers(1, 10)))
        got = forward(ps, toks, cfg, prefix=pre).data
        want = oracles.forward(ps.values(), toks, 1, 2, pre.keys.data, pre.values.data)
        worst = max(worst, float(np.max(np.abs(got - want))))
    report(2, worst < 1e-10, f"max |forward - concatenated-KV oracle| = {worst:.1e} over 20 seeds")


# --- 3 ----------------------------------------------------------------------------------

def test_criterion_3_frozen_backbone(desk):
    strat = make_strategy("FPT", desk.backbone, desk.backbone_cfg, desk.vocab.eos_id,
                          desk.vocab.pad_id)
    before = {k: v.copy() for k, v in desk.backbone.values().items()}
    init = strat.init_trainable(np.random.default_rng(0))
    names = set(init.names())
    assert names and all(n.startswith("prefix.") for n in names)
    values, groups = init.values(), dict(init.groups)
    clients = [ClientState(k, [desk.vocab.encode_example(e) for e in desk.corpus.train[k::10][:20]])
               for k in range(10)]
    uploads_ok = True
    for r in range(1, 6):
        values, _, uploads = run_round(values, groups, clients, strat, AggregationRule(),
                                       OptimizerConfig(lr=1e-2), r, seed=1)
        uploads_ok &= all(set(u) == names for u in uploads.values())
    frozen = all(before[k].tobytes() == v.tobytes() for k, v in desk.backbone.values().items())
    report(3, frozen and uploads_ok,
           f"backbone bit-identical after 5 rounds: {frozen}; uploads == prefix names: {uploads_ok}")


# --- 4 ----------------------------------------------------------------------------------

def test_criterion_4_fedavg_one_step(desk):
    strat = make_strategy("FPT", desk.backbone, desk.backbone_cfg, desk.vocab.eos_id,
                          desk.vocab.pad_id)
    init = strat.init_trainable(np.random.default_rng(0))
    values, groups = init.values(), dict(init.groups)
    # equal shards of equal-shape sequences, so every client sees the same token count
    by_shape = {}
    for e in desk.corpus.train:
        ids, sep = desk.vocab.encode_example(e)
        by_shape.setdefault((len(ids), sep), []).append((ids, sep))
    pool = max(by_shape.values(), key=len)
    n_clients = 4
    per = len(pool) // n_clients
    shards = [pool[k * per:(k + 1) * per] for k in range(n_clients)]
    opt = OptimizerConfig(kind="sgd", lr=0.05, batch_size=0)
    fed, _, _ = run_round(values, groups, [ClientState(k, s) for k, s in enumerate(shards)],
                          strat, AggregationRule(), opt, 1, seed=0)
    pooled, _ = local_epoch(strat, values, groups, [x for s in shards for x in s],
                            AggregationRule(), opt, np.random.default_rng(0))
    err = max(float(np.max(np.abs(fed[k] - pooled[k]))) for k in fed)
    moved = max(float(np.max(np.abs(fed[k] - values[k]))) for k in fed)
    report(4, err < 1e-10 and moved > 0,
           f"{n_clients} shards x {per} seqs: max |FedAvg - pooled step| = {err:.1e}")


# --- 5 ----------------------------------------------------------------------------------

FIXED_ROUNDS = {"federation.max_rounds": 8, "federation.early_stopping": False}
NONIID80 = {"partition.kind": "noniid", "partition.x": 80.0}


def _log_rows(res):
    rows = [json.loads(l) for l in (res.run_dir / "rounds.jsonl").read_text().splitlines()]
    for r in rows:
        r.pop("config_hash")
    return rows


def test_criterion_5_fedprox(runs):
    avg = {**NONIID80, **FIXED_ROUNDS}
    prox0 = {**avg, "federation.aggregation": "fedprox", "federation.prox_mu": 0.0}
    prox1 = {**avg, "federation.aggregation": "fedprox", "federation.prox_mu": 1.0}
    runs.run(avg, 1)
    runs.run(prox0, 1)
    a = runs.done[(runs.config(avg, 1).config_hash(), 1)]
    b = runs.done[(runs.config(prox0, 1).config_hash(), 1)]
    same_log = _log_rows(a) == _log_rows(b)
    same_ckpt = all(x.tobytes() == y.tobytes() for x, y in
                    zip(ParameterSet.load(a.run_dir / "best.ckpt")[0].values().values(),
                        ParameterSet.load(b.run_dir / "best.ckpt")[0].values().values()))
    drift_avg = [runs.run(avg, s)["mean_client_drift"] for s in SUITE_SEEDS]
    drift_prox = [runs.run(prox1, s)["mean_client_drift"] for s in SUITE_SEEDS]
    reduced = all(p < q for p, q in zip(drift_prox, drift_avg))
    detail = (f"mu=0 bit-identical log+ckpt: {same_log and same_ckpt}; drift fedavg "
              f"{np.round(drift_avg, 4).tolist()} vs fedprox(mu=1) {np.round(drift_prox, 4).tolist()}")
    report(5, same_log and same_ckpt and reduced, detail)


# --- 6 ----------------------------------------------------------------------------------

def test_criterion_6_table2_direction(runs):
    recipes = suite_recipes("table2")
    rows = [runs.row(r) for r in recipes]
    secs = sum(runs.time_of(r) for r in recipes)
    fpt, cpt = rows[0]["bleu_mean"], rows[1]["bleu_mean"]
    clients = [r["bleu_mean"] for r in rows[2:]]
    ok = fpt > max(clients) and cpt >= fpt and cpt - fpt <= 3.0 and secs < 1800
    report(6, ok, f"FPT {fpt:.2f} > best client {max(clients):.2f} (clients "
                  f"{min(clients):.2f}..{max(clients):.2f}); CPT {cpt:.2f}, gap {cpt - fpt:.2f} "
                  f"(0..3); suite time {secs / 60:.1f} min (< 30)")


# --- 7 ----------------------------------------------------------------------------------

def test_criterion_7_resources(runs, desk):
    counts = {m: trainable_view(m, desk.backbone, desk.backbone_cfg).count
              for m in ("FPT", "FAT", "FKD", "FFFT")}
    rows = {r["method"]: runs.row(r) for r in suite_recipes("table3")}
    bpr = {m: rows[m]["bytes_per_round"] for m in rows}
    ratio = counts["FPT"] / counts["FAT"]

    def ordered(d):
        return max(d["FPT"], d["FAT"]) < d["FKD"] < d["FFFT"] and 0.5 < d["FPT"] / d["FAT"] < 2

    stop = {m: rows[m]["rounds_to_stop_mean"] for m in rows}
    ok = ordered(counts) and ordered(bpr) and stop["FFFT"] < stop["FPT"]
    report(7, ok, f"params {counts} (FPT/FAT {ratio:.2f}); bytes/round {bpr}; "
                  f"rounds-to-stop FFFT {stop['FFFT']:.1f} < FPT {stop['FPT']:.1f}")


# --- 8 ----------------------------------------------------------------------------------

def test_criterion_8_client_count(runs):
    fpt = [r for r in suite_recipes("table4") if r["method"] == "FPT"]
    ns = [r["federation.n_clients"] for r in fpt]
    bleu = [runs.row(r)["bleu_mean"] for r in fpt]
    rises = [b - a for a, b in zip(bleu, bleu[1:]) if b > a]
    ok = len(rises) == 0 or (len(rises) == 1 and rises[0] <= 0.5)
    report(8, ok, "FPT BLEU by clients " + ", ".join(f"{n}: {b:.2f}" for n, b in zip(ns, bleu))
           + f"; inversions {[round(r, 2) for r in rises]}")


# --- 9 ----------------------------------------------------------------------------------

def test_criterion_9_noniid(runs):
    fpt = {r["partition.x"]: r for r in suite_recipes("table5") if r["method"] == "FPT"}
    rows = {x: runs.row(fpt[x]) for x in (40.0, 60.0, 80.0)}
    bleu = {x: rows[x]["bleu_mean"] for x in rows}
    cos = {x: rows[x]["prefix_cosine_mean"] for x in rows}
    ok = bleu[80.0] <= bleu[40.0] and cos[80.0] <= cos[60.0] + 0.002 and cos[60.0] <= cos[40.0] + 0.002
    report(9, ok, "BLEU " + ", ".join(f"x={x:g}: {bleu[x]:.2f}" for x in bleu)
           + "; prefix cosine " + ", ".join(f"x={x:g}: {cos[x]:.4f}" for x in cos))


# --- 10 ---------------------------------------------------------------------------------

def test_criterion_10_metrics():
    import math

    b = corpus_bleu(["the cat the cat"], ["the cat sat"])
    # c=4 > r=3, so the standard brevity penalty is 1; no trigram matches, so BLEU-4 is 0
    bleu_ok = (abs(b.precisions[0] - 2 / 4) < 1e-9 and abs(b.precisions[1] - 1 / 3) < 1e-9
               and b.brevity_penalty == 1.0 and b.bleu == 0.0
               and abs(corpus_bleu(["the cat the cat"], ["the cat sat"], max_n=2).bleu
                       - 100 * math.sqrt(2 / 4 * 1 / 3)) < 1e-9)
    p, r, beta = 3 / 4, 1.0, 1.2
    f = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
    rouge_ok = abs(rouge_l(["a b c d"], ["a c d"]) - 100 * f) < 1e-9
    cos_ok = abs(cosine([1.0, 2.0, 3.0, 4.0], [4.0, 3.0, 2.0, 1.0]) - 20 / 30) < 1e-9
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(40)]
    sents = [" ".join(rng.choice(words, size=int(rng.integers(1, 25)))) for _ in range(100)]
    self_ok = all(abs(corpus_bleu([s], [s]).bleu - 100) < 1e-9 for s in sents)
    report(10, bleu_ok and rouge_ok and cos_ok and self_ok,
           f"BLEU hand oracle {bleu_ok}, ROUGE-L hand oracle {rouge_ok}, cosine hand oracle "
           f"{cos_ok}, BLEU(h,h)=100 on 100 random sentences {self_ok}")


# --- 11 ---------------------------------------------------------------------------------

def test_criterion_11_determinism(root):
    from fedcustom.harness import run_suite

    base = ExperimentConfig.from_pairs([("federation.max_rounds", 3)])
    logs = []
    for tag, workers in (("serial", 1), ("repeat", 1), ("parallel", 4)):
        res = run_suite("table3", out=str(root / f"det-{tag}"), seeds=(1, 2),
                        overrides=[f"federation.workers={workers}"], base=base)
        assert res.status == 0
        d = root / f"det-{tag}"
        logs.append({p.relative_to(d).as_posix(): p.read_bytes()
                     for p in sorted(d.rglob("rounds.jsonl"))})
    same = logs[0] == logs[1] == logs[2]
    report(11, same and len(logs[0]) == 8,
           f"{len(logs[0])} round logs byte-identical across serial, repeated and 4-worker runs: {same}")
