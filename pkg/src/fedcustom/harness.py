"""Experiment configuration, run orchestration, suites, and CSV emission.

Config files are flat ``key = value`` lines with dotted section names; ``#``
starts a comment.  Every key has a typed default in :data:`SCHEMA`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import datagen
from .backbone import BackboneConfig, ParameterSet, pretrain
from .customization import (DistillLossWeights, PrefixConfig, StudentConfig, make_strategy)
from .errors import ConfigurationError, FedCustomError, ValidationError
from .federation import (AggregationRule, EvalSet, OptimizerConfig, account_costs,
                         train_session)

log = logging.getLogger(__name__)

OUT_ENV = "FEDCUSTOM_OUT"
METHODS = ("FPT", "FFFT", "FAT", "FKD", "CPT", "client-only")

SCHEMA: dict[str, tuple[type, Any]] = {
    "seed": (int, 1),
    "method": (str, "FPT"),
    "output_dir": (str, ""),
    "backbone.n_layers": (int, 2),
    "backbone.n_heads": (int, 4),
    "backbone.model_dim": (int, 64),
    "backbone.ff_dim": (int, 256),
    "backbone.max_seq_len": (int, 96),
    "corpus.seed": (int, 0),
    "corpus.size": (int, 1000),
    "corpus.preference": (float, 0.85),
    "corpus.bank_seed": (int, 7),
    "corpus.extra_test": (int, 900),
    "pretrain.corpus_seed": (int, 100),
    "pretrain.corpus_size": (int, 3000),
    "pretrain.epochs": (int, 10),
    "pretrain.lr": (float, 2e-3),
    "pretrain.batch_size": (int, 16),
    "pretrain.seed": (int, 0),
    "federation.n_clients": (int, 10),
    "federation.aggregation": (str, "fedavg"),
    "federation.prox_mu": (float, 0.0),
    "federation.max_rounds": (int, 60),
    "federation.patience": (int, 3),
    "federation.workers": (int, 1),
    "federation.early_stopping": (bool, True),
    "partition.kind": (str, "iid"),
    "partition.attribute": (str, "food"),
    "partition.x": (float, 80.0),
    "client_only.client_id": (int, 0),
    "optim.kind": (str, "adam"),
    "optim.lr": (float, 1e-3),
    "optim.batch_size": (int, 4),
    "prefix.length": (int, 10),
    "prefix.embed_dim": (int, 32),
    "prefix.hidden": (int, 32),
    "adapter.bottleneck": (int, 16),
    "student.n_layers": (int, 1),
    "student.n_heads": (int, 2),
    "student.model_dim": (int, 32),
    "student.ff_dim": (int, 128),
    "distill.w_task": (float, 1.0),
    "distill.w_soft": (float, 1.0),
    "distill.w_hidden": (float, 1.0),
    "distill.temperature": (float, 2.0),
    "eval.every": (int, 0),
    "log.wall_clock": (bool, False),
}

# keys that never change results; excluded from the config hash
_UNHASHED = {"seed", "output_dir", "federation.workers", "log.wall_clock"}


def _parse_value(key: str, raw: str):
    typ = SCHEMA[key][0]
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    return typ(raw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class ExperimentConfig:
    values: dict
    explicit: frozenset = frozenset()

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_text(cls, text: str, overrides: Iterable[str] = ()) -> "ExperimentConfig":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError({f"line {lineno}": "expected 'key = value'"})
            k, v = line.split("=", 1)
            pairs.append((k.strip(), v))
        for ov in overrides:
            if "=" not in ov:
                raise ValidationError({ov: "override must look like key=value"})
            k, v = ov.split("=", 1)
            pairs.append((k.strip(), v))
        return cls.from_pairs(pairs)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, Any]]) -> "ExperimentConfig":
        values = {k: d for k, (_, d) in SCHEMA.items()}
        explicit = set()
        problems = {}
        for k, v in pairs:
            if k not in SCHEMA:
                problems[k] = "unknown key"
                continue
            try:
                values[k] = _parse_value(k, v) if isinstance(v, str) else SCHEMA[k][0](v)
            except (TypeError, ValueError) as exc:
                problems[k] = str(exc)
                continue
            explicit.add(k)
        cfg = cls(values, frozenset(explicit))
        problems.update({k: m for k, m in cfg.problems().items() if k not in problems})
        if problems:
            raise ValidationError(problems)
        return cfg

    @classmethod
    def load(cls, path, overrides: Iterable[str] = ()) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), overrides)

    def with_overrides(self, **kv) -> "ExperimentConfig":
        pairs = [(k, self.values[k]) for k in sorted(self.explicit)]
        pairs += [(k.replace("__", "."), v) for k, v in kv.items()]
        return ExperimentConfig.from_pairs(pairs)

    def override(self, pairs: dict) -> "ExperimentConfig":
        base = [(k, self.values[k]) for k in sorted(self.explicit)]
        return ExperimentConfig.from_pairs(base + list(pairs.items()))

    def validate(self) -> None:
        p = self.problems()
        if p:
            raise ValidationError(p)

    def problems(self) -> dict:
        """Offending key -> message for every rule the config breaks."""
        v = self.values
        p = {}
        if v["method"] not in METHODS:
            p["method"] = f"must be one of {METHODS}"
        if v["method"] == "CPT" and "federation.n_clients" in self.explicit:
            p["federation.n_clients"] = "CPT trains on pooled data; n_clients must not be set"
        if v["federation.n_clients"] < 1:
            p["federation.n_clients"] = "must be >= 1"
        if v["federation.aggregation"] not in ("fedavg", "fedprox"):
            p["federation.aggregation"] = "must be fedavg or fedprox"
        if v["federation.prox_mu"] < 0:
            p["federation.prox_mu"] = "must be >= 0"
        if v["federation.max_rounds"] < 1:
            p["federation.max_rounds"] = "must be >= 1"
        if v["federation.patience"] < 1:
            p["federation.patience"] = "must be >= 1"
        if v["partition.kind"] not in ("iid", "noniid"):
            p["partition.kind"] = "must be iid or noniid"
        if not 0 <= v["partition.x"] <= 100:
            p["partition.x"] = "must lie in [0, 100]"
        if v["backbone.model_dim"] % v["backbone.n_heads"]:
            p["backbone.model_dim"] = "must be divisible by backbone.n_heads"
        if v["student.model_dim"] % v["student.n_heads"]:
            p["student.model_dim"] = "must be divisible by student.n_heads"
        if v["method"] == "client-only" and not 0 <= v["client_only.client_id"] < v["federation.n_clients"]:
            p["client_only.client_id"] = "must index one of the clients"
        if v["optim.kind"] not in ("adam", "sgd"):
            p["optim.kind"] = "must be adam or sgd"
        if v["optim.lr"] <= 0:
            p["optim.lr"] = "must be positive"
        if v["prefix.length"] < 1:
            p["prefix.length"] = "must be >= 1"
        if v["corpus.size"] < 100:
            p["corpus.size"] = "must be >= 100"
        if v["corpus.extra_test"] < 0:
            p["corpus.extra_test"] = "must be >= 0"
        for k in ("distill.w_task", "distill.w_soft", "distill.w_hidden"):
            if v[k] < 0:
                p[k] = "must be >= 0"
        if v["distill.temperature"] <= 0:
            p["distill.temperature"] = "must be positive"
        return p

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in sorted(self.values))

    def config_hash(self) -> str:
        body = "".join(f"{k}={_fmt(self.values[k])};" for k in sorted(self.values)
                       if k not in _UNHASHED)
        return hashlib.sha256(body.encode()).hexdigest()[:12]

    # typed views
    def backbone_config(self, vocab_size: int) -> BackboneConfig:
        v = self.values
        return BackboneConfig(v["backbone.n_layers"], v["backbone.n_heads"], v["backbone.model_dim"],
                              v["backbone.ff_dim"], vocab_size, v["backbone.max_seq_len"],
                              v["adapter.bottleneck"] if v["method"] == "FAT" else None)

    def prefix_config(self) -> PrefixConfig:
        v = self.values
        return PrefixConfig(v["prefix.length"], v["prefix.embed_dim"], v["prefix.hidden"])

    def student_config(self) -> StudentConfig:
        v = self.values
        return StudentConfig(v["student.n_layers"], v["student.n_heads"], v["student.model_dim"],
                             v["student.ff_dim"])

    def distill_weights(self) -> DistillLossWeights:
        v = self.values
        return DistillLossWeights(v["distill.w_task"], v["distill.w_soft"], v["distill.w_hidden"],
                                  v["distill.temperature"])

    def rule(self) -> AggregationRule:
        return AggregationRule(self.values["federation.aggregation"], self.values["federation.prox_mu"])

    def optimizer(self) -> OptimizerConfig:
        v = self.values
        return OptimizerConfig(v["optim.kind"], v["optim.lr"], v["optim.batch_size"])

    def setting(self) -> str:
        v = self.values
        if v["method"] == "CPT":
            return "pooled"
        part = "iid" if v["partition.kind"] == "iid" else f"noniid-{v['partition.x']:g}"
        tag = f"{part}-{v['federation.n_clients']}"
        if v["method"] == "client-only":
            tag += f"-client{v['client_only.client_id'] + 1}"
        if v["federation.aggregation"] == "fedprox":
            tag += f"-prox{v['federation.prox_mu']:g}"
        return tag


def output_root(cli_out: str | None = None, cfg: ExperimentConfig | None = None) -> Path:
    if cli_out:
        return Path(cli_out)
    if cfg is not None and cfg["output_dir"]:
        return Path(cfg["output_dir"])
    return Path(os.environ.get(OUT_ENV, "runs"))


# --- corpus and backbone --------------------------------------------------------

@dataclass
class Workspace:
    corpus: datagen.Corpus
    vocab: datagen.Vocabulary
    backbone_cfg: BackboneConfig
    backbone: ParameterSet
    corpus_hash: str


_BACKBONES: dict[str, ParameterSet] = {}


def build_corpus(cfg: ExperimentConfig) -> datagen.Corpus:
    v = cfg.values
    return datagen.generate_corpus(v["corpus.seed"], v["corpus.size"], "task",
                                   v["corpus.preference"], v["corpus.bank_seed"],
                                   extra_test=v["corpus.extra_test"])


def backbone_key(cfg: ExperimentConfig, vocab: datagen.Vocabulary) -> str:
    keys = sorted(k for k in cfg.values if k.startswith(("backbone.", "pretrain.")))
    body = ";".join(f"{k}={_fmt(cfg[k])}" for k in keys)
    body += f";vocab={vocab.digest()};bank={cfg['corpus.bank_seed']}"
    return hashlib.sha256(body.encode()).hexdigest()[:12]


def pretrained_backbone(cfg: ExperimentConfig, vocab: datagen.Vocabulary, bcfg: BackboneConfig,
                        cache_dir: Path | None) -> ParameterSet:
    """Frozen backbone trained on a general-style corpus; cached by content key."""
    from dataclasses import replace

    key = backbone_key(cfg, vocab)
    if key in _BACKBONES:
        return _BACKBONES[key]
    path = cache_dir / f"backbone-{key}.ckpt" if cache_dir is not None else None
    if path is not None and path.exists():
        params, _ = ParameterSet.load(path)
    else:
        v = cfg.values
        pc = datagen.generate_corpus(v["pretrain.corpus_seed"], v["pretrain.corpus_size"],
                                     "general", bank_seed=v["corpus.bank_seed"])
        seqs = [vocab.encode_example(e) for e in pc.all()]
        log.info("pretraining backbone %s on %d sequences", key, len(seqs))
        params = pretrain(replace(bcfg, adapter_bottleneck=None), seqs, vocab.pad_id,
                          v["pretrain.epochs"], v["pretrain.lr"], v["pretrain.batch_size"],
                          v["pretrain.seed"], log=log.info)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            params.save(tmp, {"key": key})
            os.replace(tmp, path)
    _BACKBONES[key] = params
    return params


def prepare(cfg: ExperimentConfig, cache_dir: Path | None) -> Workspace:
    corpus = build_corpus(cfg)
    vocab = datagen.Vocabulary.build(corpus.train)
    bcfg = cfg.backbone_config(len(vocab))
    longest = max(len(vocab.encode_example(e)[0]) for e in corpus.all())
    if longest > bcfg.max_seq_len:
        raise ConfigurationError(f"longest example has {longest} tokens > max_seq_len")
    bb = pretrained_backbone(cfg, vocab, bcfg, cache_dir)
    return Workspace(corpus, vocab, bcfg, bb, corpus.digest())


def make_shards(cfg: ExperimentConfig, train) -> list[datagen.Shard]:
    v = cfg.values
    if v["partition.kind"] == "iid":
        return datagen.partition_iid(train, v["federation.n_clients"], v["seed"],
                                     v["partition.attribute"])
    return datagen.partition_noniid(train, v["federation.n_clients"], v["partition.attribute"],
                                    v["partition.x"], v["seed"])


# --- single run ------------------------------------------------------------------

@dataclass
class RunResult:
    status: int
    run_dir: Path
    summary: dict
    session: Any = None


def run_dir_for(cfg: ExperimentConfig, root: Path) -> Path:
    return root / f"{cfg['method']}-{cfg.config_hash()}" / f"seed{cfg['seed']}"


def run_experiment(cfg: ExperimentConfig | str | os.PathLike, out: str | None = None,
                   overrides: Sequence[str] = ()) -> RunResult:
    """Run one configuration; writes config, round log, best checkpoint, summary."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.load(cfg, overrides)
    elif overrides:
        cfg = cfg.override(dict(o.split("=", 1) for o in overrides))
    root = output_root(out, cfg)
    ws = prepare(cfg, root / "_backbones")
    rdir = run_dir_for(cfg, root)
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    v = cfg.values
    method = v["method"]
    base_method = "FPT" if method in ("CPT", "client-only") else method
    strat = make_strategy(base_method, ws.backbone, ws.backbone_cfg, ws.vocab.eos_id,
                          ws.vocab.pad_id, cfg.prefix_config(), v["adapter.bottleneck"],
                          cfg.student_config(), cfg.distill_weights())
    enc = lambda exs: [ws.vocab.encode_example(e) for e in exs]
    if method == "CPT":
        shards = [enc(ws.corpus.train)]
    else:
        parts = make_shards(cfg, ws.corpus.train)
        shards = [enc(s.examples) for s in parts]
        if method == "client-only":
            shards = [shards[v["client_only.client_id"]]]
    val = enc(ws.corpus.val)
    test = EvalSet([ws.vocab.encode_mr(e.mr) for e in ws.corpus.test],
                   [e.text for e in ws.corpus.test], ws.vocab.detokenize)
    chash = cfg.config_hash()
    wall = v["log.wall_clock"]
    log_path = rdir / "rounds.jsonl"
    fh = open(log_path, "w", encoding="utf-8")

    def on_round(rec):
        row = rec.to_log(wall)
        row["config_hash"] = chash
        row["seed"] = v["seed"]
        fh.write(json.dumps(row) + "\n")
        fh.flush()

    summary = {"method": method, "setting": cfg.setting(), "config_hash": chash, "seed": v["seed"],
               "corpus_hash": ws.corpus_hash}
    status = 0
    session = None
    try:
        session = train_session(strat, shards, val, test, cfg.rule(), cfg.optimizer(),
                                v["federation.max_rounds"], v["federation.patience"], v["seed"],
                                v["federation.workers"], v["eval.every"], on_round,
                                early_stopping=v["federation.early_stopping"])
    except FedCustomError as exc:
        fh.write(json.dumps({"error": str(exc), "config_hash": chash, "seed": v["seed"]}) + "\n")
        summary.update(status="failed", error=str(exc))
        status = 1
    finally:
        fh.close()
    if session is not None:
        ParameterSet.from_values(session.best_values, session.groups).save(
            rdir / "best.ckpt", {"config_hash": chash, "seed": v["seed"], "method": method,
                                 "best_round": session.best_round})
        n_clients = len(shards)
        trainable = sum(a.size for a in session.best_values.values())
        cost = account_costs(method, trainable, n_clients, session.records)
        summary.update(
            status="ok", bleu=session.metrics.bleu, rouge_l=session.metrics.rouge_l,
            trainable_params=cost.trainable_count, bytes_per_client=cost.bytes_per_client,
            bytes_per_round=cost.bytes_up_per_round, rounds_to_stop=cost.rounds_to_stop,
            best_round=session.best_round, best_val_loss=session.best_val,
            prefix_cosine=session.final_prefix_cosine,
            mean_client_drift=float(np.mean([r.client_drift for r in session.records])),
        )
    (rdir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return RunResult(status, rdir, summary, session)


def generate_corpus_files(cfg: ExperimentConfig, out: Path) -> list[Path]:
    corpus = build_corpus(cfg)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for part in ("train", "val", "test"):
        p = out / f"{part}.tsv"
        datagen.write_corpus_file(p, getattr(corpus, part))
        paths.append(p)
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    return paths


# --- suites ------------------------------------------------------------------------

SUITE_SEEDS = (1, 2, 3)
# (learning rate, local batch size) per method, picked by validation loss
METHOD_OPTIM = {"FPT": (1e-2, 4), "client-only": (1e-2, 4), "CPT": (1e-2, 16),
                "FAT": (1e-2, 16), "FFFT": (1e-3, 16), "FKD": (1e-2, 16)}


def _recipe(method: str, **extra) -> dict:
    lr, bs = METHOD_OPTIM[method]
    d = {"method": method, "optim.lr": lr, "optim.batch_size": bs}
    d.update(extra)
    return d


def suite_recipes(name: str) -> list[dict]:
    if name == "table2":
        rows = [_recipe("FPT"), _recipe("CPT")]
        rows += [_recipe("client-only", **{"client_only.client_id": k}) for k in range(10)]
        return rows
    if name == "table3":
        return [_recipe(m) for m in ("FPT", "FFFT", "FAT", "FKD")]
    if name == "table4":
        return [_recipe(m, **{"federation.n_clients": n})
                for n in (10, 20, 30, 50) for m in ("FPT", "FAT", "FKD")]
    if name == "table5":
        return [_recipe(m, **{"partition.kind": "noniid", "partition.x": x})
                for x in (80, 60, 40) for m in ("FPT", "FAT", "FKD")]
    raise ConfigurationError(f"unknown suite {name!r}")


SUMMARY_FIELDS = ("method", "setting", "n_seeds", "bleu_mean", "bleu_std", "rouge_l_mean",
                  "rouge_l_std", "trainable_params", "bytes_per_round", "rounds_to_stop_mean",
                  "prefix_cosine_mean", "config_hash", "corpus_hash", "seeds", "status")


def _mean_std(xs):
    xs = [x for x in xs if x is not None]
    if not xs:
        return None, None
    m = float(np.mean(xs))
    s = float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0
    return m, s


def summarize(rows: Sequence[dict]) -> dict:
    ok = [r for r in rows if r.get("status") == "ok"]
    first = rows[0]
    out = {"method": first["method"], "setting": first["setting"], "n_seeds": len(ok),
           "config_hash": first["config_hash"], "corpus_hash": first["corpus_hash"],
           "seeds": " ".join(str(r["seed"]) for r in rows),
           "status": "ok" if len(ok) == len(rows) else "FAILED"}
    out["bleu_mean"], out["bleu_std"] = _mean_std([r.get("bleu") for r in ok])
    out["rouge_l_mean"], out["rouge_l_std"] = _mean_std([r.get("rouge_l") for r in ok])
    out["rounds_to_stop_mean"], _ = _mean_std([r.get("rounds_to_stop") for r in ok])
    out["prefix_cosine_mean"], _ = _mean_std([r.get("prefix_cosine") for r in ok]
                                             if first["method"] in ("FPT",) else [])
    out["trainable_params"] = ok[0]["trainable_params"] if ok else None
    out["bytes_per_round"] = ok[0]["bytes_per_round"] if ok else None
    return out


def write_summary_csv(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in SUMMARY_FIELDS})


@dataclass
class SuiteResult:
    status: int
    table: list
    csv_path: Path
    runs: dict = field(default_factory=dict)


def run_suite(name: str, out: str | None = None, seeds: Sequence[int] = SUITE_SEEDS,
              overrides: Sequence[str] = (), base: ExperimentConfig | None = None) -> SuiteResult:
    """Run every recipe of a named suite over ``seeds`` and write ``<name>.csv``."""
    root = output_root(out, base)
    base_pairs = dict(o.split("=", 1) for o in overrides)
    if base is not None:
        base_pairs = {**{k: base.values[k] for k in base.explicit}, **base_pairs}
    table = []
    runs = {}
    failed = False
    corpus_hashes = set()
    for recipe in suite_recipes(name):
        pairs = {**base_pairs, **recipe}
        if recipe["method"] == "CPT":
            pairs.pop("federation.n_clients", None)
        rows = []
        for seed in seeds:
            cfg = ExperimentConfig.from_pairs(list({**pairs, "seed": seed}.items()))
            res = run_experiment(cfg, out=str(root))
            rows.append(res.summary)
            runs[(cfg.config_hash(), seed)] = res
            if res.status != 0:
                failed = True
            corpus_hashes.add(res.summary["corpus_hash"])
            if len(corpus_hashes) > 1:
                raise ConfigurationError("suite mixes runs built on different corpora")
        row = summarize(rows)
        if row["status"] != "ok":
            failed = True
        table.append(row)
    csv_path = root / f"{name}.csv"
    write_summary_csv(csv_path, table)
    return SuiteResult(1 if failed else 0, table, csv_path, runs)


# --- plot data -----------------------------------------------------------------------

PLOT_FIELDS = ("series", "config_hash", "seed", "method", "round", "val_loss", "bleu")


def emit_plotdata(log_dir, out_csv=None) -> str:
    """(round, val_loss, bleu) rows for every round log under ``log_dir``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_FIELDS)
    for path in sorted(Path(log_dir).rglob("rounds.jsonl")):
        method = path.parent.parent.name.split("-")[0]
        for line in path.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            if "round" not in rec:
                continue
            series = f"{rec['config_hash']}-s{rec['seed']}"
            w.writerow([series, rec["config_hash"], rec["seed"], method, rec["round"],
                        rec["val_loss"], "" if rec["bleu"] is None else rec["bleu"]])
    text = buf.getvalue()
    if out_csv is not None:
        Path(out_csv).write_text(text, encoding="utf-8")
    return text
