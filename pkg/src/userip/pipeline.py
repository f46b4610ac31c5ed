"""Run configuration, artifact manifests and the pipeline stages behind the CLI.

Every stage reads its upstream artifacts from the run directory, checks them
against the upstream stage manifest, writes its own artifacts and finally a
manifest ``manifests/<stage>.json`` listing output checksums.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bank as bank_mod
from . import bayes, checkpoint, corpus, lm, quant
from . import inference as inf
from . import recommender as rec

log = logging.getLogger(__name__)

ENV_PREFIX = "UIP_"


class ConfigError(ValueError):
    pass


class UpstreamError(RuntimeError):
    def __init__(self, stage: str, detail: str):
        super().__init__(f"upstream stage '{stage}': {detail}")
        self.stage = stage


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------

@dataclass
class DataSection:
    n_users: int = 500
    n_items: int = 300
    class_counts: list = field(default_factory=lambda: [4, 3])
    rating_boost: float = 1.0
    seq_len: int = 30
    affinity_weight: float = 0.7
    n_background: int = 2500
    n_heldout: int = 200
    min_count: int = 4
    ratios: list = field(default_factory=lambda: [8, 1, 1])


@dataclass
class LMSection:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 128
    compute_dtype: str = "float32"
    lr: float = 3e-3
    batch_size: int = 32
    epochs: int = 8
    patience: int = 2
    template_rate: float = 0.5
    distractor: float = 0.3
    # content-addressed store of trained LMs, keyed by training inputs; off when null
    cache_dir: str | None = None


@dataclass
class InferSection:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    patience: int = 5
    min_delta: float = 1e-4
    divergence_factor: float = 10.0
    init_scale: float = 0.02
    widths: list | None = None


@dataclass
class QuantSection:
    sizes: list = field(default_factory=lambda: [4, 3])
    alpha: float = 1e-3
    beta: float = 1e-3
    lr: float = 1e-3
    pairs_per_user: int = 8
    reseed_noise: float = 0.01
    item_dim: int = 8
    hidden: int = 16


@dataclass
class RecSection:
    emb_dim: int = 8
    n_cross: int = 3
    mlp: list = field(default_factory=lambda: [16, 16])
    dropout: float = 0.2
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 60
    patience: int = 5
    logit_clip: float = 30.0


@dataclass
class SweepSection:
    k1: list = field(default_factory=lambda: [4, 8, 16, 32])


@dataclass
class CaseStudySection:
    n_users: int | None = None  # all users when null


@dataclass
class BayesSection:
    p_true: float = 0.8
    p_other: list = field(default_factory=lambda: [0.5])
    n_obs: list = field(default_factory=lambda: [1, 2, 5, 10, 15, 20, 26, 30, 40, 50, 75,
                                                 100, 150, 200])
    trials: int = 1000


SECTIONS = {"data": DataSection, "lm": LMSection, "infer": InferSection, "quant": QuantSection,
            "rec": RecSection, "sweep": SweepSection, "case_study": CaseStudySection,
            "bayes": BayesSection}


def _coerce(value, default, where):
    if isinstance(default, bool) or default is None:
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, (int, float, str, list)) and not isinstance(value, type(default)):
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def _build_section(cls, values: dict, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(values) - known
    if extra:
        raise ConfigError(f"unknown key(s) in '{name}': {sorted(extra)}")
    defaults = cls()
    return cls(**{k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in values.items()})


@dataclass
class RunConfig:
    seed: int = 0
    tags: list = field(default_factory=list)
    data: DataSection = field(default_factory=DataSection)
    lm: LMSection = field(default_factory=LMSection)
    infer: InferSection = field(default_factory=InferSection)
    quant: QuantSection = field(default_factory=QuantSection)
    rec: RecSection = field(default_factory=RecSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    case_study: CaseStudySection = field(default_factory=CaseStudySection)
    bayes: BayesSection = field(default_factory=BayesSection)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        extra = set(obj) - {"seed", "tags", *SECTIONS}
        if extra:
            raise ConfigError(f"unknown top-level key(s): {sorted(extra)}")
        kw = {name: _build_section(sec, obj.get(name, {}), name) for name, sec in SECTIONS.items()}
        seed = obj.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
        cfg = cls(seed=seed, tags=list(obj.get("tags", [])), **kw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        d, q = self.data, self.quant
        if len(q.sizes) != len(d.class_counts):
            raise ConfigError(f"{len(q.sizes)} codebook sizes for {len(d.class_counts)} profiles")
        if min(q.sizes) < 1 or max(q.sizes) > 65536:
            raise ConfigError("codebook sizes must lie in [1, 65536]")
        if d.n_users < 2 or d.n_items < 2:
            raise ConfigError("need at least two users and two items")
        if self.lm.compute_dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported compute_dtype {self.lm.compute_dtype!r}")
        if self.infer.widths is not None and len(self.infer.widths) != len(d.class_counts):
            raise ConfigError("one soft width per profile")

    def hash(self) -> str:
        """Stable digest of everything that affects results (cache location excluded)."""
        obj = self.to_dict()
        obj["lm"] = {k: v for k, v in obj["lm"].items() if k != "cache_dir"}
        return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def run_id(self) -> str:
        return f"{self.hash()[:8]}-s{self.seed}"

    @property
    def M(self) -> int:
        return len(self.data.class_counts)

    def template(self) -> inf.PromptTemplate:
        return inf.PromptTemplate.default(self.M, widths=tuple(self.infer.widths or ()))


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def apply_env(obj: dict, environ=None) -> dict:
    """Overlay ``UIP_SEED`` / ``UIP_<SECTION>__<KEY>`` variables (values parsed as JSON)."""
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(obj))
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        if len(path) == 1:
            out[path[0]] = _parse_env_value(raw)
        elif len(path) == 2:
            out.setdefault(path[0], {})[path[1]] = _parse_env_value(raw)
        else:
            raise ConfigError(f"cannot interpret environment override {key}")
    return out


def load_config(path=None, seed: int | None = None, environ=None) -> RunConfig:
    obj: dict = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except ValueError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    obj = apply_env(obj, environ)
    if seed is not None:
        obj["seed"] = seed
    return RunConfig.from_dict(obj)


# ----------------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------------

UPSTREAM = {
    "gen-data": [],
    "train-lm": ["gen-data"],
    "infer": ["gen-data", "train-lm"],
    "build-bank": ["infer"],
    "train-rec": ["gen-data", "build-bank"],
    "eval": ["gen-data", "train-rec"],
    "ablate": ["gen-data", "infer", "train-rec"],
    "sweep-codebook": ["gen-data", "train-lm", "build-bank", "train-rec"],
    "case-study": ["gen-data", "train-lm", "infer"],
    "verify-bayes": [],
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """A run directory: config snapshot, artifacts and per-stage manifests."""

    def __init__(self, cfg: RunConfig, out):
        self.cfg = cfg
        self.out = Path(out)

    def path(self, name: str) -> Path:
        return self.out / name

    def manifest_path(self, stage: str) -> Path:
        return self.out / "manifests" / f"{stage}.json"

    def snapshot_config(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        checkpoint.atomic_write(self.path("config.resolved.json"),
                                (json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True)
                                 + "\n").encode())

    def write_manifest(self, stage: str, outputs: list[str], extra: dict | None = None) -> dict:
        man = {"stage": stage, "seed": self.cfg.seed, "config_hash": self.cfg.hash(),
               "outputs": {name: sha256_file(self.path(name)) for name in outputs},
               "upstream": {s: self._manifest_digest(s) for s in UPSTREAM[stage]},
               **(extra or {})}
        checkpoint.atomic_write(self.manifest_path(stage),
                                (json.dumps(man, indent=2, sort_keys=True) + "\n").encode())
        return man

    def _manifest_digest(self, stage: str) -> str:
        return sha256_file(self.manifest_path(stage))

    def read_manifest(self, stage: str) -> dict:
        p = self.manifest_path(stage)
        if not p.exists():
            raise UpstreamError(stage, f"missing manifest {p}; run `userip {stage}` first")
        return json.loads(p.read_text())

    def verify(self, stage: str) -> dict:
        """Check every output recorded by ``stage`` still exists with the same digest."""
        man = self.read_manifest(stage)
        for name, digest in man["outputs"].items():
            p = self.path(name)
            if not p.exists():
                raise UpstreamError(stage, f"artifact {name} is missing")
            if sha256_file(p) != digest:
                raise UpstreamError(stage, f"artifact {name} checksum mismatch")
        return man

    def require(self, stage: str) -> None:
        for up in UPSTREAM[stage]:
            self.verify(up)

    def is_done(self, stage: str) -> bool:
        try:
            man = self.verify(stage)
        except UpstreamError:
            return False
        if man["config_hash"] != self.cfg.hash():
            return False
        return all(self.manifest_path(up).exists() and self._manifest_digest(up) == digest
                   for up, digest in man["upstream"].items())


# ----------------------------------------------------------------------------
# shared loaders
# ----------------------------------------------------------------------------

def _spec(cfg: RunConfig) -> corpus.PlantedProfileSpec:
    d = cfg.data
    return corpus.PlantedProfileSpec(class_counts=tuple(d.class_counts),
                                     affinity_weight=d.affinity_weight,
                                     rating_boost=d.rating_boost,
                                     seq_len=(d.seq_len, d.seq_len))


def _dataset(run: Run) -> corpus.Dataset:
    return corpus.load_dataset(run.path("data"))


def _lm(run: Run) -> tuple[lm.LMParams, lm.Vocab]:
    params = lm.LMParams.load(run.path("lm.ckpt"))
    return params.freeze(), lm.Vocab.load(run.path("vocab.txt"))


def _interactions(data: corpus.Dataset) -> list:
    tr = data.fold_mask("train")
    users, items, labels = data.users[tr], data.items[tr], data.labels[tr]
    order = np.argsort(users, kind="stable")
    cuts = np.searchsorted(users[order], np.arange(data.n_users + 1))
    return [(items[order[cuts[u]:cuts[u + 1]]], labels[order[cuts[u]:cuts[u + 1]]])
            for u in range(data.n_users)]


def _quant_config(cfg: RunConfig, sizes=None) -> quant.QuantConfig:
    q = cfg.quant
    return quant.QuantConfig(sizes=tuple(sizes or q.sizes), alpha=q.alpha, beta=q.beta, lr=q.lr,
                             pairs_per_user=q.pairs_per_user, reseed_noise=q.reseed_noise,
                             rec=quant.SurrogateRecConfig(item_dim=q.item_dim, hidden=q.hidden))


def _infer_config(cfg: RunConfig) -> inf.InferConfig:
    kw = {k: v for k, v in asdict(cfg.infer).items() if k != "widths"}
    return inf.InferConfig(**kw)


def _dcn_config(cfg: RunConfig) -> rec.DCNConfig:
    return rec.DCNConfig(**asdict(cfg.rec))


# ----------------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------------

def gen_data(run: Run) -> dict:
    cfg = run.cfg
    d = cfg.data
    main, bg = corpus.planted_world(_spec(cfg), d.n_users, d.n_items, cfg.seed,
                                    n_background=d.n_background + d.n_heldout,
                                    ratios=tuple(d.ratios), min_count=d.min_count)
    if run.path("data").exists():
        shutil.rmtree(run.path("data"))
    if run.path("background").exists():
        shutil.rmtree(run.path("background"))
    outs = [f"data/{p.name}" for p in corpus.save_dataset(main, run.path("data")).values()]
    if bg is not None:
        outs += [f"background/{p.name}"
                 for p in corpus.save_dataset(bg, run.path("background")).values()]
    return run.write_manifest("gen-data", outs, {"data_checksum": main.checksum(),
                                                 "n_records": len(main)})


def _lm_cache_key(cfg: RunConfig, main: corpus.Dataset, bg: corpus.Dataset | None) -> str:
    """Digest of the LM's actual inputs: interaction order and folds, never ratings."""
    h = hashlib.sha256()
    for d in (main, bg):
        if d is None:
            continue
        for a in (d.users, d.items, d.timestamps, d.folds, d.item_category):
            h.update(np.ascontiguousarray(a, dtype="<i8").tobytes())
    h.update(json.dumps({k: v for k, v in asdict(cfg.lm).items() if k != "cache_dir"},
                        sort_keys=True).encode())
    h.update(json.dumps([cfg.seed, cfg.M, cfg.infer.widths]).encode())
    return h.hexdigest()[:24]


def train_lm_stage(run: Run) -> dict:
    cfg = run.cfg
    run.require("train-lm")
    main = _dataset(run)
    bg = corpus.load_dataset(run.path("background")) if run.path("background").exists() else None
    vocab = lm.Vocab.build(main.n_items)
    cached = None
    if cfg.lm.cache_dir:
        cached = Path(cfg.lm.cache_dir) / f"lm-{_lm_cache_key(cfg, main, bg)}.ckpt"
    if cached is not None and cached.exists():
        log.info("train-lm: reusing cached LM %s", cached)
        shutil.copyfile(cached, run.path("lm.ckpt"))
        extra = {"cached": True}
    else:
        c = cfg.lm
        lcfg = lm.LMConfig(vocab_size=len(vocab), d=c.d, n_layers=c.n_layers, n_heads=c.n_heads,
                           context_len=c.context_len, compute_dtype=c.compute_dtype)
        held = background = None
        if bg is not None:
            n_bg = cfg.data.n_background
            background = corpus.take_users(bg, np.arange(n_bg))
            held = corpus.take_users(bg, np.arange(n_bg, n_bg + cfg.data.n_heldout))
            if len(held) == 0:
                held = None
        docs = inf.ProfileDocuments(cfg.template(), vocab, main.item_category, c.template_rate,
                                    c.distractor) if main.item_category is not None else None
        params, _, tlog = lm.train_lm(main, lcfg, epochs=c.epochs, seed=cfg.seed, vocab=vocab,
                                      lr=c.lr, batch_size=c.batch_size, heldout=held,
                                      background=background, patience=c.patience,
                                      batch_loss=docs)
        params.save(run.path("lm.ckpt"), {"seed": cfg.seed, "best_epoch": tlog.best_epoch})
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(run.path("lm.ckpt"), cached)
        extra = {"cached": False, "best_epoch": tlog.best_epoch,
                 "heldout_curve": tlog.heldout_curve, "train_losses": tlog.losses}
    vocab.save(run.path("vocab.txt"))
    params, _ = _lm(run)
    extra["lm_checksum"] = params.checksum()
    return run.write_manifest("train-lm", ["lm.ckpt", "vocab.txt"], extra)


def _joint_inference(cfg: RunConfig, main, params, vocab, sizes, seed: int,
                     init_path=None, theta_path=None):
    template = cfg.template()
    behaviors = inf.user_behaviors(main)
    jq = quant.JointQuantizer(_quant_config(cfg, sizes), template.widths, params.cfg.d,
                              main.n_items, _interactions(main), seed)
    init = inf.SoftProfileTable.init(len(behaviors), template, params, seed,
                                     cfg.infer.init_scale)
    if init_path is not None:
        init.save(init_path, {"stage": "before", "lm_checksum": params.checksum()})
    res = inf.infer_profiles(behaviors, params, vocab, template, _infer_config(cfg), seed=seed,
                             joint=jq, init=inf.SoftProfileTable(init.data.copy(), init.widths,
                                                                 seed),
                             checkpoint_path=theta_path)
    return res, jq


def infer_stage(run: Run) -> dict:
    cfg = run.cfg
    run.require("infer")
    main = _dataset(run)
    params, vocab = _lm(run)
    res, jq = _joint_inference(cfg, main, params, vocab, cfg.quant.sizes, cfg.seed,
                               run.path("theta_init.ckpt"), run.path("theta.ckpt"))
    jq.book.save(run.path("codebook.ckpt"), {"seed": cfg.seed,
                                              "lm_checksum": res.lm_checksum})
    return run.write_manifest("infer", ["theta_init.ckpt", "theta.ckpt", "codebook.ckpt"],
                              {"lm_checksum": res.lm_checksum, "epochs_run": res.epochs_run,
                               "initial_loss": res.initial_loss, "losses": res.losses,
                               "quant_errors": jq.errors, "reseeded": jq.reseeded,
                               "assignment_drift": jq.assignment_drift(res.table)})


def build_bank_stage(run: Run) -> dict:
    cfg = run.cfg
    run.require("build-bank")
    table = inf.SoftProfileTable.load(run.path("theta.ckpt"))
    book = quant.Codebook.load(run.path("codebook.ckpt"))
    assignment = quant.assign_all([table.profile(m) for m in range(table.M)], book,
                                  table.user_ids)
    crc = bank_mod.write_bank(assignment, run.path("bank.uipb"), {
        "created_unix": 0,  # fixed so reruns are byte-identical
        "seed": cfg.seed, "config_hash": cfg.hash(),
        "sources": {"theta.ckpt": sha256_file(run.path("theta.ckpt")),
                    "codebook.ckpt": sha256_file(run.path("codebook.ckpt"))}})
    return run.write_manifest("build-bank", ["bank.uipb"],
                              {"crc32": crc, "dead_codes": assignment.dead,
                               "usage": [u.tolist() for u in book.usage]})


def _variant_data(main, fold, variant: str, bank=None, profiles=None) -> rec.CTRData:
    if variant == "id":
        return rec.examples_from(main, fold)
    if variant == "userip":
        return rec.examples_from(main, fold, bank=bank)
    if variant == "userip_novq":
        return rec.examples_from(main, fold, profiles=profiles)
    raise ValueError(f"unknown variant {variant!r}")


def _fit_variant(cfg: RunConfig, main, variant: str, bank=None, profiles=None,
                 ckpt=None) -> tuple[rec.DCNParams, rec.RecLog]:
    sizes = bank.sizes if variant == "userip" else ()
    dense = [p.shape[1] for p in profiles] if variant == "userip_novq" else ()
    params = rec.DCNParams(_dcn_config(cfg), main.n_users, main.n_items, sizes, dense, cfg.seed)
    train = _variant_data(main, "train", variant, bank, profiles)
    valid = _variant_data(main, "valid", variant, bank, profiles)
    return rec.train_rec(train, valid, params, cfg.seed, ckpt)


def _check_bank_source(run: Run, bank: bank_mod.FeatureBank) -> None:
    for name, digest in bank.header.get("sources", {}).items():
        p = run.path(name)
        if p.exists() and sha256_file(p) != digest:
            raise UpstreamError("build-bank", f"bank was built from a different {name}")


def train_rec_stage(run: Run) -> dict:
    cfg = run.cfg
    run.require("train-rec")
    main = _dataset(run)
    fb = bank_mod.read_bank(run.path("bank.uipb"))
    _check_bank_source(run, fb)
    extra = {}
    for variant in ("id", "userip"):
        _, rlog = _fit_variant(cfg, main, variant, fb, ckpt=run.path(f"rec_{variant}.ckpt"))
        extra[variant] = {"best_epoch": rlog.best_epoch, "best_valid_auc": rlog.best_auc}
    return run.write_manifest("train-rec", ["rec_id.ckpt", "rec_userip.ckpt"], extra)


def _metric_rows(cfg, main, variant, params, bank=None, profiles=None, folds=("valid", "test")):
    rows = []
    for fold in folds:
        m = rec.evaluate(params, _variant_data(main, fold, variant, bank, profiles))
        rows.append({"run_id": cfg.run_id, "variant": variant, "fold": fold, **m,
                     "seed": cfg.seed, "config_hash": cfg.hash()})
    return rows


def eval_stage(run: Run) -> dict:
    cfg = run.cfg
    run.require("eval")
    main = _dataset(run)
    fb = bank_mod.read_bank(run.path("bank.uipb"))
    rows = []
    for variant in ("id", "userip"):
        params = rec.DCNParams.load(run.path(f"rec_{variant}.ckpt"))
        rows += _metric_rows(cfg, main, variant, params, fb)
    rec.write_csv(run.path("metrics.csv"), rec.METRIC_COLUMNS, rows)
    impr = rec.improvement_rows(rows, "id", "test")
    rec.write_csv(run.path("improvement.csv"), rec.IMPROVEMENT_COLUMNS, impr)
    return run.write_manifest("eval", ["metrics.csv", "improvement.csv"])


def ablate_stage(run: Run) -> dict:
    cfg = run.cfg
    run.require("ablate")
    main = _dataset(run)
    fb = bank_mod.read_bank(run.path("bank.uipb"))
    table = inf.SoftProfileTable.load(run.path("theta.ckpt"))
    profiles = [table.profile(m) for m in range(table.M)]
    with_vq = rec.DCNParams.load(run.path("rec_userip.ckpt"))
    without, _ = _fit_variant(cfg, main, "userip_novq", profiles=profiles,
                              ckpt=run.path("rec_userip_novq.ckpt"))
    checksum = run.read_manifest("gen-data")["data_checksum"]
    rows = (_metric_rows(cfg, main, "userip", with_vq, fb, folds=("test",))
            + _metric_rows(cfg, main, "userip_novq", without, profiles=profiles,
                           folds=("test",)))
    for r in rows:
        r["data_checksum"] = checksum
    rec.write_csv(run.path("ablation.csv"), rec.METRIC_COLUMNS + ["data_checksum"], rows)
    return run.write_manifest("ablate", ["ablation.csv", "rec_userip_novq.ckpt"])


SWEEP_COLUMNS = ["run_id", "K1", "K2", "auc", "logloss", "purity", "ari", "dead_codes", "seed",
                 "config_hash"]


def _sweep_row(cfg: RunConfig, main, fb: bank_mod.FeatureBank, params_rec) -> dict:
    m = rec.evaluate(params_rec, _variant_data(main, "test", "userip", fb))
    codes = fb.codes[:, 0]
    row = {"run_id": cfg.run_id, "K1": fb.sizes[0], "K2": fb.sizes[1] if fb.M > 1 else "",
           **m, "purity": float("nan"), "ari": float("nan"),
           "dead_codes": int(np.sum(np.bincount(codes, minlength=fb.sizes[0]) == 0)),
           "seed": cfg.seed, "config_hash": cfg.hash()}
    if main.truth is not None:
        truth = main.truth.user_classes[fb.user_ids, 0]
        row["purity"] = quant.purity(codes, truth)
        row["ari"] = quant.adjusted_rand_index(codes, truth)
    return row


def sweep_point(cfg: RunConfig, main, params, vocab, k1: int) -> dict:
    """Joint inference with the first codebook resized, then the bank-fed DCN on test."""
    sizes = [k1, *cfg.quant.sizes[1:]]
    res, jq = _joint_inference(cfg, main, params, vocab, sizes, cfg.seed)
    assignment = quant.assign_all([res.table.profile(m) for m in range(res.table.M)], jq.book,
                                  res.table.user_ids)
    fb = bank_mod.FeatureBank({"M": len(sizes), "K": sizes}, assignment.user_ids.copy(),
                              assignment.codes.copy(), "")
    params_rec, _ = _fit_variant(cfg, main, "userip", fb)
    return _sweep_row(cfg, main, fb, params_rec)


def sweep_stage(run: Run) -> dict:
    cfg = run.cfg
    run.require("sweep-codebook")
    main = _dataset(run)
    params, vocab = _lm(run)
    rows = []
    for k1 in cfg.sweep.k1:
        if k1 == cfg.quant.sizes[0]:
            # the main run already is this sweep point
            fb = bank_mod.read_bank(run.path("bank.uipb"))
            row = _sweep_row(cfg, main, fb, rec.DCNParams.load(run.path("rec_userip.ckpt")))
        else:
            row = sweep_point(cfg, main, params, vocab, int(k1))
        log.info("sweep K1=%s auc %.4f", k1, row["auc"])
        rows.append(row)
    rec.write_csv(run.path("sweep_codebook.csv"), SWEEP_COLUMNS, rows)
    return run.write_manifest("sweep-codebook", ["sweep_codebook.csv"])


CASE_COLUMNS = ["run_id", "user", "profile_index", "before", "after", "increased", "seed",
                "config_hash"]


def case_study_stage(run: Run) -> dict:
    cfg = run.cfg
    run.require("case-study")
    main = _dataset(run)
    params, vocab = _lm(run)
    template = cfg.template()
    behaviors = inf.user_behaviors(main)
    tables = {"before": inf.SoftProfileTable.load(run.path("theta_init.ckpt")),
              "after": inf.SoftProfileTable.load(run.path("theta.ckpt"))}
    n = cfg.case_study.n_users or main.n_users
    users = list(range(min(n, main.n_users)))
    rows = inf.export_attention(users, tables, params, vocab, template, behaviors)
    inf.write_attention_csv(rows, run.path("attention.csv"),
                            {"seed": cfg.seed, "config_hash": cfg.hash()})
    summary = []
    for u in users:
        for m in range(template.M):
            b = inf.target_attention(rows, u, "before", m)
            a = inf.target_attention(rows, u, "after", m)
            summary.append({"run_id": cfg.run_id, "user": u, "profile_index": m, "before": b,
                            "after": a, "increased": int(a > b), "seed": cfg.seed,
                            "config_hash": cfg.hash()})
    rec.write_csv(run.path("case_study.csv"), CASE_COLUMNS, summary)
    frac = float(np.mean([r["increased"] for r in summary])) if summary else float("nan")
    return run.write_manifest("case-study", ["attention.csv", "case_study.csv"],
                              {"fraction_increased": frac})


def verify_bayes_stage(run: Run) -> dict:
    cfg = run.cfg
    b = cfg.bayes
    model = bayes.ConceptModel.bernoulli(b.p_true, b.p_other)
    report = bayes.predictor_agreement(model, b.n_obs, b.trials, cfg.seed)
    report.write_csv(run.path("concentration.csv"), {"seed": cfg.seed,
                                                     "config_hash": cfg.hash()})
    return run.write_manifest("verify-bayes", ["concentration.csv"])


STAGES = {
    "gen-data": gen_data,
    "train-lm": train_lm_stage,
    "infer": infer_stage,
    "build-bank": build_bank_stage,
    "train-rec": train_rec_stage,
    "eval": eval_stage,
    "ablate": ablate_stage,
    "sweep-codebook": sweep_stage,
    "case-study": case_study_stage,
    "verify-bayes": verify_bayes_stage,
}

PIPELINE = ["gen-data", "train-lm", "infer", "build-bank", "train-rec", "eval"]


def run_stage(run: Run, stage: str) -> dict:
    run.snapshot_config()
    log.info("stage %s -> %s", stage, run.out)
    return STAGES[stage](run)


def ensure(run: Run, stage: str) -> dict:
    """Run ``stage`` (and its upstream chain) unless a valid manifest for this config exists."""
    for up in UPSTREAM[stage]:
        ensure(run, up)
    if run.is_done(stage):
        return run.read_manifest(stage)
    return run_stage(run, stage)
