"""End-to-end orchestration: synthesize, pretrain, embed, evaluate, project.

Every command is manifest-logged and fully determined by (config, master
seed): module seeds are stable hashes of (master_seed, purpose, cell), so
any grid cell can be reproduced in isolation. Downstream evaluation
replaces the raw age and gender columns with the pretrained embedding
columns ``gdp_0..gdp_{k-1}`` (the baseline keeps the raw columns), fits the
fixed boosted-tree configuration, and reports bootstrap AUROC/ECE with
pairwise significance tests plus demographic gain shares.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import gbdt, nn
from .cci import compute_cci, default_cci_table, load_cci_table
from .data import (TabularDataset, aggregate_median, impute_iterative,
                   load_tabular_csv, load_visits_csv, save_tabular_csv,
                   save_visits_csv)
from .encoders import Encoder, EncoderConfig
from .errors import ConfigError, DataError
from .manifest import ManifestEntry, stable_seed
from .metrics import bootstrap_eval, t_test
from .sequencing import (EncodedVisits, frame_sequences, order_ns, order_seq,
                         split_by_patient)
from .syngen import CohortSpec, gen_downstream, gen_pretrain_cohort, profile_spec
from .tsne import TsneConfig, tsne

CELL_IDS = ["ns-trad", "ns-pe", "ns-txt", "seq-trad", "seq-pe", "seq-txt"]
PROFILES = ["pneumonia_like", "osteoporosis_like", "thyroid_like"]
RESULTS_VERSION = 1


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class SyngenSettings:
    pretrain: CohortSpec = field(default_factory=CohortSpec)
    profiles: list[str] = field(default_factory=lambda: list(PROFILES))
    overrides: dict = field(default_factory=dict)  # per-profile field overrides


@dataclass
class PretrainSettings:
    cells: list[str] = field(default_factory=lambda: list(CELL_IDS))
    hidden_dim: int = 32
    embed_dim: int = 8
    d_model: int = 32
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    split_ratio: float = 0.8
    # cohort: pooled age-sorted frames (matches the downstream framing the
    # evaluation reproduces); patient keeps each record leak-free.
    frame_scope: str = "cohort"
    frame_len: int = 120
    visits_csv: str | None = None       # default: <out>/data/pretrain.csv
    cci_table: str | None = None        # default: bundled table


@dataclass
class DownstreamSettings:
    datasets: list[str] = field(default_factory=list)  # default: syngen outputs
    frame_scope: str = "cohort"         # paper-style pooled frames; flagged
    bootstrap_reps: int = 50
    split_ratio: float = 0.8
    ece_bins: int = 10
    impute_rounds: int = 10
    n_estimators: int = 50
    learning_rate: float = 0.1
    max_leaves: int = 31
    min_samples_leaf: int = 20


@dataclass
class EmbedderSettings:
    mode: str = "fallback"              # remote | fallback
    url: str = "http://localhost:8787"
    fallback_dim: int = 16
    allow_fallback: bool = True
    timeout: float = 5.0


@dataclass
class TsneSettings:
    perplexity: float = 5.0
    iterations: int = 1000
    max_points: int = 300


@dataclass
class PipelineConfig:
    master_seed: int = 20250101
    syngen: SyngenSettings = field(default_factory=SyngenSettings)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    downstream: DownstreamSettings = field(default_factory=DownstreamSettings)
    embedder: EmbedderSettings = field(default_factory=EmbedderSettings)
    tsne: TsneSettings = field(default_factory=TsneSettings)

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)


def _fill_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {path}.{key}")
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    known = {"master_seed", "format_version", "syngen", "pretrain", "downstream",
             "embedder", "tsne"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    cfg = PipelineConfig()
    if "master_seed" in raw:
        cfg.master_seed = int(raw["master_seed"])
    if "syngen" in raw:
        sg = raw["syngen"]
        if not isinstance(sg, dict):
            raise ConfigError("syngen section must be a mapping")
        settings = SyngenSettings()
        for key, value in sg.items():
            if key == "pretrain":
                settings.pretrain = _fill_dataclass(CohortSpec, value, "syngen.pretrain")
            elif key == "profiles":
                settings.profiles = list(value)
            elif key == "overrides":
                settings.overrides = dict(value)
            else:
                raise ConfigError(f"unknown config key syngen.{key}")
        cfg.syngen = settings
    for section, cls in (("pretrain", PretrainSettings), ("downstream", DownstreamSettings),
                         ("embedder", EmbedderSettings), ("tsne", TsneSettings)):
        if section in raw:
            setattr(cfg, section, _fill_dataclass(cls, raw[section], section))
    return cfg


def parse_cells(spec: str | None, available: list[str] | None = None) -> list[str]:
    if spec is None:
        return list(available or CELL_IDS)
    cells = [c.strip() for c in spec.split(",") if c.strip()]
    for c in cells:
        if c not in CELL_IDS and c != "baseline":
            raise ConfigError(f"unknown grid cell {c!r}; valid: {', '.join(CELL_IDS)}")
    return cells


def split_cell(cell: str) -> tuple[str, str]:
    ordering, encoding = cell.split("-", 1)
    return ("NS" if ordering == "ns" else "Seq"), encoding


# ---------------------------------------------------------------------------
# Directory layout


def data_dir(out: Path) -> Path:
    return out / "data"


def models_dir(out: Path) -> Path:
    return out / "models"


def reports_dir(out: Path) -> Path:
    return out / "reports"


# ---------------------------------------------------------------------------
# syngen


def run_syngen(cfg: PipelineConfig, out: Path) -> dict:
    dd = data_dir(out)
    dd.mkdir(parents=True, exist_ok=True)
    entry = ManifestEntry("syngen", cfg.snapshot(), cfg.master_seed,
                          {"pretrain": cfg.syngen.pretrain.seed}, {}, [])
    cohort_spec = dataclasses.replace(
        cfg.syngen.pretrain, seed=stable_seed(cfg.master_seed, "syngen", "pretrain"))
    records, pre_stats = gen_pretrain_cohort(cohort_spec)
    pretrain_path = dd / "pretrain.csv"
    save_visits_csv(records, pretrain_path)
    entry.record_output(pretrain_path)

    stats = {"pretrain": pre_stats.as_dict()}
    for profile in cfg.syngen.profiles:
        overrides = cfg.syngen.overrides.get(profile, {})
        spec = profile_spec(profile, seed=stable_seed(cfg.master_seed, "syngen", profile),
                            **overrides)
        dataset, ds_stats = gen_downstream(spec)
        path = dd / f"{profile}.csv"
        save_tabular_csv(dataset, path)
        entry.record_output(path)
        stats[profile] = ds_stats.as_dict()

    stats_path = dd / "stats.json"
    stats_path.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    entry.record_output(stats_path)
    entry.finish(out)
    return stats


# ---------------------------------------------------------------------------
# pretraining


def _make_encoder(encoding: str, cfg: PipelineConfig) -> Encoder:
    enc_cfg = EncoderConfig(
        kind=encoding,
        d_model=cfg.pretrain.d_model,
        embedder=cfg.embedder.mode,
        fallback_dim=cfg.embedder.fallback_dim,
        remote_url=cfg.embedder.url,
        remote_timeout=cfg.embedder.timeout,
        allow_fallback=cfg.embedder.allow_fallback,
    )
    return Encoder(enc_cfg)


def _encode_visits(encoder: Encoder, ages: np.ndarray, genders: np.ndarray,
                   targets: np.ndarray, patient_ids: list[str]) -> EncodedVisits:
    # Dedup (age, gender) pairs: encoders are pure, and the text route in
    # particular should hash/POST each distinct rendering once.
    pairs = np.stack([np.floor(ages), genders], axis=1)
    uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
    encoded_uniq = encoder.encode_rows(uniq[:, 0], uniq[:, 1].astype(int))
    return EncodedVisits(encoded_uniq[inverse], targets, ages, patient_ids)


def run_pretrain(cfg: PipelineConfig, out: Path, cells: list[str] | None = None) -> dict:
    cells = [c for c in (cells or cfg.pretrain.cells) if c != "baseline"]
    visits_path = Path(cfg.pretrain.visits_csv or data_dir(out) / "pretrain.csv")
    if not visits_path.exists():
        raise DataError(
            f"pretraining visits file not found: {visits_path} (run `demrep syngen` first "
            "or point pretrain.visits_csv at an existing file)")
    table = load_cci_table(cfg.pretrain.cci_table) if cfg.pretrain.cci_table else default_cci_table()

    load = load_visits_csv(visits_path)
    if not load.records:
        raise DataError(f"{visits_path}: no usable visit rows")
    ages = np.array([r.age for r in load.records], dtype=float)
    genders = np.array([r.gender for r in load.records], dtype=int)
    targets = np.array([compute_cci(list(r.dx_codes), table) for r in load.records], dtype=float)
    pids = [r.patient_id for r in load.records]

    split = split_by_patient(pids, cfg.pretrain.split_ratio,
                             stable_seed(cfg.master_seed, "pretrain-split"))
    train_rows = [i for i, p in enumerate(pids) if p in split.train_patient_ids]
    test_rows = [i for i, p in enumerate(pids) if p in split.test_patient_ids]

    entry = ManifestEntry(
        "pretrain", cfg.snapshot(), cfg.master_seed,
        {"split": split.seed,
         **{f"init/{c}": stable_seed(cfg.master_seed, "init", c) for c in cells}},
        {"frame_scope_pretrain": cfg.pretrain.frame_scope,
         "embedder_mode": cfg.embedder.mode},
        [visits_path])
    entry.note(f"visits loaded: {len(load.records)}, rejected: {load.n_rejected}")
    overlap = len(split.train_patient_ids & split.test_patient_ids)
    entry.note(f"patient split: {len(split.train_patient_ids)} train / "
               f"{len(split.test_patient_ids)} test, overlap {overlap}")
    if overlap:
        raise DataError("patient split produced train/test overlap")

    md = models_dir(out)
    md.mkdir(parents=True, exist_ok=True)
    held_out: dict[str, float] = {}
    by_encoding: dict[str, EncodedVisits] = {}
    for cell in cells:
        ordering, encoding = split_cell(cell)
        if encoding not in by_encoding:
            encoder = _make_encoder(encoding, cfg)
            by_encoding[encoding] = _encode_visits(encoder, ages, genders, targets, pids)
            if encoder.embedder is not None and encoder.embedder.downgrades:
                entry.entry["flags"]["embedder_downgraded"] = True
                for msg in encoder.embedder.downgrades:
                    entry.note(f"embedder downgrade: {msg}")
            if encoder.embedder is not None:
                entry.entry["flags"]["embedder_mode_used"] = encoder.embedder.mode_used()
        visits = by_encoding[encoding]
        model = nn.init_model(ordering, encoding, visits.vectors.shape[1],
                              cfg.pretrain.hidden_dim, cfg.pretrain.embed_dim,
                              stable_seed(cfg.master_seed, "init", cell))
        train_cfg = nn.TrainConfig(
            learning_rate=cfg.pretrain.learning_rate, epochs=cfg.pretrain.epochs,
            batch_size=cfg.pretrain.batch_size, clip_norm=cfg.pretrain.clip_norm,
            seed=stable_seed(cfg.master_seed, "train", cell))
        train_visits = visits.take(train_rows)
        test_visits = visits.take(test_rows)
        if ordering == "NS":
            perm = order_ns(list(range(train_visits.n)), stable_seed(cfg.master_seed, "order", cell))
            shuffled = train_visits.take(perm)
            nn.train(model, shuffled.vectors, shuffled.targets, train_cfg)
            mse = nn.masked_mse_loss(model, test_visits.vectors, test_visits.targets)
        else:
            train_sorted = train_visits.take(
                order_seq(list(range(train_visits.n)), age_of=lambda i: train_visits.ages[i]))
            frames = frame_sequences(train_sorted, cfg.pretrain.frame_len,
                                     cfg.pretrain.frame_scope)
            nn.train(model, frames, config=train_cfg)
            test_sorted = test_visits.take(
                order_seq(list(range(test_visits.n)), age_of=lambda i: test_visits.ages[i]))
            test_frames = frame_sequences(test_sorted, cfg.pretrain.frame_len,
                                          cfg.pretrain.frame_scope)
            steps = np.stack([f.steps for f in test_frames])
            mask = np.stack([f.valid_mask for f in test_frames])
            frame_targets = np.stack([f.targets for f in test_frames])
            preds = nn._seq_forward(model, steps, mask)
            mse = float((((preds - frame_targets * mask)) ** 2).sum() / mask.sum())
        held_out[cell] = mse
        entry.note(f"{cell}: held-out pretraining MSE {mse:.6f}")
        path = md / f"{cell}.model.txt"
        nn.save_model(model, path)
        entry.record_output(path)
    entry.finish(out)
    return held_out


# ---------------------------------------------------------------------------
# downstream embedding + evaluation


def _load_models(out: Path, cells: list[str]) -> dict[str, nn.GdpModel]:
    models = {}
    for cell in cells:
        if cell == "baseline":
            continue
        path = models_dir(out) / f"{cell}.model.txt"
        if not path.exists():
            raise ConfigError(f"no model for cell {cell!r}: {path} missing (run `demrep pretrain`)")
        models[cell] = nn.load_model(path)
    return models


def _prepare_dataset(path: Path, cfg: PipelineConfig, notes: list[str]) -> TabularDataset:
    ds = load_tabular_csv(path)
    if len(set(ds.patient_ids)) < ds.n_rows:
        ds = aggregate_median(ds)
        notes.append(f"aggregated multi-row patients to {ds.n_rows} rows")
    if ds.has_missing():
        ds = impute_iterative(ds, rounds=cfg.downstream.impute_rounds,
                              seed=stable_seed(cfg.master_seed, "impute", path.stem))
        notes.append("imputed missing cells (bagged-tree round robin)")
    return ds


def embed_dataset(model: nn.GdpModel, ds: TabularDataset, cfg: PipelineConfig) -> np.ndarray:
    """Embedding matrix (n_rows, embed_dim) for a downstream dataset."""
    ages = ds.column("age")
    genders = ds.column("gender").astype(int)
    enc_cfg = EncoderConfig(kind=model.encoder_kind, d_model=cfg.pretrain.d_model,
                            embedder=cfg.embedder.mode, fallback_dim=cfg.embedder.fallback_dim,
                            remote_url=cfg.embedder.url, remote_timeout=cfg.embedder.timeout,
                            allow_fallback=cfg.embedder.allow_fallback)
    encoder = Encoder(enc_cfg)
    visits = _encode_visits(encoder, ages, genders, np.zeros(ds.n_rows), list(ds.patient_ids))
    if visits.vectors.shape[1] != model.input_dim:
        raise ConfigError(
            f"encoder dim {visits.vectors.shape[1]} does not match model input dim "
            f"{model.input_dim}; check d_model/fallback_dim against the pretrained model")
    if model.ordering == "NS":
        return nn.extract_embedding(model, visits.vectors)
    # Frame row_indices address the age-ordered view; map back through the
    # sort permutation so each dataset row receives its own step's embedding.
    order_idx = order_seq(list(range(visits.n)), age_of=lambda i: visits.ages[i])
    ordered = visits.take(order_idx)
    frames = frame_sequences(ordered, cfg.pretrain.frame_len, cfg.downstream.frame_scope)
    per_step = nn.step_embeddings(model, frames)
    out = np.zeros((ds.n_rows, model.embed_dim))
    for f_idx, frame in enumerate(frames):
        for s in range(frame.steps.shape[0]):
            if frame.valid_mask[s]:
                out[order_idx[frame.row_indices[s]]] = per_step[f_idx, s]
    return out


def _cell_features(cell: str, ds: TabularDataset,
                   embeddings: np.ndarray | None) -> tuple[np.ndarray, list[str], list[str]]:
    """Feature matrix, names, and the demographic feature subset for a cell."""
    age_idx = ds.feature_names.index("age")
    gender_idx = ds.feature_names.index("gender")
    other_idx = [i for i in range(len(ds.feature_names)) if i not in (age_idx, gender_idx)]
    other_names = [ds.feature_names[i] for i in other_idx]
    if cell == "baseline":
        return ds.rows, list(ds.feature_names), ["age", "gender"]
    gdp_names = [f"gdp_{k}" for k in range(embeddings.shape[1])]
    matrix = np.hstack([embeddings, ds.rows[:, other_idx]])
    return matrix, gdp_names + other_names, gdp_names


def evaluate_dataset(name: str, ds: TabularDataset, cells: list[str],
                     models: dict[str, nn.GdpModel], cfg: PipelineConfig,
                     manifest_hash: str, notes: list[str]) -> dict:
    split = split_by_patient(ds.patient_ids, cfg.downstream.split_ratio,
                             stable_seed(cfg.master_seed, "downstream-split", name))
    train_mask = np.array([p in split.train_patient_ids for p in ds.patient_ids])
    test_mask = ~train_mask

    boost_cfg_base = dict(n_estimators=cfg.downstream.n_estimators,
                          learning_rate=cfg.downstream.learning_rate,
                          max_leaves=cfg.downstream.max_leaves,
                          min_samples_leaf=cfg.downstream.min_samples_leaf)
    result = {
        "format_version": RESULTS_VERSION,
        "dataset": name,
        "manifest_hash": manifest_hash,
        "flags": {"frame_scope_downstream": cfg.downstream.frame_scope,
                  "embedder_mode": cfg.embedder.mode},
        "n_rows": ds.n_rows,
        "n_train": int(train_mask.sum()),
        "n_test": int(test_mask.sum()),
        "notes": notes,
        "cells": {},
        "tests": [],
    }

    replicates: dict[tuple[str, str], np.ndarray] = {}
    for cell in cells:
        embeddings = None
        if cell != "baseline":
            embeddings = embed_dataset(models[cell], ds, cfg)
        matrix, names, demo_subset = _cell_features(cell, ds, embeddings)
        model = gbdt.fit(matrix[train_mask], ds.labels[train_mask],
                         gbdt.BoostConfig(**boost_cfg_base,
                                          seed=stable_seed(cfg.master_seed, "gbdt", name, cell)),
                         feature_names=names)
        probs = gbdt.predict_proba(model, matrix[test_mask])
        labels = ds.labels[test_mask]
        cell_out = {"demographic_features": demo_subset}
        for metric in ("auroc", "ece"):
            kwargs = {"bins": cfg.downstream.ece_bins} if metric == "ece" else None
            ev = bootstrap_eval(metric, probs, labels, reps=cfg.downstream.bootstrap_reps,
                                seed=stable_seed(cfg.master_seed, "bootstrap", name, cell, metric),
                                metric_kwargs=kwargs)
            replicates[(cell, metric)] = ev.replicates
            cell_out[metric] = {"mean": ev.mean, "ci_low": ev.ci_low, "ci_high": ev.ci_high,
                                "replicates": [float(v) for v in ev.replicates]}
        try:
            cell_out["demographic_share_pct"] = gbdt.gain_share(model.ledger, demo_subset)
        except Exception:
            cell_out["demographic_share_pct"] = None
        cell_out["gains"] = {k: float(v) for k, v in sorted(model.ledger.gains.items())}
        if model.warnings:
            cell_out["warnings"] = model.warnings
        result["cells"][cell] = cell_out

    def add_test(metric: str, a: str, b: str) -> None:
        if (a, metric) not in replicates or (b, metric) not in replicates:
            return
        tr = t_test(replicates[(a, metric)], replicates[(b, metric)])
        result["tests"].append({"metric": metric, "a": a, "b": b,
                                "t": tr.t, "p": tr.p, "significant": tr.significant})

    encodings = [e for e in ENCODING_ORDER
                 if e in {c.split("-", 1)[1] for c in cells if c != "baseline"}]
    for metric in ("auroc", "ece"):
        for enc in encodings:
            add_test(metric, "baseline", f"ns-{enc}")
            add_test(metric, "baseline", f"seq-{enc}")
            add_test(metric, f"ns-{enc}", f"seq-{enc}")
    return result


def format_p(p: float) -> str:
    if p < 0.001:
        return "<0.001*"
    return f"{p:.3f}" + ("*" if p < 0.05 else "")


ENCODING_ORDER = ["trad", "pe", "txt"]


def render_report(result: dict) -> str:
    """Aligned plain-text table in the rows x encodings layout."""
    present = {c.split("-", 1)[1] for c in result["cells"] if c != "baseline"}
    encodings = [e for e in ENCODING_ORDER if e in present]
    tests = {(t["metric"], t["a"], t["b"]): t["p"] for t in result["tests"]}
    lines = [f"dataset: {result['dataset']}",
             f"rows: {result['n_rows']} (train {result['n_train']} / test {result['n_test']})",
             f"frame scope (downstream): {result['flags']['frame_scope_downstream']}",
             f"embedder mode: {result['flags']['embedder_mode']}",
             f"manifest: {result['manifest_hash'][:16]}",
             "p^a: vs baseline; p^b: NS vs Seq; * p < 0.05"]
    col = 24

    def fmt_cell(cell: str, metric: str) -> str:
        entry = result["cells"].get(cell)
        if entry is None:
            return "-".ljust(col)
        m = entry[metric]
        return f"{m['mean']:.3f} [{m['ci_low']:.3f}, {m['ci_high']:.3f}]".ljust(col)

    for metric in ("auroc", "ece"):
        lines.append("")
        lines.append(metric.upper())
        header = "         " + "".join(f"{enc:<{col}}p^a      p^b      " for enc in encodings)
        lines.append(header.rstrip())
        base = "baseline " + fmt_cell("baseline", metric)
        lines.append(base.rstrip())
        for row_name, prefix in (("NS", "ns"), ("Seq", "seq")):
            parts = [f"{row_name:<9}"]
            for enc in encodings:
                cell = f"{prefix}-{enc}"
                parts.append(fmt_cell(cell, metric))
                p_a = tests.get((metric, "baseline", cell))
                parts.append((format_p(p_a) if p_a is not None else "-").ljust(9))
                if prefix == "seq":
                    p_b = tests.get((metric, f"ns-{enc}", cell))
                    parts.append((format_p(p_b) if p_b is not None else "-").ljust(9))
                else:
                    parts.append("-".ljust(9))
            lines.append("".join(parts).rstrip())

    lines.append("")
    lines.append("demographic gain share (%)")
    for cell in ["baseline"] + [c for c in CELL_IDS if c in result["cells"]]:
        entry = result["cells"].get(cell)
        if entry is None:
            continue
        share = entry.get("demographic_share_pct")
        share_s = f"{share:.2f}" if share is not None else "undefined"
        lines.append(f"  {cell:<10} {share_s:>8}  ({'+'.join(entry['demographic_features'][:2])}"
                     f"{'...' if len(entry['demographic_features']) > 2 else ''})")
    return "\n".join(lines) + "\n"


def run_downstream(cfg: PipelineConfig, out: Path, cells: list[str] | None = None) -> list[dict]:
    all_cells = ["baseline"] + [c for c in (cells or cfg.pretrain.cells) if c != "baseline"]
    dataset_paths = [Path(p) for p in cfg.downstream.datasets] or [
        data_dir(out) / f"{profile}.csv" for profile in cfg.syngen.profiles]
    for p in dataset_paths:
        if not p.exists():
            raise DataError(f"downstream dataset not found: {p} (run `demrep syngen` or fix downstream.datasets)")
    models = _load_models(out, all_cells)

    entry = ManifestEntry(
        "downstream", cfg.snapshot(), cfg.master_seed,
        {f"split/{p.stem}": stable_seed(cfg.master_seed, "downstream-split", p.stem)
         for p in dataset_paths},
        {"frame_scope_downstream": cfg.downstream.frame_scope,
         "embedder_mode": cfg.embedder.mode,
         "bootstrap_reps": cfg.downstream.bootstrap_reps},
        list(dataset_paths) + [models_dir(out) / f"{c}.model.txt" for c in all_cells if c != "baseline"])

    rd = reports_dir(out)
    rd.mkdir(parents=True, exist_ok=True)
    results = []
    for path in dataset_paths:
        notes: list[str] = []
        ds = _prepare_dataset(path, cfg, notes)
        result = evaluate_dataset(path.stem, ds, all_cells, models, cfg, entry.hash, notes)
        results.append(result)
        json_path = rd / f"{path.stem}.results.json"
        json_path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        entry.record_output(json_path)
        report_path = rd / f"{path.stem}.report.txt"
        report_path.write_text(render_report(result), encoding="utf-8")
        entry.record_output(report_path)
        metrics_path = rd / f"{path.stem}.metrics.csv"
        _write_metrics_csv(result, metrics_path)
        entry.record_output(metrics_path)
        ledger_dir = rd / "ledgers"
        ledger_dir.mkdir(exist_ok=True)
        for cell, cell_result in result["cells"].items():
            ledger_path = ledger_dir / f"{path.stem}.{cell}.ledger.csv"
            ledger_path.write_text(gbdt.ledger_csv_text(cell_result["gains"]),
                                   encoding="utf-8")
            entry.record_output(ledger_path)
    _write_gainshare_csv(results, rd / "gain_shares.csv")
    entry.record_output(rd / "gain_shares.csv")
    entry.finish(out)
    return results


def _write_metrics_csv(result: dict, path: Path) -> None:
    tests = {(t["metric"], t["a"], t["b"]): t["p"] for t in result["tests"]}
    lines = ["dataset,cell,metric,mean,ci_low,ci_high,p_vs_baseline,manifest"]
    for cell in ["baseline"] + CELL_IDS:
        entry = result["cells"].get(cell)
        if entry is None:
            continue
        for metric in ("auroc", "ece"):
            m = entry[metric]
            p = tests.get((metric, "baseline", cell))
            lines.append(f"{result['dataset']},{cell},{metric},"
                         f"{m['mean']!r},{m['ci_low']!r},{m['ci_high']!r},"
                         f"{'' if p is None else repr(p)},{result['manifest_hash']}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_gainshare_csv(results: list[dict], path: Path) -> None:
    lines = ["dataset,cell,demographic_share_pct,manifest"]
    for result in results:
        for cell in ["baseline"] + CELL_IDS:
            entry = result["cells"].get(cell)
            if entry is None:
                continue
            share = entry.get("demographic_share_pct")
            lines.append(f"{result['dataset']},{cell},"
                         f"{'' if share is None else format(share, '.6f')},"
                         f"{result['manifest_hash']}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_report(cfg: PipelineConfig, out: Path) -> str:
    rd = reports_dir(out)
    json_paths = sorted(rd.glob("*.results.json"))
    if not json_paths:
        raise DataError(f"no results in {rd}; run `demrep downstream` first")
    results = [json.loads(p.read_text(encoding="utf-8")) for p in json_paths]
    combined = "\n".join(render_report(r) for r in results)
    combined_path = rd / "combined_report.txt"
    combined_path.write_text(combined, encoding="utf-8")
    _write_gainshare_csv(results, rd / "gain_shares.csv")
    return combined


# ---------------------------------------------------------------------------
# embeddings export + t-SNE projections


def run_embed(cfg: PipelineConfig, out: Path, cells: list[str] | None = None) -> list[Path]:
    cells = [c for c in (cells or cfg.pretrain.cells) if c != "baseline"]
    dataset_paths = [Path(p) for p in cfg.downstream.datasets] or [
        data_dir(out) / f"{profile}.csv" for profile in cfg.syngen.profiles]
    for p in dataset_paths:
        if not p.exists():
            raise DataError(f"dataset not found: {p}")
    models = _load_models(out, cells)
    entry = ManifestEntry("embed", cfg.snapshot(), cfg.master_seed, {},
                          {"frame_scope_downstream": cfg.downstream.frame_scope},
                          list(dataset_paths))
    ed = out / "embeddings"
    ed.mkdir(parents=True, exist_ok=True)
    written = []
    for path in dataset_paths:
        notes: list[str] = []
        ds = _prepare_dataset(path, cfg, notes)
        for cell in cells:
            emb = embed_dataset(models[cell], ds, cfg)
            out_path = ed / f"{path.stem}.{cell}.embeddings.csv"
            header = "patient_id," + ",".join(f"gdp_{k}" for k in range(emb.shape[1]))
            lines = [header]
            for i in range(ds.n_rows):
                lines.append(ds.patient_ids[i] + "," + ",".join(repr(float(v)) for v in emb[i]))
            out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            entry.record_output(out_path)
            written.append(out_path)
    entry.finish(out)
    return written


def run_tsne(cfg: PipelineConfig, out: Path, cells: list[str] | None = None) -> list[Path]:
    cells = [c for c in (cells or cfg.pretrain.cells) if c != "baseline"]
    dataset_paths = [Path(p) for p in cfg.downstream.datasets] or [
        data_dir(out) / f"{profile}.csv" for profile in cfg.syngen.profiles]
    for p in dataset_paths:
        if not p.exists():
            raise DataError(f"dataset not found: {p}")
    models = _load_models(out, cells)
    entry = ManifestEntry("tsne", cfg.snapshot(), cfg.master_seed, {},
                          {"original_panel": "min-max scaled raw age/gender columns"},
                          list(dataset_paths))
    td = out / "tsne"
    td.mkdir(parents=True, exist_ok=True)
    written = []
    for path in dataset_paths:
        notes: list[str] = []
        ds = _prepare_dataset(path, cfg, notes)
        panels: list[tuple[str, str, np.ndarray]] = []
        raw = np.stack([ds.column("age"), ds.column("gender")], axis=1)
        span = raw.max(axis=0) - raw.min(axis=0)
        span[span == 0] = 1.0
        panels.append(("original", "-", (raw - raw.min(axis=0)) / span))
        for cell in cells:
            ordering, encoding = split_cell(cell)
            panels.append((ordering.lower(), encoding, embed_dataset(models[cell], ds, cfg)))
        for approach, encoding, points in panels:
            tag = "original" if approach == "original" else f"{approach}-{encoding}"
            rows_idx = np.arange(ds.n_rows)
            if ds.n_rows > cfg.tsne.max_points:
                rng = np.random.default_rng(stable_seed(cfg.master_seed, "tsne-sample", path.stem, tag))
                rows_idx = np.sort(rng.choice(ds.n_rows, size=cfg.tsne.max_points, replace=False))
            n_sub = rows_idx.size
            if not cfg.tsne.perplexity < (n_sub - 1) / 3:
                raise ConfigError(
                    f"perplexity {cfg.tsne.perplexity} infeasible for {n_sub} points; "
                    f"use perplexity < {(n_sub - 1) / 3:.1f}")
            tsne_cfg = TsneConfig(perplexity=cfg.tsne.perplexity, iterations=cfg.tsne.iterations,
                                  seed=stable_seed(cfg.master_seed, "tsne", path.stem, tag))
            layout = tsne(points[rows_idx], tsne_cfg)
            out_path = td / f"{path.stem}.{tag}.tsne.csv"
            lines = ["row_id,label,dim1,dim2,approach,encoding"]
            for local_i, row in enumerate(rows_idx):
                lines.append(f"{ds.patient_ids[row]},{int(ds.labels[row])},"
                             f"{float(layout.coords[local_i, 0])!r},"
                             f"{float(layout.coords[local_i, 1])!r},"
                             f"{approach},{encoding}")
            out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            entry.record_output(out_path)
            written.append(out_path)
    entry.finish(out)
    return written
