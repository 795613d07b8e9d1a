"""``cdnas`` command line: synthesize data, train, run ablations, evaluate and report.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys
import typing
from importlib import metadata
from pathlib import Path
from typing import Any, Optional

import click
import numpy as np
import torch
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, create_model, model_validator

from .bilevel import BilevelConfig, BilevelTrainer, ModelConfig, load_checkpoint, train
from .graph import (DomainSpec, GraphError, Interaction, SynthConfig, Variant, build_graph, ingest_tsv,
                    make_splits, synth_generate, write_synth_metadata, write_tsv)
from .metrics import aggregate_runs, paired_t_test, rela_impr_auc, rela_impr_logloss

logger = logging.getLogger("cdnas")

OUT_ENV = "CDNAS_OUT"
DEFAULT_SEEDS = [0, 1, 2, 3, 4]
RUN_ARTIFACTS = ("config.yaml", "version.json", "records.jsonl", "report.json")


class ConfigError(Exception):
    """Bad or missing user input; maps to exit code 1."""


# ---------------------------------------------------------------------------
# config schema


def _strict_section(dc, exclude: tuple[str, ...] = ()) -> type[BaseModel]:
    """Pydantic mirror of a config dataclass that rejects unknown keys."""
    hints = typing.get_type_hints(dc)
    fields: dict[str, Any] = {}
    for f in dataclasses.fields(dc):
        if f.name in exclude:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        fields[f.name] = (hints[f.name], default)
    return create_model(f"{dc.__name__}Section", __config__=ConfigDict(extra="forbid"), **fields)


SynthSection = _strict_section(SynthConfig)
TrainingSection = _strict_section(BilevelConfig, exclude=("seed",))
ModelSection = _strict_section(ModelConfig)


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: Optional[str] = None
    synth: Optional[SynthSection] = None
    target: Optional[str] = None
    sources: Optional[list[str]] = None
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0

    @model_validator(mode="after")
    def _one_source(self):
        if self.path is None and self.synth is None:
            raise ValueError("data needs either 'path' or 'synth'")
        return self


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: DataSection
    training: TrainingSection = TrainingSection()
    model: ModelSection = ModelSection()
    variant: Variant = Variant.FULL
    seeds: list[int] = DEFAULT_SEEDS
    out: Optional[str] = None

    def bilevel(self, seed: int) -> BilevelConfig:
        return BilevelConfig(seed=seed, **self.training.model_dump())

    def model_cfg(self) -> ModelConfig:
        return ModelConfig(**self.model.model_dump())

    def synth_cfg(self) -> SynthConfig:
        if self.data.synth is None:
            raise ConfigError("config has no data.synth section")
        return SynthConfig(**self.data.synth.model_dump())

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        blob = json.dumps(self.snapshot(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:8]


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    if path is None:
        raise ConfigError("--config is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        cfg = ExperimentConfig.model_validate(raw)
        # run the dataclass checks now so bad values fail before any work starts
        cfg.bilevel(0)
        cfg.model_cfg()
        if cfg.data.synth is not None:
            cfg.synth_cfg()
    except (ValidationError, ValueError) as exc:
        raise ConfigError(f"{p}: invalid config:\n{exc}") from exc
    if not cfg.seeds:
        raise ConfigError(f"{p}: seeds must not be empty")
    return cfg


# ---------------------------------------------------------------------------
# data


def _domain_spec(cfg: ExperimentConfig, interactions: list[Interaction]) -> DomainSpec:
    d = cfg.data
    if d.target is None:
        if d.synth is not None and d.path is None:
            return cfg.synth_cfg().domain_spec
        raise ConfigError("data.target is required for file datasets")
    sources = d.sources
    if sources is None:
        sources = sorted({e.domain for e in interactions} - {d.target})
    try:
        return DomainSpec(d.target, tuple(sources))
    except GraphError as exc:
        raise ConfigError(str(exc)) from exc


def load_dataset(cfg: ExperimentConfig):
    d = cfg.data
    if d.path is not None:
        path = Path(d.path)
        if not path.is_file():
            raise ConfigError(f"dataset not found: {path}")
        try:
            interactions = ingest_tsv(path)
        except GraphError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        interactions, _ = synth_generate(cfg.synth_cfg())
    spec = _domain_spec(cfg, interactions)
    if all(e.split == "train" for e in interactions):
        interactions = make_splits(interactions, d.split_ratios, d.split_seed, target_domain=spec.target)
    try:
        return build_graph(interactions, spec)
    except GraphError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# run directories


def _output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _resolve_out(cfg: ExperimentConfig, out: str | None, kind: str) -> Path:
    if out:
        return Path(out)
    if cfg.out:
        return Path(cfg.out)
    return _output_root() / f"{kind}-{cfg.variant.value}-{cfg.digest()}"


def _version_stamp() -> dict:
    stamp = {"package": "cdnas"}
    try:
        stamp["version"] = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        stamp["version"] = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            stamp["git"] = rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    stamp["torch"] = torch.__version__
    stamp["numpy"] = np.__version__
    return stamp


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _append_jsonl(path: Path, obj) -> None:
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True) + "\n")


def _mean_mixtures(records: list[dict]) -> dict:
    """Average op weights over seeds, keyed layer -> domain -> op."""
    out: dict = {}
    for rec in records:
        for layer, doms in rec["arch_mixtures"].items():
            for dom, ops in doms.items():
                for op, w in ops.items():
                    out.setdefault(layer, {}).setdefault(dom, {}).setdefault(op, []).append(w)
    return {layer: {dom: {op: float(np.mean(ws)) for op, ws in ops.items()} for dom, ops in doms.items()}
            for layer, doms in out.items()}


def run_variant(cfg: ExperimentConfig, graph, variant: Variant, run_dir: Path, echo=click.echo) -> list[dict]:
    """Train every seed of one variant into ``run_dir``; returns the final records."""
    run_dir.mkdir(parents=True, exist_ok=True)
    snap = cfg.snapshot()
    snap["variant"] = variant.value
    (run_dir / "config.yaml").write_text(yaml.safe_dump(snap, sort_keys=True), encoding="utf-8")
    _write_json(run_dir / "version.json", _version_stamp())
    records_path = run_dir / "records.jsonl"
    records_path.unlink(missing_ok=True)
    records = []
    for seed in cfg.seeds:
        run_id = f"{variant.value}-s{seed}-{cfg.digest()}"
        seed_dir = run_dir / f"seed{seed}"
        seed_dir.mkdir(exist_ok=True)
        epochs_path = seed_dir / "epochs.jsonl"
        epochs_path.unlink(missing_ok=True)

        def log_epoch(rec, run_id=run_id, seed=seed, path=epochs_path):
            _append_jsonl(path, {"run_id": run_id, "seed": seed, "variant": variant.value, "epoch": rec["epoch"],
                                 "auc": rec["valid_auc"], "logloss": rec["valid_logloss"],
                                 "train_loss": rec["train_loss"], "gamma_domains": rec["gamma_domains"],
                                 "arch_mixtures": rec["arch_mixtures"], "seconds": rec["seconds"]})

        _, res = train(graph, None, cfg.bilevel(seed), variant, cfg.model_cfg(), out_dir=seed_dir, log_fn=log_epoch)
        record = {"run_id": run_id, "seed": seed, "variant": variant.value, "auc": res.auc,
                  "logloss": res.logloss, "gamma_domains": res.gamma_domains, "arch_mixtures": res.arch_mixtures}
        _write_json(seed_dir / "run.json", {**record, "valid_auc": res.valid_auc, "best_epoch": res.best_epoch,
                                            "epochs_run": res.epochs_run, "n_source_edges": res.n_source_edges})
        _append_jsonl(records_path, record)
        records.append(record)
        echo(f"{run_id}: test AUC {res.auc:.4f}  LogLoss {res.logloss:.4f}  "
             f"(best epoch {res.best_epoch}, {res.epochs_run} run)")
    rep = aggregate_runs(records)
    _write_json(run_dir / "report.json", {"variant": variant.value, "seeds": list(cfg.seeds), **rep.as_dict(),
                                          "arch_mixtures": _mean_mixtures(records)})
    return records


# ---------------------------------------------------------------------------
# rendering


def _fmt_summary(s: dict) -> str:
    std = s.get("std")
    return f"{s['mean']:.4f}" + (f" ± {std:.4f}" if std is not None else "")


def render_mixtures(mixtures: dict) -> str:
    lines = []
    for layer, doms in mixtures.items():
        for dom, ops in doms.items():
            cells = "  ".join(f"{op}={w:.3f}" for op, w in ops.items())
            lines.append(f"  {layer} {dom}: {cells}")
    return "\n".join(lines)


def render_run(run_dir: Path, report: dict) -> str:
    lines = [f"run {run_dir} ({report['variant']}, seeds {report['seeds']})",
             f"  AUC     {_fmt_summary(report['auc'])}",
             f"  LogLoss {_fmt_summary(report['logloss'])}",
             "architecture mixture (mean over seeds):",
             render_mixtures(report["arch_mixtures"])]
    return "\n".join(lines)


def check_run_dir(run_dir: Path) -> None:
    if not run_dir.is_dir():
        raise ConfigError(f"run directory not found: {run_dir}")
    missing = [name for name in RUN_ARTIFACTS if not (run_dir / name).is_file()]
    if missing:
        raise ConfigError(f"{run_dir} is not a complete run; missing: {', '.join(missing)}")


def _parse_seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seed expects comma-separated integers, got {text!r}") from exc


# ---------------------------------------------------------------------------
# commands


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Cross-domain CTR prediction with a bi-level graph architecture search."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


config_opt = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML experiment config.")
seed_opt = click.option("--seed", "seeds", help="Comma-separated seeds; overrides the config.")
out_opt = click.option("--out", help="Output directory.")


@cli.command()
@config_opt
@seed_opt
@out_opt
def synth(config_path, seeds, out):
    """Write a synthetic dataset, its metadata and oracle scores."""
    cfg = load_config(config_path)
    sc = cfg.synth_cfg()
    seed_list = _parse_seeds(seeds)
    if seed_list:
        sc = dataclasses.replace(sc, seed=seed_list[0])
    out_dir = Path(out) if out else (Path(cfg.out) if cfg.out else _output_root() / f"synth-{sc.seed}")
    out_dir.mkdir(parents=True, exist_ok=True)
    interactions, oracle = synth_generate(sc)
    split = make_splits(interactions, cfg.data.split_ratios, cfg.data.split_seed, target_domain=sc.domain_spec.target)
    write_tsv(out_dir / "data.tsv", split)
    write_synth_metadata(out_dir / "meta.json", sc, split_ratios=list(cfg.data.split_ratios),
                         split_seed=cfg.data.split_seed, n_interactions=len(split),
                         n_positive=int(sum(e.label for e in split)))
    with (out_dir / "oracle.tsv").open("w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\tdomain\tscore\tclean_label\tflipped\n")
        for e, s, c, f in zip(interactions, oracle.scores, oracle.clean_labels, oracle.flipped):
            fh.write(f"{e.user}\t{e.item}\t{e.domain}\t{s:.17g}\t{int(c)}\t{int(f)}\n")
    click.echo(f"wrote {len(split)} interactions to {out_dir / 'data.tsv'}")


@cli.command(name="train")
@config_opt
@seed_opt
@click.option("--variant", type=click.Choice([v.value for v in Variant]), help="Overrides the config.")
@out_opt
def train_cmd(config_path, seeds, variant, out):
    """Train one variant over the configured seeds."""
    cfg = load_config(config_path, {"seeds": _parse_seeds(seeds), "variant": variant})
    graph = load_dataset(cfg)
    run_dir = _resolve_out(cfg, out, "train")
    run_variant(cfg, graph, cfg.variant, run_dir)
    click.echo(render_run(run_dir, json.loads((run_dir / "report.json").read_text())))


@cli.command()
@config_opt
@seed_opt
@out_opt
def ablate(config_path, seeds, out):
    """Run all six variants under shared seeds and compare them with FULL."""
    cfg = load_config(config_path, {"seeds": _parse_seeds(seeds)})
    graph = load_dataset(cfg)
    root = Path(out) if out else (Path(cfg.out) if cfg.out else _output_root() / f"ablate-{cfg.digest()}")
    results = {v: run_variant(cfg, graph, v, root / v.value) for v in Variant}
    table = ablation_table(results)
    _write_json(root / "ablation.json", table)
    click.echo(render_ablation(table))


def ablation_table(results: dict) -> dict:
    full = {r["seed"]: r for r in results[Variant.FULL]}
    rows = []
    for v, recs in results.items():
        rep = aggregate_runs(recs).as_dict()
        row = {"variant": v.value, "seeds": [r["seed"] for r in recs], "auc": rep["auc"], "logloss": rep["logloss"],
               "arch_mixtures": _mean_mixtures(recs),
               "arch_mixtures_per_seed": {r["seed"]: r["arch_mixtures"] for r in recs}}
        if v is not Variant.FULL:
            shared = [r for r in recs if r["seed"] in full]
            if len(shared) >= 2:
                t, sig = paired_t_test([full[r["seed"]]["auc"] for r in shared], [r["auc"] for r in shared])
                row["t_vs_full"] = {"t": t, "significant": sig}
        rows.append(row)
    return {"rows": rows}


def render_ablation(table: dict) -> str:
    lines = [f"{'variant':<10} {'AUC':>18} {'LogLoss':>18}  FULL vs variant (t, p<0.05)"]
    for row in table["rows"]:
        t = row.get("t_vs_full")
        tcol = f"t={t['t']:.3f} {'yes' if t['significant'] else 'no'}" if t else ""
        lines.append(f"{row['variant']:<10} {_fmt_summary(row['auc']):>18} {_fmt_summary(row['logloss']):>18}  {tcol}")
    return "\n".join(lines)


@cli.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--baseline", type=click.Path(file_okay=False), help="Run directory to compute RelaImpr against.")
def report(run_dir, baseline):
    """Summarize a finished run: metrics, op mixtures and optional RelaImpr."""
    run = Path(run_dir)
    check_run_dir(run)
    rep = json.loads((run / "report.json").read_text())
    click.echo(render_run(run, rep))
    if baseline:
        base = Path(baseline)
        check_run_dir(base)
        brep = json.loads((base / "report.json").read_text())
        ra = rela_impr_auc(rep["auc"]["mean"], brep["auc"]["mean"])
        rl = rela_impr_logloss(rep["logloss"]["mean"], brep["logloss"]["mean"])
        click.echo(f"RelaImpr vs {base}: AUC {ra:+.2f}%  LogLoss {rl:+.2f}%")


@cli.command(name="eval")
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--split", type=click.Choice(["valid", "test"]), default="test", show_default=True)
def eval_cmd(run_dir, split):
    """Re-score every seed checkpoint of a run on a split."""
    run = Path(run_dir)
    check_run_dir(run)
    cfg = load_config(run / "config.yaml")
    graph = load_dataset(cfg)
    for seed in cfg.seeds:
        ckpt = run / f"seed{seed}" / "checkpoint.pt"
        if not ckpt.is_file():
            raise ConfigError(f"missing checkpoint {ckpt}")
        trainer = BilevelTrainer(graph, cfg.bilevel(seed), cfg.model_cfg(), cfg.variant)
        state, _ = load_checkpoint(ckpt)
        trainer.load_state(state)
        a, ll = trainer.evaluate(trainer.valid if split == "valid" else trainer.test)
        click.echo(json.dumps({"run_id": f"{cfg.variant.value}-s{seed}-{cfg.digest()}", "seed": seed,
                               "variant": cfg.variant.value, "split": split, "auc": a, "logloss": ll}))


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="cdnas", standalone_mode=False)
    except (ConfigError, click.ClickException) as exc:
        msg = exc.format_message() if isinstance(exc, click.ClickException) else str(exc)
        click.echo(f"error: {msg}", err=True)
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except Exception as exc:  # runtime failure; partial results stay on disk
        logger.debug("run failed", exc_info=True)
        click.echo(f"runtime failure: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
