"""Command-line entry point: ``faderfmri <command> --config run.json``.

Artifacts land under ``<output_dir>/<experiment>/``::

    data/          generated dataset (series/*.vts, phenotype.csv, manifest.json)
    checkpoints/   <encoder>.fdck and <encoder>_history.csv
    latents/       <encoder>.npz
    classifiers/   <model>.gru and <model>_predictions.csv
    reports/       <model>_<mode>.json and .csv
    probe/         <encoder>.json
    embed/         <encoder>.svg, .csv and .json
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from .classifier import end_to_end_convgru, predict, train_classifier
from .config import ENCODER_MODELS, EVAL_MODELS, LATENT_SOURCE, RunConfig
from .core import load_phenotype_table, make_kfold_splits, make_loso_splits
from .embed import embed_2d, render_scatter, site_silhouette
from .errors import DomainError, FaderError, MissingArtifactError
from .evaluation import cross_validate, site_probe
from .fader import encode_records, load_fader, save_fader, train_fader
from .fcbaseline import fc_pipeline_evaluate, grid_atlas
from .pipelines import latent_gru_pipeline, load_latents, probe_vectors, save_latents
from .synthgen import generate_dataset

log = logging.getLogger("faderfmri")

COMMANDS = ("gen", "train-fader", "encode", "train-clf", "eval", "probe", "embed")


class Run:
    """Resolved config plus artifact paths for one experiment."""

    def __init__(self, cfg: RunConfig, out: str | None = None):
        self.cfg = cfg
        self.root = cfg.run_dir(out)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def phenotype(self) -> Path:
        user = self.cfg.raw["phenotype"]
        return Path(user) if user else self.root / "data" / "phenotype.csv"

    def records(self):
        if not self.phenotype.exists():
            raise MissingArtifactError(f"phenotype table {self.phenotype} not found; run `gen` first")
        return load_phenotype_table(self.phenotype, n_sites=self.cfg.raw["synth"]["n_sites"])

    def checkpoint(self, encoder: str) -> Path:
        return self.root / "checkpoints" / f"{encoder}.fdck"

    def latents(self, encoder: str, checkpoint: str | None = None):
        """Stored latents if present, else encode from the checkpoint, else fail."""
        stored = self.root / "latents" / f"{encoder}.npz"
        if stored.exists() and checkpoint is None:
            seqs = load_latents(stored)
            ids = [r.subject_id for r in self.records()]
            if [s.subject_id for s in seqs] == ids:
                return seqs
            log.info("stored latents for %s do not match the phenotype table; re-encoding", encoder)
        ck = Path(checkpoint) if checkpoint else self.checkpoint(encoder)
        if not ck.exists():
            raise MissingArtifactError(f"checkpoint {ck} not found; run `train-fader --model {encoder}` first")
        model, _ = load_fader(ck)
        return encode_records(model, self.records())

    def echo(self, **extra) -> dict:
        return {"run_config": self.cfg.to_dict(), **extra}


def _encoder_name(model: str | None) -> str:
    if model is None:
        raise DomainError("--model is required for this command")
    name = LATENT_SOURCE.get(model, model)
    if name not in ENCODER_MODELS:
        raise DomainError(f"model {model!r} has no encoder; choose from {', '.join(ENCODER_MODELS)}")
    return name


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(run: Run, args) -> None:
    recs = generate_dataset(run.cfg.synth, run.root / "data")
    log.info("wrote %d subjects to %s", len(recs), run.root / "data")


def cmd_train_fader(run: Run, args) -> None:
    name = _encoder_name(args.model)
    tcfg = run.cfg.fader_train(name)
    arch = run.cfg.arch
    recs = run.records()

    def progress(step, row, model):
        if (step + 1) % 250 == 0:
            log.info("%s step %d L_rec %.4f L_adv %.3f disc_acc %.2f", name, step + 1, row["L_rec"], row["L_adv"], row["disc_acc"])

    model, history = train_fader(recs, tcfg, arch, progress=progress)
    save_fader(model, run.path("checkpoints", f"{name}.fdck"), {"train": asdict(tcfg), "encoder": name})
    history.to_csv(run.path("checkpoints", f"{name}_history.csv"))
    log.info("saved %s", run.checkpoint(name))


def cmd_encode(run: Run, args) -> None:
    name = _encoder_name(args.model)
    seqs = run.latents(name, args.checkpoint)
    save_latents(run.path("latents", f"{name}.npz"), seqs, {"encoder": name})
    log.info("encoded %d subjects with %s", len(seqs), name)


def cmd_train_clf(run: Run, args) -> None:
    if args.model not in LATENT_SOURCE:
        raise DomainError(f"train-clf works on latent models: {', '.join(LATENT_SOURCE)}")
    recs = run.records()
    seqs = {s.subject_id: s.vectors for s in run.latents(LATENT_SOURCE[args.model], args.checkpoint)}
    xs = [seqs[r.subject_id] for r in recs]
    ys = [r.diagnosis for r in recs]
    model, history = train_classifier(xs, ys, run.cfg.gru)
    model.save(run.path("classifiers", f"{args.model}.gru"))
    with open(run.path("classifiers", f"{args.model}_predictions.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "probability", "label"])
        for r, p in zip(recs, predict(model, xs)):
            w.writerow([r.subject_id, repr(float(p)), r.diagnosis])
    log.info("final training loss %.4f, training AUC %.3f", history[-1]["loss"], history[-1]["train_auc"])


def _folds(run: Run, recs, mode: str):
    if mode == "kfold":
        e = run.cfg.raw["eval"]
        return make_kfold_splits(recs, e["k"], e["split_seed"])
    if mode == "loso":
        return make_loso_splits(recs)
    raise DomainError(f"unknown mode {mode!r}")


def evaluate_model(run: Run, model: str, mode: str, checkpoint: str | None = None):
    if model not in EVAL_MODELS:
        raise DomainError(f"unknown model {model!r}; choose from {', '.join(EVAL_MODELS)}")
    recs = run.records()
    base_seed = run.cfg.raw["eval"]["base_seed"]
    if model in LATENT_SOURCE:
        # resolve the encoder before any other work so a missing checkpoint fails fast
        seqs = run.latents(LATENT_SOURCE[model], checkpoint)
        folds = _folds(run, recs, mode)
        lat = {s.subject_id: s.vectors for s in seqs}
        report = cross_validate(latent_gru_pipeline(lat, run.cfg.gru), recs, folds, base_seed,
                                run.echo(pipeline=model, encoder=LATENT_SOURCE[model]))
        p = run.cfg.raw["probe"]
        report.site_probe_accuracy = site_probe(probe_vectors(seqs, p["vectors"], p["seed"]), [r.site for r in recs], p["seed"])
        return report
    folds = _folds(run, recs, mode)
    if model == "convgru":
        return end_to_end_convgru(recs, folds, run.cfg.arch, run.cfg.convgru, base_seed, config_echo=run.echo(pipeline=model))
    atlas = grid_atlas(run.cfg.raw["synth"]["S"], run.cfg.raw["fc"]["regions_per_axis"])
    return fc_pipeline_evaluate(recs, atlas, folds, run.cfg.fc_grid, base_seed, config_echo=run.echo(pipeline=model))


def cmd_eval(run: Run, args) -> None:
    if args.model is None:
        raise DomainError("--model is required for eval")
    report = evaluate_model(run, args.model, args.mode, args.checkpoint)
    stem = f"{args.model}_{args.mode}"
    report.write(run.path("reports", f"{stem}.json"), run.path("reports", f"{stem}.csv"))
    log.info("%s %s: mean AUC %.3f (std %.3f)", args.model, args.mode, report.mean_auc, report.std_auc)


def cmd_probe(run: Run, args) -> None:
    name = _encoder_name(args.model)
    recs = run.records()
    seqs = run.latents(name, args.checkpoint)
    p = run.cfg.raw["probe"]
    acc = site_probe(probe_vectors(seqs, p["vectors"], p["seed"]), [r.site for r in recs], p["seed"])
    _write_json(run.path("probe", f"{name}.json"),
                {"encoder": name, "accuracy": acc, "chance": 1.0 / len({r.site for r in recs}), "n_subjects": len(recs),
                 "probe": p})
    log.info("%s site probe accuracy %.3f", name, acc)


def cmd_embed(run: Run, args) -> None:
    name = _encoder_name(args.model)
    recs = run.records()
    seqs = run.latents(name, args.checkpoint)
    p, e = run.cfg.raw["probe"], dict(run.cfg.raw["embed"])
    method = e.pop("method")
    params = e if method == "tsne" else {}
    sites = [r.site for r in recs]
    result = embed_2d(probe_vectors(seqs, p["vectors"], p["seed"]), sites, method, params, [r.subject_id for r in recs])
    render_scatter(result, run.path("embed", f"{name}.svg"))
    sil = site_silhouette(result.points, sites)
    _write_json(run.path("embed", f"{name}.json"), {"encoder": name, "method": method, "params": result.params,
                                                    "silhouette_vs_site": sil})
    log.info("%s embedding silhouette vs site %.3f", name, sil)


HANDLERS = {
    "gen": cmd_gen,
    "train-fader": cmd_train_fader,
    "encode": cmd_encode,
    "train-clf": cmd_train_clf,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "embed": cmd_embed,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="faderfmri", description="Site-invariant latent encoding of volumetric time series.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="run configuration JSON")
    ap.add_argument("--model", help=f"encoder ({', '.join(ENCODER_MODELS)}) or pipeline ({', '.join(EVAL_MODELS)})")
    ap.add_argument("--mode", choices=("kfold", "loso"), default="kfold")
    ap.add_argument("--checkpoint", help="encoder checkpoint overriding the run's default path")
    ap.add_argument("--out", help="output directory overriding output_dir in the config")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        run = Run(RunConfig.load(args.config), args.out)
        HANDLERS[args.command](run, args)
    except (FaderError, ValueError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
