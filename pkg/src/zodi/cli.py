"""Command-line entry point: ``zodi {pretrain,transfer,train,evaluate,report}``.

All outputs of one configuration live under its ``output_dir``; relative
output dirs resolve against ``$ZODI_OUTPUT_ROOT`` (default: the working
directory)::

    <out>/pretrain/                denoiser.ckpt, loss.tsv, loss.png, config.yaml, splits.json
    <out>/transfer/<variant>/<domain>/   manifest.json, images/, maps/, contact_sheet.png
    <out>/train/<method>/          metrics.json, seg_*.ckpt, config.yaml
    <out>/report/                  report.tsv, report.txt, report.png

Results are printed to stdout as tab-separated lines; progress goes to
stderr. Exit status is 0 on success and non-zero with a one-line
diagnostic otherwise.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import jsonschema

from . import pipeline
from .checkpoint import CheckpointError, load_denoiser, load_segmenter, save_checkpoint
from .config import OUTPUT_ROOT_ENV, ConfigError, RunConfig, load_config
from .datasets import DatasetError, read_transfer_dataset, write_split_manifest, write_transfer_dataset
from .denoiser import UnusableModelError
from .plotting import contact_sheet, plot_loss_curve, plot_report
from .report import ReportError, build_report, load_run, method_name, validate_manifest, validate_metrics, write_json
from .transfer import VARIANTS
from .world import audit_renders, load_adapt_split, load_eval_split

logger = logging.getLogger("zodi")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _stage_dir(cfg: RunConfig, *parts: str) -> Path:
    d = cfg.output_path().joinpath(*parts)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _echo_config(cfg: RunConfig, d: Path) -> None:
    (d / "config.yaml").write_text(cfg.dump())


def _emit(rows) -> None:
    for row in rows:
        print("\t".join(str(x) for x in row))


def _domains(cfg: RunConfig, requested) -> list[str]:
    if not requested:
        return list(cfg.world.target_domains)
    unknown = [d for d in requested if d not in cfg.world.target_domains]
    if unknown:
        raise UsageError(f"domain(s) {unknown} not among the configured targets {list(cfg.world.target_domains)}")
    return list(requested)


def _checkpoint_path(cfg: RunConfig, given) -> Path:
    return Path(given) if given else cfg.output_path() / "pretrain" / "denoiser.ckpt"


def train_dir_name(mode: str, variant: str) -> str:
    return method_name({"mode": mode, "variant": None if mode == "source_only" else variant})


# ----------------------------------------------------------------- commands


def cmd_pretrain(cfg: RunConfig, args) -> None:
    out = _stage_dir(cfg, "pretrain")
    splits = pipeline.build_splits(cfg, include_eval=False)
    den, losses = pipeline.pretrain_denoiser(cfg, splits.pretrain_corpus)
    ckpt = out / "denoiser.ckpt"
    digest = save_checkpoint(ckpt, "denoiser", den, cfg.seed, {"trained_steps": int(den.trained_steps)})
    (out / "loss.tsv").write_text("epoch\tloss\n" + "".join(f"{i}\t{v:.6f}\n" for i, v in enumerate(losses)))
    plot_loss_curve(losses, out / "loss.png")
    write_split_manifest(out / "splits.json", splits)
    _echo_config(cfg, out)
    _emit([("checkpoint", ckpt), ("sha256", digest), ("epochs", len(losses)),
           ("loss_first", f"{losses[0]:.6f}"), ("loss_last", f"{losses[-1]:.6f}")])


def cmd_transfer(cfg: RunConfig, args) -> None:
    ckpt = _checkpoint_path(cfg, args.checkpoint)
    den, _ = load_denoiser(ckpt)
    if den.config.T != cfg.schedule.T or den.config.schedule != cfg.schedule.kind:
        raise ConfigError(f"{ckpt} was trained with a different schedule than the config")
    sources = load_adapt_split(cfg.world)
    _emit([("domain", "variant", "strength", "k", "count", "path")])
    for domain in _domains(cfg, args.domain):
        pairs = pipeline.transfer_split(cfg, den, sources, domain, args.variant, args.strength)
        out = _stage_dir(cfg, "transfer", args.variant, domain)
        write_transfer_dataset(out, pairs, T=cfg.schedule.T, master_seed=cfg.seed)
        contact_sheet(pairs, out / "contact_sheet.png", title=f"day -> {domain} ({args.variant})")
        _echo_config(cfg, out)
        c = pairs[0].config
        _emit([(domain, args.variant, c.strength, c.k(cfg.schedule.T), len(pairs), out)])


def _load_pairs(cfg: RunConfig, variant: str, domain: str):
    d = cfg.output_path() / "transfer" / variant / domain
    if not (d / "manifest.json").is_file():
        raise DatasetError(f"missing transferred dataset {d}; run `zodi transfer --variant {variant} --domain {domain}` first")
    ds = read_transfer_dataset(d)
    validate_manifest(ds.manifest)
    return ds.pairs


def cmd_train(cfg: RunConfig, args) -> None:
    domains = _domains(cfg, args.domain)
    mode, variant = args.mode, args.variant
    name = train_dir_name(mode, variant)
    out = _stage_dir(cfg, "train", name)
    targets = set(cfg.world.target_domains)

    # Adaptation inputs are gathered and consumed inside the audit; evaluation
    # on target renders happens afterwards.
    models: dict[int, dict[str, object]] = {}
    per_seed = []
    with audit_renders() as audit:
        if mode == "source_only":
            sources = load_adapt_split(cfg.world)
        else:
            pair_sets = {d: _load_pairs(cfg, variant, d) for d in domains}
        for trial in cfg.trials:
            histories, models[trial] = {}, {}
            if mode == "source_only":
                m, h = pipeline.train_run(cfg, mode, trial, samples=sources)
                models[trial] = {d: m for d in domains}
                histories["source"] = h.epochs
            else:
                for d in domains:
                    m, h = pipeline.train_run(cfg, mode, trial, pairs=pair_sets[d])
                    models[trial][d] = m
                    histories[d] = h.epochs
            per_seed.append({"seed": int(trial), "history": histories})
            logger.info("trained %s seed %d", name, trial)

    for rec in per_seed:
        trial = rec["seed"]
        ckpts, scores = {}, {}
        for d in domains:
            m = models[trial][d]
            tag = "source" if mode == "source_only" else d
            fname = f"seg_{tag}_seed{trial}.ckpt"
            if fname not in ckpts.values():
                save_checkpoint(out / fname, "segmenter", m, trial, {"mode": mode, "domain": tag})
            ckpts[d] = fname
            scores[d] = pipeline.evaluate(m, {d: load_eval_split(cfg.world, d)})[d]
        rec["miou"], rec["checkpoints"] = scores, ckpts

    stats = {d: pipeline.mean_std([r["miou"][d] for r in per_seed]) for d in domains}
    doc = {
        "schema_version": 1,
        "mode": mode,
        "variant": None if mode == "source_only" else variant,
        "lam": pipeline.trainer_config(cfg, mode, cfg.trials[0]).lam,
        "master_seed": cfg.seed,
        "seeds": [int(t) for t in cfg.trials],
        "domains": domains,
        "per_seed": per_seed,
        "mean": {d: s[0] for d, s in stats.items()},
        "std": {d: s[1] for d, s in stats.items()},
        "audit": {
            "rendered_domains": sorted(audit.domains),
            "target_images_read": sum(1 for dom, _ in audit.records if dom in targets),
        },
        "config": cfg.to_dict(),
    }
    validate_metrics(doc)
    write_json(out / "metrics.json", doc)
    _echo_config(cfg, out)
    if doc["audit"]["target_images_read"]:
        raise RuntimeError(f"zero-shot contract violated: {doc['audit']['target_images_read']} target renders during adaptation")
    _emit([("method", "domain", "miou_mean", "miou_std")])
    _emit([(name, d, f"{stats[d][0]:.4f}", f"{stats[d][1]:.4f}") for d in domains])


def cmd_evaluate(cfg: RunConfig, args) -> None:
    domains = _domains(cfg, args.domain)
    if args.checkpoint:
        m, _ = load_segmenter(args.checkpoint)
        scores = pipeline.evaluate(m, {d: load_eval_split(cfg.world, d) for d in domains})
        _emit([("checkpoint", "domain", "miou")])
        _emit([(args.checkpoint, d, f"{scores[d]:.4f}") for d in domains])
        return
    run = cfg.output_path() / "train" / train_dir_name(args.mode, args.variant)
    doc = load_run(run)
    result = {}
    _emit([("method", "seed", "domain", "miou")])
    for rec in doc["per_seed"]:
        for d in domains:
            if d not in rec["checkpoints"]:
                raise DatasetError(f"run {run} has no checkpoint for domain {d}")
            m, _ = load_segmenter(run / rec["checkpoints"][d])
            v = pipeline.evaluate(m, {d: load_eval_split(cfg.world, d)})[d]
            result.setdefault(d, {})[str(rec["seed"])] = v
            _emit([(method_name(doc), rec["seed"], d, f"{v:.4f}")])
    write_json(run / "evaluation.json", {"domains": domains, "miou": result})


def cmd_report(args) -> None:
    cfg = load_config(args.config) if args.config else None
    root = cfg.output_path() if cfg else Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
    runs = args.runs
    if not runs:
        if cfg is None:
            raise UsageError("give run directories or --config to report on every run of a configuration")
        runs = sorted(p for p in (root / "train").glob("*") if (p / "metrics.json").is_file())
        if not runs:
            raise ReportError(f"no completed runs under {root / 'train'}")
    rep = build_report([load_run(r) for r in runs])
    out = Path(args.out) if args.out else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    tsv = rep.to_tsv()
    (out / "report.tsv").write_text(tsv)
    (out / "report.txt").write_text(rep.to_text())
    plot_report(rep.domains, rep.methods, rep.mean, rep.std, out / "report.png")
    sys.stdout.write(tsv)
    sys.stderr.write(rep.to_text())


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zodi", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="run configuration (YAML)")
        return sp

    with_config(sub.add_parser("pretrain", help="train the layout-conditioned denoiser"))

    sp = with_config(sub.add_parser("transfer", help="transfer the source split to target domains"))
    sp.add_argument("--domain", nargs="+", help="target domain(s); default: all configured targets")
    sp.add_argument("--strength", type=float, help="override the per-domain strength S")
    sp.add_argument("--variant", choices=VARIANTS, default="zodi")
    sp.add_argument("--checkpoint", help="denoiser checkpoint; default <out>/pretrain/denoiser.ckpt")

    sp = with_config(sub.add_parser("train", help="train segmenters over all trial seeds"))
    sp.add_argument("--mode", choices=pipeline.MODES, required=True)
    sp.add_argument("--variant", choices=VARIANTS, default="zodi", help="which transferred dataset to adapt on")
    sp.add_argument("--domain", nargs="+")

    sp = with_config(sub.add_parser("evaluate", help="score trained segmenters on target test splits"))
    sp.add_argument("--mode", choices=pipeline.MODES, default="zodi")
    sp.add_argument("--variant", choices=VARIANTS, default="zodi")
    sp.add_argument("--checkpoint", help="score a single segmenter checkpoint instead of a run")
    sp.add_argument("--domain", nargs="+")

    sp = sub.add_parser("report", help="compare runs: method x domain table with deltas vs source_only")
    sp.add_argument("runs", nargs="*", help="train run dirs (default: every run of --config)")
    sp.add_argument("--config", help="configuration whose runs to report on")
    sp.add_argument("--out", help="output dir (default: <out>/report, or $ZODI_OUTPUT_ROOT/report without --config)")
    return p


_COMMANDS = {"pretrain": cmd_pretrain, "transfer": cmd_transfer, "train": cmd_train, "evaluate": cmd_evaluate}
_KNOWN_ERRORS = (ConfigError, CheckpointError, DatasetError, UnusableModelError, ReportError, UsageError,
                 jsonschema.ValidationError, FileNotFoundError, ValueError, RuntimeError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            cmd_report(args)
        else:
            _COMMANDS[args.command](load_config(args.config), args)
    except UsageError as exc:
        print(f"zodi {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"zodi {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except _KNOWN_ERRORS as exc:
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        print(f"zodi {args.command}: error: {msg.splitlines()[0] if msg else type(exc).__name__}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
