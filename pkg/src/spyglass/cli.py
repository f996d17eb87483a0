"""Command-line entry point wiring generation, training, and evaluation.

Configuration comes from a plain-text ``key = value`` file (``#`` starts a
comment); command-line flags override file values, and repeatable
``--set key=value`` overrides sit between the two. Every run writes its
fully-resolved configuration next to its outputs, and that file alone is
enough to reproduce the run (``spyglass <cmd> --config resolved_config.txt``).

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .augment import policy_from_name
from .data import (
    ARTIFACT_FAMILIES,
    GeneratorConfig,
    decode_image,
    generate_synthetic,
    load_manifest,
    save_gray_image,
    write_manifest,
)
from .errors import DataFormatError, NumericError, SpyglassError, UsageError
from .evaluation import evaluate, export_embeddings, separation_score
from .model import DetectorModel, EncoderConfig
from .spectral import fft2, magnitude_spectrum, to_grayscale
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

# key -> (type, default); "paths" double as config keys so a resolved config
# file reproduces a run without any flags.
CONFIG_SCHEMA = {
    "seed": (int, 0),
    # generator
    "count_per_class": (int, 200),
    "ood_count_per_class": (int, 0),
    "side": (int, 64),
    "alpha_min": (float, 1.5),
    "alpha_max": (float, 2.5),
    "blob_min": (int, 2),
    "blob_max": (int, 8),
    "artifact_family": (str, "checkerboard"),
    "amp_min": (float, 0.02),
    "amp_max": (float, 0.06),
    # model
    "stage_widths": (str, "16,32,64"),
    "kernel_size": (int, 3),
    "embed_dim": (int, 64),
    "residual_skips": (bool, False),
    # training
    "batch_size": (int, 32),
    "learning_rate": (float, 2e-5),
    "max_epochs": (int, 25),
    "patience": (int, 5),
    "augmentation": (str, "none"),
    "pathway": (str, "joint"),
    "fusion": (str, "add"),
    # evaluation
    "threshold": (float, 0.5),
    # paths
    "manifest": (str, ""),
    "checkpoint": (str, ""),
    "image": (str, ""),
    "out": (str, ""),
}

# The three pathway rows run augmentation-free so differences reflect
# architecture; "image+augs" is the one augmented row.
ABLATION_ROWS = (
    ("fourier-only", "spectral_only", "none"),
    ("image-only", "image_only", "none"),
    ("image+augs", "image_only", "combined"),
    ("joint", "joint", "none"),
)


def _coerce(key, raw):
    kind, _ = CONFIG_SCHEMA[key]
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except (TypeError, ValueError):
        raise UsageError(
            f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}"
        ) from None


def parse_config_file(path):
    """Read ``key = value`` lines; unknown keys are rejected."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(args):
    """defaults < config file < --set overrides < explicit flags."""
    cfg = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise UsageError(f"--set: unknown config key {key!r}")
        cfg[key] = _coerce(key, raw)
    for key in ("manifest", "checkpoint", "image", "out", "threshold", "seed"):
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = _coerce(key, flag)
    return cfg


def write_resolved_config(cfg, command, path):
    lines = [f"# resolved configuration for 'spyglass {command}'"]
    for key in sorted(cfg):
        lines.append(f"{key} = {cfg[key]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require(cfg, key, command):
    if not cfg[key]:
        raise UsageError(f"{command} requires --{key} (or {key}= in the config)")
    return cfg[key]


# ---------------------------------------------------------------------------
# domain-object builders


def generator_config(cfg, family=None, count=None, seed=None):
    return GeneratorConfig(
        count_per_class=count if count is not None else cfg["count_per_class"],
        side=cfg["side"],
        alpha_range=(cfg["alpha_min"], cfg["alpha_max"]),
        blob_count_range=(cfg["blob_min"], cfg["blob_max"]),
        artifact_family=family if family is not None else cfg["artifact_family"],
        artifact_amplitude_range=(cfg["amp_min"], cfg["amp_max"]),
        seed=seed if seed is not None else cfg["seed"],
    )


def parse_stage_widths(raw):
    try:
        widths = tuple(int(part) for part in str(raw).split(",") if part.strip())
    except ValueError:
        raise UsageError(f"stage_widths: cannot parse {raw!r}") from None
    if not widths:
        raise UsageError("stage_widths must name at least one width")
    return widths


def build_model(cfg, pathway=None, fusion=None):
    widths = parse_stage_widths(cfg["stage_widths"])
    common = dict(
        stage_widths=widths,
        kernel_size=cfg["kernel_size"],
        residual_skips=cfg["residual_skips"],
        embed_dim=cfg["embed_dim"],
    )
    try:
        return DetectorModel(
            image_config=EncoderConfig(input_channels=3, **common),
            spectral_config=EncoderConfig(input_channels=1, **common),
            fusion_mode=fusion if fusion is not None else cfg["fusion"],
            pathway_mask=pathway if pathway is not None else cfg["pathway"],
            input_side=cfg["side"],
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def build_train_config(cfg, pathway=None, augmentation=None):
    try:
        return TrainConfig(
            batch_size=cfg["batch_size"],
            learning_rate=cfg["learning_rate"],
            max_epochs=cfg["max_epochs"],
            early_stop_patience=cfg["patience"],
            seed=cfg["seed"],
            augmentation=policy_from_name(
                augmentation if augmentation is not None else cfg["augmentation"]
            ),
            pathway_mask=pathway if pathway is not None else cfg["pathway"],
            fusion_mode=cfg["fusion"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    cfg = resolve_config(args)
    out_dir = Path(_require(cfg, "out", "generate"))
    out_dir.mkdir(parents=True, exist_ok=True)
    main_cfg = generator_config(cfg)
    records = generate_synthetic(
        main_cfg, out_dir / "images",
        domain=f"main_{main_cfg.artifact_family}",
    )
    if cfg["ood_count_per_class"] > 0:
        held_out = [f for f in ARTIFACT_FAMILIES if f != main_cfg.artifact_family]
        for k, family in enumerate(held_out):
            ood_cfg = generator_config(
                cfg, family=family, count=cfg["ood_count_per_class"],
                seed=cfg["seed"] + 1000 * (k + 1),
            )
            records += generate_synthetic(
                ood_cfg, out_dir / f"ood_{family}",
                domain=f"ood_{family}", split="test",
            )
    write_manifest(records, out_dir / "manifest.jsonl")
    write_resolved_config(cfg, "generate", out_dir / "resolved_config.txt")
    by_split = {
        s: sum(r.split == s for r in records) for s in ("train", "val", "test")
    }
    print(
        f"wrote {len(records)} records to {out_dir / 'manifest.jsonl'} "
        f"(train={by_split['train']}, val={by_split['val']}, "
        f"test={by_split['test']})"
    )
    return 0


def cmd_train(args):
    cfg = resolve_config(args)
    manifest = _require(cfg, "manifest", "train")
    out_dir = Path(_require(cfg, "out", "train"))
    out_dir.mkdir(parents=True, exist_ok=True)
    records = load_manifest(manifest)
    model = build_model(cfg)
    train_cfg = build_train_config(cfg)
    model, state, history = train(
        model, records, train_cfg, log_fn=lambda msg: print(msg)
    )
    save_checkpoint(model, state, out_dir / "checkpoint.bin")
    history.write_csv(out_dir / "history.csv")
    write_resolved_config(cfg, "train", out_dir / "resolved_config.txt")
    print(
        f"best epoch {history.best_epoch} "
        f"(val_loss={history.val_loss[history.best_epoch - 1]:.4f}, "
        f"val_acc={history.val_acc[history.best_epoch - 1]:.3f}); "
        f"checkpoint at {out_dir / 'checkpoint.bin'}"
    )
    return 0


def _test_records(manifest):
    records = [r for r in load_manifest(manifest) if r.split == "test"]
    if not records:
        raise DataFormatError(f"{manifest}: no test-split records")
    return records


def cmd_eval(args):
    cfg = resolve_config(args)
    manifest = _require(cfg, "manifest", "eval")
    checkpoint = _require(cfg, "checkpoint", "eval")
    records = _test_records(manifest)
    model, _ = load_checkpoint(checkpoint)
    report = evaluate(model, records, threshold=cfg["threshold"])
    print(report.format_table())
    out = Path(cfg["out"]) if cfg["out"] else Path(checkpoint).parent / "eval_report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    write_resolved_config(cfg, "eval", out.parent / "resolved_config.txt")
    print(f"report written to {out}")
    return 0


def cmd_spectrum(args):
    cfg = resolve_config(args)
    image_path = _require(cfg, "image", "spectrum")
    out = Path(_require(cfg, "out", "spectrum"))
    image = decode_image(image_path)
    spec = magnitude_spectrum(fft2(to_grayscale(image)), shift=True, log_scale=True)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        save_gray_image(spec.values, out)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_resolved_config(cfg, "spectrum", out.parent / "resolved_config.txt")
    print(f"spectrum of {image_path} written to {out}")
    return 0


def cmd_embed(args):
    cfg = resolve_config(args)
    manifest = _require(cfg, "manifest", "embed")
    checkpoint = _require(cfg, "checkpoint", "embed")
    out = Path(_require(cfg, "out", "embed"))
    records = _test_records(manifest)
    model, _ = load_checkpoint(checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    embeddings = export_embeddings(model, records, out)
    labels = [r.label for r in records]
    _, score = separation_score(embeddings, labels)
    write_resolved_config(cfg, "embed", out.parent / "resolved_config.txt")
    print(f"{len(records)} embeddings written to {out}")
    print(f"silhouette: {score:.4f}")
    return 0


def run_ablation(cfg, records, out_dir, log_fn=print):
    """Train and evaluate the four standard configurations on one seed."""
    test_records = [r for r in records if r.split == "test"]
    if not test_records:
        raise DataFormatError("manifest has no test-split records")
    results = []
    for name, pathway, augmentation in ABLATION_ROWS:
        run_dir = out_dir / name.replace("+", "_")
        run_dir.mkdir(parents=True, exist_ok=True)
        model = build_model(cfg, pathway=pathway)
        train_cfg = build_train_config(cfg, pathway=pathway,
                                       augmentation=augmentation)
        log_fn(f"[{name}] training (pathway={pathway}, augs={augmentation})")
        model, state, history = train(model, records, train_cfg)
        save_checkpoint(model, state, run_dir / "checkpoint.bin")
        history.write_csv(run_dir / "history.csv")
        report = evaluate(model, test_records, threshold=cfg["threshold"])
        report.write_json(run_dir / "eval_report.json")
        results.append((name, report))
        log_fn(
            f"[{name}] best_epoch={history.best_epoch} "
            f"in_domain={report.in_domain_accuracy:.3f}"
        )
    return results


def format_ablation_table(results):
    ood_domains = sorted(
        {d for _, rep in results for d in rep.per_domain if d.startswith("ood")}
    )
    header = ["config", "in_domain"] + ood_domains + ["ood_avg", "overall"]
    rows = [header]
    for name, rep in results:
        cells = [name, f"{rep.in_domain_accuracy:.3f}"]
        for domain in ood_domains:
            m = rep.per_domain.get(domain)
            cells.append(f"{m.accuracy:.3f}" if m else "-")
        cells.append(
            f"{rep.ood_average_accuracy:.3f}"
            if rep.ood_average_accuracy is not None else "-"
        )
        cells.append(f"{rep.overall_average:.3f}")
        rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows
    )


def cmd_ablate(args):
    cfg = resolve_config(args)
    manifest = _require(cfg, "manifest", "ablate")
    out_dir = Path(_require(cfg, "out", "ablate"))
    out_dir.mkdir(parents=True, exist_ok=True)
    records = load_manifest(manifest)
    results = run_ablation(cfg, records, out_dir)
    table = format_ablation_table(results)
    print(table)
    lines = ["config,in_domain,ood_avg,overall"]
    for name, rep in results:
        ood = rep.ood_average_accuracy
        lines.append(
            f"{name},{rep.in_domain_accuracy!r},"
            f"{'' if ood is None else repr(ood)},{rep.overall_average!r}"
        )
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    write_resolved_config(cfg, "ablate", out_dir / "resolved_config.txt")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(
        prog="spyglass",
        description="Hybrid spatial-spectral detector for synthetic images.",
        epilog=(
            "Option precedence: built-in defaults < --config file "
            "< --set key=value < dedicated flags."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *keys):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        if "manifest" in keys:
            p.add_argument("--manifest", help="dataset manifest (JSON lines)")
        if "checkpoint" in keys:
            p.add_argument("--checkpoint", help="model checkpoint file")
        if "image" in keys:
            p.add_argument("--image", help="input image (PNG or PPM/PGM)")
        if "out" in keys:
            p.add_argument("--out", help="output directory or file")
        if "threshold" in keys:
            p.add_argument("--threshold", type=float,
                           help="decision threshold (default 0.5)")
        if "seed" in keys:
            p.add_argument("--seed", type=int, help="run seed")

    p = sub.add_parser("generate", help="write a synthetic dataset + manifest")
    common(p, "out", "seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector on a manifest")
    common(p, "manifest", "out", "seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p, "manifest", "checkpoint", "out", "threshold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("spectrum", help="dump an image's magnitude spectrum")
    common(p, "image", "out")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("embed", help="export embeddings + silhouette score")
    common(p, "manifest", "checkpoint", "out")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("ablate", help="run the four standard configurations")
    common(p, "manifest", "out", "seed")
    p.set_defaults(func=cmd_ablate)
    return parser


def run(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
