"""Command-line entry point wiring configuration and the pipeline stages.

Subcommands: ``build-banks``, ``train``, ``eval``, ``score``, ``synth-gen``,
``inspect-bank``. Configuration comes from one JSON file plus flags (flag >
file > default); the effective configuration is echoed into each command's
output directory so a run can be reproduced from it. ``DMAD_LOG`` selects the
log level (error, info, debug).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from dmad import banks as bk
from dmad import features as fs
from dmad import report as rp
from dmad import synth
from dmad.checkpoint import load_checkpoint, save_checkpoint
from dmad.enhance import KnowledgeMode
from dmad.errors import DmadError, EmptyBankError, ValidationError
from dmad.evaluate import EvalConfig, evaluate, score_grid
from dmad.learner import (
    AugmentConfig,
    LossConfig,
    OptimizerState,
    TrainConfig,
    init_model,
    train,
)

log = logging.getLogger("dmad.cli")

_MODE_DEFAULTS = {
    "unsupervised": {"lambda1": 1.0, "lambda2": 0.0, "use_attention": True},
    "semi_supervised": {"lambda1": 0.5, "lambda2": 15.0, "use_attention": False},
}


@dataclasses.dataclass
class AblationToggles:
    use_filter: bool = True
    include_pseudo_outliers: bool = True
    include_seen: bool = True
    include_center_sampled: bool = True


@dataclasses.dataclass
class RunConfig:
    """Fully resolved run configuration (defaults applied)."""

    mode: bk.Mode
    paths: dict[str, str]
    coreset: bk.CoresetConfig
    fusion: bk.FusionConfig
    center_sampling: bk.CenterSamplingConfig
    knowledge: KnowledgeMode
    loss: LossConfig
    augment: AugmentConfig
    train: TrainConfig
    optimizer: OptimizerState
    eval: EvalConfig
    ablation: AblationToggles
    deterministic: bool = False
    threads: int = 1

    def path(self, key: str, *, required: bool = True) -> Path | None:
        value = self.paths.get(key)
        if value is None:
            if required:
                raise ValidationError(f"config is missing required path {key!r}")
            return None
        return Path(value)


def _merge(defaults: dict[str, Any], override: dict[str, Any] | None, what: str) -> dict[str, Any]:
    merged = dict(defaults)
    for key, value in (override or {}).items():
        if key not in defaults:
            raise ValidationError(f"unknown key {key!r} in config section {what!r}")
        merged[key] = value
    return merged


def resolve_config(
    file_dict: dict[str, Any] | None,
    *,
    seed: int | None = None,
    deterministic: bool | None = None,
    threads: int | None = None,
) -> RunConfig:
    """Apply mode-dependent defaults, then file values, then flag overrides."""
    raw = dict(file_dict or {})
    known = {
        "mode", "paths", "coreset", "fusion", "center_sampling", "knowledge",
        "loss", "augment", "train", "optimizer", "eval", "ablation",
        "deterministic", "threads",
    }
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    mode = raw.get("mode", "unsupervised")
    if mode not in _MODE_DEFAULTS:
        raise ValidationError(f"unknown mode {mode!r}")
    mdef = _MODE_DEFAULTS[mode]

    # Seed derivation: one master seed spawns stable per-module streams.
    if seed is not None:
        derived = [int(s) for s in np.random.SeedSequence(seed).generate_state(5)]
        seed_over: dict[str, int] = dict(
            zip(("coreset", "fusion", "center_sampling", "augment", "train"), derived)
        )
    else:
        seed_over = {}

    coreset = _merge(
        {"retention": 0.02, "seed": 0, "projection_dim": None}, raw.get("coreset"), "coreset"
    )
    fusion = _merge({"beta": 0.6, "pair_seed": 0}, raw.get("fusion"), "fusion")
    center = _merge(
        {"count": 1024, "noise_std": 0.1, "seed": 0}, raw.get("center_sampling"), "center_sampling"
    )
    knowledge = _merge(
        {"use_attention": mdef["use_attention"], "use_dist": True}, raw.get("knowledge"), "knowledge"
    )
    loss = _merge(
        {"lambda1": mdef["lambda1"], "lambda2": mdef["lambda2"], "margin": 0.5},
        raw.get("loss"),
        "loss",
    )
    augment = _merge({"noise_std": 0.015, "seed": 0}, raw.get("augment"), "augment")
    train_d = _merge(
        {"epochs": 48, "batch_size": 32, "seed": 0}, raw.get("train"), "train"
    )
    optim_d = _merge(
        {
            "lr_mlp": 2e-4,
            "lr_attn_proj": 1e-4,
            "weight_decay_mlp": 1e-5,
            "weight_decay_attn_proj": 0.0,
        },
        raw.get("optimizer"),
        "optimizer",
    )
    eval_d = _merge(
        {"blur_sigma": 4.0, "pro_fpr_limit": 0.3, "pro_connectivity": 8},
        raw.get("eval"),
        "eval",
    )
    ablation = _merge(dataclasses.asdict(AblationToggles()), raw.get("ablation"), "ablation")

    if seed_over:
        coreset["seed"] = seed_over["coreset"]
        fusion["pair_seed"] = seed_over["fusion"]
        center["seed"] = seed_over["center_sampling"]
        augment["seed"] = seed_over["augment"]
        train_d["seed"] = seed_over["train"]

    if mode == "semi_supervised" and loss["lambda2"] <= 0:
        raise ValidationError("semi_supervised mode requires lambda2 > 0")
    if mode == "unsupervised" and loss["lambda2"] != 0:
        raise ValidationError("unsupervised mode has no abnormal supervision; lambda2 must be 0")

    paths = {k: str(Path(v).resolve()) for k, v in (raw.get("paths") or {}).items()}
    cfg = RunConfig(
        mode=mode,
        paths=paths,
        coreset=bk.CoresetConfig(**coreset),
        fusion=bk.FusionConfig(**fusion),
        center_sampling=bk.CenterSamplingConfig(**center),
        knowledge=KnowledgeMode(**knowledge),
        loss=LossConfig(**loss),
        augment=AugmentConfig(**augment),
        train=TrainConfig(mode=mode, **train_d),
        optimizer=OptimizerState(
            lr={"mlp": optim_d["lr_mlp"], "attn_proj": optim_d["lr_attn_proj"]},
            weight_decay={
                "mlp": optim_d["weight_decay_mlp"],
                "attn_proj": optim_d["weight_decay_attn_proj"],
            },
        ),
        eval=EvalConfig(**eval_d),
        ablation=AblationToggles(**ablation),
        deterministic=bool(raw.get("deterministic", False)),
        threads=int(raw.get("threads", 1)),
    )
    if deterministic is not None:
        cfg.deterministic = deterministic
    if threads is not None:
        cfg.threads = threads
    if cfg.deterministic:
        cfg.threads = 1
    cfg.eval.threads = cfg.threads
    if cfg.threads < 1:
        raise ValidationError("threads must be at least 1")
    return cfg


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    return {
        "mode": cfg.mode,
        "paths": dict(cfg.paths),
        "coreset": {
            "retention": cfg.coreset.retention,
            "seed": cfg.coreset.seed,
            "projection_dim": cfg.coreset.projection_dim,
        },
        "fusion": {"beta": cfg.fusion.beta, "pair_seed": cfg.fusion.pair_seed},
        "center_sampling": {
            "count": cfg.center_sampling.count,
            "noise_std": cfg.center_sampling.noise_std,
            "seed": cfg.center_sampling.seed,
        },
        "knowledge": {
            "use_attention": cfg.knowledge.use_attention,
            "use_dist": cfg.knowledge.use_dist,
        },
        "loss": {
            "lambda1": cfg.loss.lambda1,
            "lambda2": cfg.loss.lambda2,
            "margin": cfg.loss.margin,
        },
        "augment": {"noise_std": cfg.augment.noise_std, "seed": cfg.augment.seed},
        "train": {
            "epochs": cfg.train.epochs,
            "batch_size": cfg.train.batch_size,
            "seed": cfg.train.seed,
        },
        "optimizer": {
            "lr_mlp": cfg.optimizer.lr["mlp"],
            "lr_attn_proj": cfg.optimizer.lr["attn_proj"],
            "weight_decay_mlp": cfg.optimizer.weight_decay["mlp"],
            "weight_decay_attn_proj": cfg.optimizer.weight_decay["attn_proj"],
        },
        "eval": {
            "blur_sigma": cfg.eval.blur_sigma,
            "pro_fpr_limit": cfg.eval.pro_fpr_limit,
            "pro_connectivity": cfg.eval.pro_connectivity,
        },
        "ablation": dataclasses.asdict(cfg.ablation),
        "deterministic": cfg.deterministic,
        "threads": cfg.threads,
    }


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "effective_config.json", "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=2)
        f.write("\n")


def _require_file(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise ValidationError(f"{hint} not found at {path}; run the producing command first")
    return path


# -- subcommand implementations --------------------------------------------------


def cmd_build_banks(cfg: RunConfig) -> None:
    bank_dir = cfg.path("bank_dir")
    manifest = fs.load_manifest(_require_file(cfg.path("train_manifest"), "train manifest"), "train")

    normal = bk.build_normal_bank(manifest, cfg.coreset)
    bk.save_bank(normal, bank_dir / "normal.dmbk")
    log.info("normal bank: %d rows of %d channels", normal.k, normal.c)

    abnormal = None
    if cfg.ablation.include_pseudo_outliers:
        outlier_dir = cfg.path("outlier_dir")
        outliers = synth.load_outlier_grids(outlier_dir)
        m_o = bk.build_pseudo_outlier_bank(outliers, manifest, cfg.fusion, cfg.coreset)
        if cfg.mode == "unsupervised":
            abnormal = bk.compose_abnormal_bank("unsupervised", m_o)
        else:
            bk.save_bank(m_o, bank_dir / "pseudo_outlier.dmbk")
            m_as = None
            m_p = None
            if cfg.ablation.include_seen:
                try:
                    m_as = bk.build_seen_bank(
                        manifest.select(label="anomalous"), apply_filter=cfg.ablation.use_filter
                    )
                    bk.save_bank(m_as, bank_dir / "seen_anomaly.dmbk")
                except EmptyBankError as exc:
                    log.warning("seen-anomaly bank empty (%s); falling back to pseudo outliers only", exc)
            if m_as is not None and cfg.ablation.include_center_sampled:
                m_p = bk.anomaly_center_sampling(m_as, cfg.center_sampling)
                bk.save_bank(m_p, bank_dir / "center_sampled.dmbk")
            if m_as is None:
                abnormal = bk.compose_abnormal_bank("unsupervised", m_o)
            else:
                abnormal = bk.compose_abnormal_bank("semi_supervised", m_o, m_as, m_p)
    elif cfg.mode == "semi_supervised":
        raise ValidationError("semi_supervised banks require the pseudo-outlier component")

    if abnormal is not None:
        bk.save_bank(abnormal, bank_dir / "abnormal.dmbk")
        summary = ", ".join(f"{k}={v}" for k, v in sorted(abnormal.provenance.items()))
        print(f"abnormal bank: {abnormal.k} rows ({summary})")
    else:
        print("abnormal bank: skipped (pseudo outliers disabled)")
    print(f"normal bank: {normal.k} rows of {normal.c} channels")
    _echo_config(cfg, bank_dir)


def _load_banks(cfg: RunConfig) -> bk.DualMemoryBank:
    bank_dir = cfg.path("bank_dir")
    normal = bk.load_bank(_require_file(bank_dir / "normal.dmbk", "normal bank"))
    abnormal_path = bank_dir / "abnormal.dmbk"
    abnormal = bk.load_bank(abnormal_path) if abnormal_path.is_file() else None
    if abnormal is None and cfg.ablation.include_pseudo_outliers:
        raise ValidationError(f"abnormal bank not found at {abnormal_path}; run build-banks first")
    return bk.DualMemoryBank(normal=normal, abnormal=abnormal, mode=cfg.mode)


def cmd_train(cfg: RunConfig) -> None:
    dual = _load_banks(cfg)
    manifest = fs.load_manifest(_require_file(cfg.path("train_manifest"), "train manifest"), "train")
    checkpoint_path = cfg.path("checkpoint")
    blocks_per_rep = 2 if dual.abnormal is None else 3
    model = init_model(
        dual.normal.c, cfg.knowledge, cfg.train.seed, blocks_per_rep=blocks_per_rep
    )
    result = train(
        manifest,
        dual,
        model,
        cfg.loss,
        cfg.augment,
        cfg.train,
        use_filter=cfg.ablation.use_filter,
        optimizer=cfg.optimizer,
    )
    save_checkpoint(checkpoint_path, result.model, result.optimizer, cfg.mode)
    loss_path = checkpoint_path.with_suffix(".loss.csv")
    rp.write_loss_log(result.loss_rows, loss_path)
    _echo_config(cfg, checkpoint_path.parent)
    print(f"checkpoint written to {checkpoint_path}")
    print(f"loss log written to {loss_path}")
    print(f"final epoch mean loss {result.epoch_mean_loss[-1]:.6f}")


def _load_model_and_banks(cfg: RunConfig):
    checkpoint_path = _require_file(cfg.path("checkpoint"), "checkpoint")
    model, _, ckpt_mode = load_checkpoint(checkpoint_path)
    dual = _load_banks(cfg)
    if ckpt_mode != cfg.mode:
        log.warning("checkpoint mode %s differs from configured mode %s", ckpt_mode, cfg.mode)
    return model, dual


def cmd_eval(cfg: RunConfig, dump_pixel_maps: str | None = None) -> None:
    model, dual = _load_model_and_banks(cfg)
    manifest = fs.load_manifest(_require_file(cfg.path("test_manifest"), "test manifest"), "test")
    report_dir = cfg.path("report_dir")
    score_sink: dict[str, tuple[list[float], list[int]]] = {}
    result = evaluate(
        manifest, model, dual.normal, dual.abnormal, cfg.eval, mode=cfg.mode, score_sink=score_sink
    )
    rp.write_report_json(result, report_dir / "report.json")
    rp.write_report_csv(result, report_dir / "report.csv")
    figures = rp.render_figures(result, report_dir, image_scores=score_sink)
    if dump_pixel_maps:
        _dump_pixel_maps(manifest, model, dual, cfg, Path(dump_pixel_maps))
    _echo_config(cfg, report_dir)
    for obj in sorted(result.per_object):
        row = result.per_object[obj]
        cells = ", ".join(
            f"{key}={row[key]:.4f}" for key in ("image_auroc", "pixel_auroc") if row[key] is not None
        )
        print(f"{obj}: {cells}")
    agg = ", ".join(
        f"{key}={value:.4f}" for key, value in result.aggregate.items() if value is not None
    )
    print(f"mean: {agg}")
    print(f"report written to {report_dir} ({len(figures)} figures)")


def _dump_pixel_maps(cfg_manifest, model, dual, cfg, out_dir: Path) -> None:
    for entry in cfg_manifest.entries:
        grid = fs.read_feature_file(entry.feature_path)
        sm = score_grid(grid, model, dual.normal, dual.abnormal, cfg.eval.blur_sigma)
        pm_grid = fs.FeatureGrid(
            object_id=grid.object_id,
            image_id=f"{grid.image_id}.pixelmap",
            data=sm.pixel_map[:, :, None].astype(np.float32),
            source_h=grid.source_h,
            source_w=grid.source_w,
        )
        fs.write_feature_file(pm_grid, out_dir / grid.object_id / f"{grid.image_id}.pixelmap.dmft")


def cmd_score(cfg: RunConfig, feature: str, pixel_map_out: str | None) -> None:
    model, dual = _load_model_and_banks(cfg)
    grid = fs.read_feature_file(_require_file(Path(feature), "feature file"))
    sm = score_grid(
        grid, model, dual.normal, dual.abnormal, cfg.eval.blur_sigma, with_pixel_map=pixel_map_out is not None
    )
    print(f"{grid.object_id}/{grid.image_id}: image score {sm.image_score:.6f}")
    if pixel_map_out:
        pm_grid = fs.FeatureGrid(
            object_id=grid.object_id,
            image_id=f"{grid.image_id}.pixelmap",
            data=sm.pixel_map[:, :, None].astype(np.float32),
            source_h=grid.source_h,
            source_w=grid.source_w,
        )
        fs.write_feature_file(pm_grid, pixel_map_out)
        print(f"pixel map written to {pixel_map_out}")


def cmd_synth_gen(spec_path: str | None, out_dir: str, seed: int | None) -> None:
    spec_dict: dict[str, Any] = {}
    if spec_path:
        with open(spec_path, "r", encoding="utf-8") as f:
            spec_dict = json.load(f)
    if seed is not None:
        spec_dict["seed"] = seed
    spec = synth.SynthSpec(**spec_dict)
    result = synth.generate(spec, out_dir)
    print(f"train manifest: {result.train_manifest_path}")
    print(f"test manifest: {result.test_manifest_path}")
    print(f"outlier grids: {result.outlier_dir}")


def cmd_inspect_bank(path: str, as_json: bool) -> None:
    bank = bk.load_bank(path)
    if bank.k:
        mean = bank.rows.astype(np.float64).mean(axis=0)
        std = bank.rows.astype(np.float64).std(axis=0)
    else:
        mean = np.zeros(bank.c)
        std = np.zeros(bank.c)
    if as_json:
        print(
            json.dumps(
                {
                    "kind": bank.kind,
                    "rows": bank.k,
                    "channels": bank.c,
                    "provenance": bank.provenance,
                    "dim_mean": mean.tolist(),
                    "dim_std": std.tolist(),
                }
            )
        )
        return
    print(f"kind: {bank.kind}")
    print(f"rows: {bank.k}")
    print(f"channels: {bank.c}")
    print("provenance: " + ", ".join(f"{k}={v}" for k, v in sorted(bank.provenance.items())))
    for d in range(bank.c):
        print(f"dim {d}: mean={mean[d]:.6f} std={std[d]:.6f}")


# -- argument parsing --------------------------------------------------------------


def _common_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", type=str, default=None, help="JSON config file")
    sp.add_argument("--seed", type=int, default=None, help="master seed overriding all config seeds")
    sp.add_argument("--deterministic", action="store_true", default=None,
                    help="single-threaded, ordered execution")
    sp.add_argument("--threads", type=int, default=None, help="worker thread cap")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("build-banks", "train", "eval", "score"):
        sp = sub.add_parser(name)
        _common_flags(sp)
        if name == "eval":
            sp.add_argument("--dump-pixel-maps", type=str, default=None,
                            help="directory for per-image pixel-map grids")
        if name == "score":
            sp.add_argument("--feature", type=str, required=True, help="feature file to score")
            sp.add_argument("--pixel-map", type=str, default=None,
                            help="write the pixel map to this path")

    sp = sub.add_parser("synth-gen")
    sp.add_argument("--spec", type=str, default=None, help="JSON file of generator settings")
    sp.add_argument("--out", type=str, required=True, help="output dataset directory")
    sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("inspect-bank")
    sp.add_argument("bank", type=str, help="bank file to summarize")
    sp.add_argument("--json", action="store_true", help="machine-readable output")
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("DMAD_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        print(f"warning: unknown DMAD_LOG value {level_name!r}; using info", file=sys.stderr)
        level_name = "info"
    logging.basicConfig(level=levels[level_name], format="%(levelname)s %(name)s: %(message)s")


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    file_dict = None
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            file_dict = json.load(f)
    return resolve_config(
        file_dict,
        seed=args.seed,
        deterministic=args.deterministic,
        threads=args.threads,
    )


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "build-banks":
            cmd_build_banks(_load_run_config(args))
        elif args.command == "train":
            cmd_train(_load_run_config(args))
        elif args.command == "eval":
            cmd_eval(_load_run_config(args), dump_pixel_maps=args.dump_pixel_maps)
        elif args.command == "score":
            cmd_score(_load_run_config(args), args.feature, args.pixel_map)
        elif args.command == "synth-gen":
            cmd_synth_gen(args.spec, args.out, args.seed)
        elif args.command == "inspect-bank":
            cmd_inspect_bank(args.bank, args.json)
        else:  # pragma: no cover - argparse enforces the choices
            raise ValidationError(f"unknown command {args.command!r}")
    except DmadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
