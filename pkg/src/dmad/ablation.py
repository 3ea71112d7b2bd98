"""Scriptable ablation grid over bank composition and knowledge toggles.

Each variant rebuilds its banks, trains a fresh scorer and reports the
detection (mean image AUROC) and localization (mean pixel AUROC) columns, in
the shape of the architecture-ablation table: filter on/off, pseudo-outlier /
seen / center-sampled bank inclusion, distance and attention knowledge terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from dmad import banks as bk
from dmad import features as fs
from dmad import synth
from dmad.enhance import KnowledgeMode
from dmad.errors import ValidationError
from dmad.evaluate import EvalConfig, evaluate
from dmad.learner import (
    AugmentConfig,
    LossConfig,
    OptimizerState,
    TrainConfig,
    init_model,
    train,
)


@dataclass
class AblationVariant:
    name: str
    mode: bk.Mode
    use_filter: bool = True
    include_pseudo_outliers: bool = True
    include_seen: bool = True
    include_center_sampled: bool = True
    use_dist: bool = True
    use_attention: bool = False


@dataclass
class AblationProtocol:
    """Shared training protocol for every grid row."""

    coreset: bk.CoresetConfig = field(default_factory=lambda: bk.CoresetConfig(seed=1))
    fusion: bk.FusionConfig = field(default_factory=lambda: bk.FusionConfig(pair_seed=2))
    center_sampling: bk.CenterSamplingConfig = field(
        default_factory=lambda: bk.CenterSamplingConfig(seed=3)
    )
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(noise_std=0.1, seed=4))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5, batch_size=4, seed=5))
    lr_mlp: float = 2e-3
    lr_attn_proj: float = 1e-3
    blur_sigma: float = 4.0


@dataclass
class AblationRow:
    name: str
    detection: float | None
    localization: float | None


def run_variant(
    variant: AblationVariant,
    train_manifest: fs.DatasetManifest,
    test_manifest: fs.DatasetManifest,
    outlier_dir,
    protocol: AblationProtocol | None = None,
) -> AblationRow:
    protocol = protocol or AblationProtocol()
    normal = bk.build_normal_bank(train_manifest, protocol.coreset)

    abnormal = None
    m_o = None
    if variant.include_pseudo_outliers:
        outliers = synth.load_outlier_grids(outlier_dir)
        m_o = bk.build_pseudo_outlier_bank(outliers, train_manifest, protocol.fusion, protocol.coreset)
    if variant.mode == "unsupervised":
        if m_o is not None:
            abnormal = bk.compose_abnormal_bank("unsupervised", m_o)
        loss_cfg = LossConfig(lambda1=1.0, lambda2=0.0)
    else:
        if m_o is None:
            raise ValidationError("semi-supervised variants need the pseudo-outlier bank")
        if not variant.include_seen:
            raise ValidationError("semi-supervised variants need the seen-anomaly bank")
        m_as = bk.build_seen_bank(
            train_manifest.select(label="anomalous"), apply_filter=variant.use_filter
        )
        m_p = (
            bk.anomaly_center_sampling(m_as, protocol.center_sampling)
            if variant.include_center_sampled
            else None
        )
        abnormal = bk.compose_abnormal_bank("semi_supervised", m_o, m_as, m_p)
        loss_cfg = LossConfig(lambda1=0.5, lambda2=15.0)

    dual = bk.DualMemoryBank(normal=normal, abnormal=abnormal, mode=variant.mode)
    knowledge = KnowledgeMode(use_attention=variant.use_attention, use_dist=variant.use_dist)
    model = init_model(
        normal.c,
        knowledge,
        protocol.train.seed,
        blocks_per_rep=2 if abnormal is None else 3,
    )
    optimizer = OptimizerState(lr={"mlp": protocol.lr_mlp, "attn_proj": protocol.lr_attn_proj})
    train(
        train_manifest,
        dual,
        model,
        loss_cfg,
        protocol.augment,
        replace(protocol.train, mode=variant.mode),
        use_filter=variant.use_filter,
        optimizer=optimizer,
    )
    report = evaluate(
        test_manifest, model, normal, abnormal, EvalConfig(blur_sigma=protocol.blur_sigma)
    )
    return AblationRow(
        name=variant.name,
        detection=report.aggregate["image_auroc"],
        localization=report.aggregate["pixel_auroc"],
    )


def run_grid(
    variants: list[AblationVariant],
    train_manifest: fs.DatasetManifest,
    test_manifest: fs.DatasetManifest,
    outlier_dir,
    protocol: AblationProtocol | None = None,
) -> list[AblationRow]:
    return [
        run_variant(v, train_manifest, test_manifest, outlier_dir, protocol) for v in variants
    ]
