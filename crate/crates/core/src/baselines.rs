//! Comparison learners: plain ERM on the target, and two transfer baselines
//! that pre-train the feature map on pooled coarse data.

use crate::dataset::DomainDataset;
use crate::error::{invalid, Result};
use crate::models::{Architecture, ModelBundle};
use crate::objective::{fit, train, TrainConfig, Trainable};

/// Hidden widths of the baseline networks.
pub const BASELINE_HIDDEN: [usize; 2] = [20, 20];

/// Architecture used by the baselines: two ReLU layers of 20 units and no
/// separate linear feature layer.
pub fn baseline_arch(input_dim: usize, fine_count: usize, coarse_count: usize) -> Result<Architecture> {
    Architecture::new(input_dim, BASELINE_HIDDEN.to_vec(), None, fine_count, coarse_count)
}

fn erm_config(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        t_threshold: 0,
        lambda_after: 0.0,
        aux_coarse_weight: 0.0,
        ..config.clone()
    }
}

/// Fine-risk minimization on the target alone.
pub fn train_erm(target: &DomainDataset, arch: &Architecture, config: &TrainConfig) -> Result<ModelBundle> {
    train(target, &[], arch, &erm_config(config))
}

/// Phase 1 of the transfer baselines: the feature map and coarse head are
/// fit by ERM on the pooled auxiliary data.
pub fn pretrain(ad_datasets: &[&DomainDataset], arch: &Architecture, config: &TrainConfig) -> Result<ModelBundle> {
    if ad_datasets.is_empty() {
        return Err(invalid("pre-training needs at least one auxiliary domain"));
    }
    let pooled = DomainDataset::concat(ad_datasets)?;
    let phase1 = TrainConfig {
        aux_coarse_weight: 1.0,
        ..erm_config(config)
    };
    let bundle = ModelBundle::init(arch.clone(), config.seed);
    fit(
        bundle,
        None,
        &[&pooled],
        &phase1,
        Trainable {
            phi: true,
            theta: false,
            theta_ad: true,
        },
    )
}

/// Replaces the target head with a freshly initialized one.
fn fresh_head(mut bundle: ModelBundle, seed: u64) -> ModelBundle {
    bundle.theta = ModelBundle::init(bundle.arch.clone(), seed.wrapping_add(1)).theta;
    bundle
}

/// Fine-tuning: pre-train, then train the feature map and a new target head
/// on the target with a fresh optimizer.
pub fn train_finetune(
    target: &DomainDataset,
    ad_datasets: &[&DomainDataset],
    arch: &Architecture,
    config: &TrainConfig,
) -> Result<ModelBundle> {
    let bundle = fresh_head(pretrain(ad_datasets, arch, config)?, config.seed);
    fit(
        bundle,
        Some(target),
        &[],
        &erm_config(config),
        Trainable {
            phi: true,
            theta: true,
            theta_ad: false,
        },
    )
}

/// Frozen features: pre-train, then train only a new target head.
pub fn train_frozen(
    target: &DomainDataset,
    ad_datasets: &[&DomainDataset],
    arch: &Architecture,
    config: &TrainConfig,
) -> Result<ModelBundle> {
    let bundle = fresh_head(pretrain(ad_datasets, arch, config)?, config.seed);
    fit(
        bundle,
        Some(target),
        &[],
        &erm_config(config),
        Trainable {
            phi: false,
            theta: true,
            theta_ad: false,
        },
    )
}
