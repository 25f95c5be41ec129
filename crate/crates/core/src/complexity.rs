//! Parameter accounting for TRG models.

use std::collections::BTreeMap;

use crate::model::{Model, ModelConfig};
use crate::tensor::Scalar;
use crate::trg::{AggregatorWeight, SimilarityKind};

/// Closed form `Σ_l (N_l·C_l² + 9·N_l·C_l² + N_l²)` over `(N_l, C_l)` stages.
pub fn formula(stages: &[(usize, usize)]) -> usize {
    stages.iter().map(|&(n, c)| n * c * c + 9 * n * c * c + n * n).sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    /// Every trainable scalar in the model.
    pub total: usize,
    /// Trainable scalars inside TRG layers.
    pub trg_only: usize,
    /// The closed form evaluated for this model's stages.
    pub formula: usize,
    /// TRG scalars per parameter role (`sim_transform`, `spatial`, `aggregator`, ...).
    pub by_role: BTreeMap<String, usize>,
}

impl ParamCount {
    /// Enumerated TRG count minus the closed form.
    pub fn delta(&self) -> isize {
        self.trg_only as isize - self.formula as isize
    }
}

pub fn param_count<F: Scalar>(model: &Model<F>) -> ParamCount {
    let mut total = 0;
    let mut trg_only = 0;
    let mut by_role = BTreeMap::new();
    for (_, p) in model.store.iter().filter(|(_, p)| p.trainable()) {
        let n = p.value.numel();
        total += n;
        if p.name.starts_with("trg") {
            trg_only += n;
            *by_role.entry(role(&p.name)).or_insert(0) += n;
        }
    }
    let cfg = &model.config;
    let stages = vec![(cfg.heads, cfg.channels); cfg.trg_layers()];
    ParamCount {
        total,
        trg_only,
        formula: formula(&stages),
        by_role,
    }
}

/// `trg0.head1.sim_bn.gamma` → `sim_bn.gamma`; `trg0.aggregator` → `aggregator`.
fn role(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let skip = if parts.get(1).is_some_and(|p| p.starts_with("head")) { 2 } else { 1 };
    parts[skip.min(parts.len() - 1)..].join(".")
}

/// The configuration under which enumeration and the closed form coincide:
/// full-width similarity transform, dot-product similarity, no batchnorm, and an
/// `N×N` aggregator weight.
pub fn formula_accounting(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        sim_width: Some(cfg.channels),
        similarity: SimilarityKind::DotProduct,
        batch_norm: false,
        similarity_batch_norm: false,
        aggregator: AggregatorWeight::Full,
        ..cfg.clone()
    }
}

/// One line per role, for reports.
pub fn describe(count: &ParamCount) -> String {
    let mut s = format!(
        "total {} trainable, TRG {} enumerated vs {} by formula (delta {:+})\n",
        count.total,
        count.trg_only,
        count.formula,
        count.delta()
    );
    for (role, n) in &count.by_role {
        s.push_str(&format!("  {role}: {n}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn formula_examples() {
        assert_eq!(formula(&[(3, 16)]), 7689);
        assert_eq!(formula(&[(1, 1)]), 11);
        assert_eq!(formula(&[(3, 16), (1, 1)]), 7700);
        assert_eq!(formula(&[]), 0);
    }

    fn config(heads: usize, channels: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            frames: 4,
            height: 8,
            width: 8,
            heads,
            channels,
            layers,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn enumeration_matches_formula_under_its_accounting() {
        for (n, c, l) in [(3, 16, 1), (1, 1, 1), (2, 4, 2), (8, 3, 1)] {
            let m = Model::<f32>::build(formula_accounting(&config(n, c, l)), 0).unwrap();
            let pc = param_count(&m);
            assert_eq!(pc.trg_only, pc.formula, "N={n} C={c} L={l}");
            assert_eq!(pc.by_role["sim_transform"], l * n * c * c);
            assert_eq!(pc.by_role["spatial"], l * 9 * n * c * c);
            assert_eq!(pc.by_role["aggregator"], l * n * n);
        }
    }

    #[test]
    fn default_delta_is_explained_by_roles() {
        let cfg = config(3, 8, 1);
        let m = Model::<f32>::build(cfg.clone(), 0).unwrap();
        let pc = param_count(&m);
        let c: usize = 8;
        let cs = c.div_ceil(2);
        // half-width similarity, spatial batchnorm scale/shift, one shared aggregator scalar
        let expected = 3 * (cs * c + 9 * c * c + 2 * c) + 1;
        assert_eq!(pc.trg_only, expected);
        assert_eq!(pc.delta(), expected as isize - formula(&[(3, 8)]) as isize);
        assert!(describe(&pc).contains("spatial_bn.gamma"));
    }

    #[test]
    fn total_counts_every_trainable_scalar() {
        let m = Model::<f32>::build(config(2, 4, 1), 0).unwrap();
        let direct: usize = m.store.iter().filter(|(_, p)| p.trainable()).map(|(_, p)| p.value.numel()).sum();
        assert_eq!(param_count(&m).total, direct);
        let avg = Model::<f32>::build(
            ModelConfig {
                variant: Variant::Avgpool,
                ..config(2, 4, 1)
            },
            0,
        )
        .unwrap();
        let pc = param_count(&avg);
        assert_eq!((pc.trg_only, pc.formula), (0, 0));
    }
}
