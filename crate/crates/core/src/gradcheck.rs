//! Finite-difference verification of the TRG block's analytic gradients.

use rand::Rng as _;

use crate::params::{Graph, Mode, ParamStore};
use crate::rng;
use crate::tensor::{OpKind, Tensor, TensorError};
use crate::trg::{SeqShape, SimilarityKind, TrgConfig, TrgLayer};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub kinds: Vec<SimilarityKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            channels: 3,
            height: 2,
            width: 2,
            heads: 2,
            batch: 1,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            kinds: SimilarityKind::ALL.to_vec(),
        }
    }
}

/// Largest relative error over one parameter tensor (or the input).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub kind: SimilarityKind,
    pub group: String,
    pub max_rel_error: f64,
    pub elements: usize,
    /// Set when an analytic or numeric gradient was not finite.
    pub non_finite: bool,
}

impl GroupResult {
    pub fn passed(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error < tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed(self.tolerance))
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupResult> {
        self.groups.iter().filter(|g| !g.passed(self.tolerance))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let status = if g.passed(self.tolerance) { "ok" } else { "FAIL" };
            let err = if g.non_finite {
                "non-finite".to_string()
            } else {
                format!("{:.3e}", g.max_rel_error)
            };
            s.push_str(&format!(
                "{:<12} {:<28} {:>4} elems  max rel err {:>10}  {status}\n",
                g.kind.name(),
                g.group,
                g.elements,
                err
            ));
        }
        s.push_str(if self.passed() { "PASS\n" } else { "FAIL\n" });
        s
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps near-zero gradients from
/// amplifying rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

struct Instance {
    layer: TrgLayer,
    store: ParamStore<f64>,
    input: Tensor<f64>,
    weights: Tensor<f64>,
    shape: SeqShape,
}

impl Instance {
    fn new(cfg: &GradcheckConfig, kind: SimilarityKind) -> Result<Self, TensorError> {
        let tc = TrgConfig {
            similarity: kind,
            batch_norm: false,
            ..TrgConfig::new(cfg.channels, cfg.height, cfg.width, cfg.heads)
        };
        let mut r = rng::stream(cfg.seed, "gradcheck", kind as u64);
        let mut store = ParamStore::new();
        let layer = TrgLayer::new(&mut store, "trg", tc, &mut r)?;
        let shape = SeqShape {
            batch: cfg.batch,
            frames: cfg.frames,
            channels: cfg.channels,
            height: cfg.height,
            width: cfg.width,
        };
        let dims = shape.dims();
        let input = Tensor::from_fn(&dims, |_| r.random_range(-1.0..1.0));
        let weights = Tensor::from_fn(&dims, |_| r.random_range(-1.0..1.0));
        Ok(Self {
            layer,
            store,
            input,
            weights,
            shape,
        })
    }

    /// Loss `Σ w ⊙ trg(x)` and, when asked, the gradients of every parameter and the input.
    fn eval(&self, grads: bool, fault: Option<(OpKind, f64)>) -> Result<(f64, Vec<(String, Tensor<f64>)>), TensorError> {
        let mut g = Graph::new(&self.store, Mode::Train);
        if let Some((kind, factor)) = fault {
            g.inject_fault(kind, factor);
        }
        let x = g.leaf(self.input.clone(), true);
        let out = self.layer.forward(&mut g, x, self.shape)?;
        let w = g.constant(self.weights.clone());
        let prod = g.mul(out.out, w)?;
        let loss = g.sum(prod)?;
        let value = g.value(loss).data()[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        let mut gr = g.backward(loss)?;
        let dx = gr.take(x).unwrap_or_else(|| Tensor::zeros(self.input.shape()));
        let outcome = g.finish(gr);
        let mut out = vec![("input".to_string(), dx)];
        for (id, p) in self.store.iter().filter(|(_, p)| p.trainable()) {
            let grad = outcome.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            out.push((p.name.trim_start_matches("trg.").to_string(), grad));
        }
        Ok((value, out))
    }

    fn value_mut(&mut self, group: &str) -> &mut Tensor<f64> {
        if group == "input" {
            return &mut self.input;
        }
        let id = self.store.find(&format!("trg.{group}")).expect("known group");
        &mut self.store.get_mut(id).value
    }
}

/// Checks every element of every parameter group for each similarity kind.
/// `fault` corrupts the backward pass of one op kind to exercise failure reporting.
pub fn run(cfg: &GradcheckConfig, fault: Option<(OpKind, f64)>) -> Result<GradcheckReport, TensorError> {
    let h = cfg.step;
    let mut groups = Vec::new();
    for &kind in &cfg.kinds {
        let mut inst = Instance::new(cfg, kind)?;
        let (_, analytic) = inst.eval(true, fault)?;
        for (group, grad) in analytic {
            let mut worst = 0.0f64;
            let mut non_finite = false;
            for i in 0..grad.numel() {
                let orig = inst.value_mut(&group).data()[i];
                inst.value_mut(&group).data_mut()[i] = orig + h;
                let plus = inst.eval(false, None).map(|r| r.0);
                inst.value_mut(&group).data_mut()[i] = orig - h;
                let minus = inst.eval(false, None).map(|r| r.0);
                inst.value_mut(&group).data_mut()[i] = orig;
                let a = grad.data()[i];
                match (plus, minus) {
                    (Ok(p), Ok(m)) => {
                        let numeric = (p - m) / (2.0 * h);
                        if a.is_finite() && numeric.is_finite() {
                            worst = worst.max(relative_error(a, numeric));
                        } else {
                            non_finite = true;
                        }
                    }
                    (Err(TensorError::NonFinite { .. }), _) | (_, Err(TensorError::NonFinite { .. })) => non_finite = true,
                    (Err(e), _) | (_, Err(e)) => return Err(e),
                }
            }
            groups.push(GroupResult {
                kind,
                group,
                max_rel_error: worst,
                elements: grad.numel(),
                non_finite,
            });
        }
    }
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_instance_passes_for_every_kind() {
        let report = run(&GradcheckConfig::default(), None).unwrap();
        assert!(report.passed(), "{}", report.render());
        for kind in SimilarityKind::ALL {
            assert!(report.groups.iter().any(|g| g.kind == kind && g.group == "input"));
        }
        let groups: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
        for want in ["head0.sim_transform", "head1.spatial", "head0.sim_v", "head1.sim_w1", "aggregator"] {
            assert!(groups.contains(&want), "missing {want}");
        }
    }

    #[test]
    fn single_head_passes() {
        let cfg = GradcheckConfig {
            heads: 1,
            ..GradcheckConfig::default()
        };
        assert!(run(&cfg, None).unwrap().passed());
    }

    #[test]
    fn corrupted_backward_is_caught_and_named() {
        let report = run(&GradcheckConfig::default(), Some((OpKind::SoftmaxRows, 1.5))).unwrap();
        assert!(!report.passed());
        let failed: Vec<&str> = report.failures().map(|g| g.group.as_str()).collect();
        assert!(failed.contains(&"head0.sim_transform"), "{failed:?}");
        assert!(report.render().contains("FAIL"));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }
}
