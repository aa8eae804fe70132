//! Training-stability tools: hidden z-loss, Adam with configurable ε and
//! per-step activation and gradient monitors.

use serde::{Deserialize, Serialize};

use crate::diffcore::tensor::log_sum_exp;
use crate::diffcore::{Graph, ParamClass, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZLossConfig {
    pub lambda: f64,
}

impl Default for ZLossConfig {
    fn default() -> Self {
        Self { lambda: 1e-5 }
    }
}

impl ZLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("z-loss coefficient must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `λ/T Σ_t (log Σ_i exp|z_t,i|)²` over the rows of the pre-norm final
/// hidden states `z: [T, d]`.
pub fn hidden_z_loss(g: &Graph, z: Var, cfg: &ZLossConfig) -> Result<Var> {
    cfg.validate()?;
    Ok(g.hidden_z_loss(z, cfg.lambda))
}

pub fn hidden_z_loss_value(z: &Tensor, lambda: f64) -> f64 {
    let total = (0..z.rows()).fold(0.0, |acc, r| {
        let l = log_sum_exp(&z.row(r).iter().map(|x| x.abs()).collect::<Vec<_>>());
        acc + l * l
    });
    lambda * total / z.rows() as f64
}

/// A value per parameter class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub embedding: f64,
    pub hidden: f64,
    pub unembedding: f64,
}

impl PerClass {
    pub fn uniform(x: f64) -> Self {
        Self { embedding: x, hidden: x, unembedding: x }
    }

    pub fn get(&self, class: ParamClass) -> f64 {
        match class {
            ParamClass::Embedding => self.embedding,
            ParamClass::Hidden => self.hidden,
            ParamClass::Unembedding => self.unembedding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: PerClass,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: PerClass::uniform(1e-3), beta1: 0.9, beta2: 0.95, eps: 1e-16 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !(ok(self.lr.embedding) && ok(self.lr.hidden) && ok(self.lr.unembedding)) {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("Adam eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; parameters and moments untouched.
    SkippedNonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Ok(Self { config, m: zeros(), v: zeros(), step: 0 })
    }

    /// Clears both moments, keeping the step counter.
    pub fn reset_moments(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().fill(0.0);
        }
    }

    /// Bias-corrected Adam update from the gradients stored in `store`,
    /// with every class rate multiplied by `lr_scale`.
    pub fn step(&mut self, store: &mut ParamStore, lr_scale: f64) -> Result<StepOutcome> {
        if self.m.len() != store.len() {
            return Err(Error::State(format!("optimizer has {} slots for {} parameters", self.m.len(), store.len())));
        }
        if store.iter().any(|p| !p.grad.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let eta = lr.get(p.class) * lr_scale;
            let (theta, grad) = (p.value.data_mut(), p.grad.data());
            for i in 0..theta.len() {
                let g = grad[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                theta[i] -= eta * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Per-step activation and gradient monitors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityMetrics {
    /// Mean over tokens of the L2 norm of the final pre-norm hidden state.
    pub hidden_norm: f64,
    /// Largest per-token L2 norm.
    pub hidden_norm_max: f64,
    pub max_abs_activation: f64,
    /// Min/max gradient RMS over parameter tensors.
    pub grad_rms_min: f64,
    pub grad_rms_max: f64,
    /// `[min, max]` gradient RMS per class, in embedding, hidden,
    /// unembedding order.
    pub grad_rms_by_class: Vec<[f64; 2]>,
    pub nonfinite_hidden: bool,
    pub nonfinite_grad: bool,
    /// ε is not small against the smallest gradient RMS.
    pub eps_at_or_above_grad_rms: bool,
}

pub fn grad_rms(t: &Tensor) -> f64 {
    (t.data().iter().fold(0.0, |a, &x| a + x * x) / t.len() as f64).sqrt()
}

pub fn stability_report(store: &ParamStore, hidden: &Tensor, eps: f64) -> StabilityMetrics {
    let norms: Vec<f64> =
        (0..hidden.rows()).map(|r| hidden.row(r).iter().fold(0.0, |a, &x| a + x * x).sqrt()).collect();
    let hidden_norm = norms.iter().fold(0.0, |a, &b| a + b) / norms.len().max(1) as f64;
    let hidden_norm_max = norms.iter().cloned().fold(0.0, f64::max);
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    let mut by_class = vec![[f64::INFINITY, 0.0f64]; ParamClass::ALL.len()];
    for p in store.iter() {
        let r = grad_rms(&p.grad);
        lo = lo.min(r);
        hi = hi.max(r);
        let c = ParamClass::ALL.iter().position(|&c| c == p.class).expect("known class");
        by_class[c][0] = by_class[c][0].min(r);
        by_class[c][1] = by_class[c][1].max(r);
    }
    for range in &mut by_class {
        if range[0].is_infinite() {
            range[0] = 0.0;
        }
    }
    if lo.is_infinite() {
        lo = 0.0;
    }
    StabilityMetrics {
        hidden_norm,
        hidden_norm_max,
        max_abs_activation: hidden.max_abs(),
        grad_rms_min: lo,
        grad_rms_max: hi,
        grad_rms_by_class: by_class,
        nonfinite_hidden: !hidden.is_finite(),
        nonfinite_grad: store.iter().any(|p| !p.grad.is_finite()),
        eps_at_or_above_grad_rms: eps >= lo,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, seeded_init, InitDistribution, RngState};
    use proptest::prelude::*;

    #[test]
    fn z_loss_examples() {
        let g = Graph::new();
        let z = g.leaf(Tensor::from_rows(&[vec![3.0, -2.0]]).unwrap());
        assert_eq!(g.value(hidden_z_loss(&g, z, &ZLossConfig { lambda: 0.0 }).unwrap()).item(), 0.0);
        assert_eq!(hidden_z_loss_value(&Tensor::full(&[1, 1], 0.0), 1.0), 0.0);
        let l = hidden_z_loss_value(&Tensor::full(&[1, 1], 2f64.ln()), 1.0);
        assert!((l - 0.480_453_013_918_201_4).abs() < 1e-15);
        assert!(hidden_z_loss(&g, z, &ZLossConfig { lambda: -1.0 }).is_err());
        let big = Tensor::full(&[1, 3], 800.0);
        assert!(hidden_z_loss_value(&big, 1.0).is_finite());
    }

    #[test]
    fn z_loss_gradient_check() {
        for seed in 0..3 {
            let z = seeded_init(&[5, 7], InitDistribution::TruncatedNormal, 4.0, &mut RngState::new(seed)).unwrap();
            let err = grad_check(|g, v| hidden_z_loss(g, v[0], &ZLossConfig { lambda: 0.3 }), &[z], 1e-5).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    proptest! {
        #[test]
        fn z_loss_monotone_in_magnitude(seed in 0u64..500, idx in 0usize..12, bump in 0.0f64..5.0) {
            let z = seeded_init(&[3, 4], InitDistribution::TruncatedNormal, 1.0, &mut RngState::new(seed)).unwrap();
            let mut z2 = z.clone();
            let x = z2.data()[idx];
            z2.data_mut()[idx] = x.signum() * (x.abs() + bump);
            prop_assert!(hidden_z_loss_value(&z2, 1.0) >= hidden_z_loss_value(&z, 1.0));
        }
    }

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[1], value), ParamClass::Hidden);
        s.get_mut(id).grad = Tensor::full(&[1], grad);
        s
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig { lr: PerClass::uniform(1e-3), beta1: 0.9, beta2: 0.999, eps: 1e-16 };
        let mut s = store_with(0.0, 0.0);
        let mut a = AdamState::new(&s, cfg).unwrap();
        a.step(&mut s, 1.0).unwrap();
        assert_eq!(s.value(crate::diffcore::ParamId(0)).item(), 0.0);

        let mut s = store_with(0.0, 1.0);
        let mut a = AdamState::new(&s, cfg).unwrap();
        a.step(&mut s, 1.0).unwrap();
        assert!((s.value(crate::diffcore::ParamId(0)).item() + 1e-3).abs() < 1e-15);

        let mut s = store_with(0.0, 1.0);
        let mut a = AdamState::new(&s, AdamConfig { eps: 1e6, ..cfg }).unwrap();
        a.step(&mut s, 1.0).unwrap();
        let u = -s.value(crate::diffcore::ParamId(0)).item();
        assert!((u - 1e-3 / (1.0 + 1e6)).abs() < 1e-18);
    }

    #[test]
    fn adam_skips_nonfinite() {
        let mut s = store_with(1.0, f64::NAN);
        let mut a = AdamState::new(&s, AdamConfig::default()).unwrap();
        assert_eq!(a.step(&mut s, 1.0).unwrap(), StepOutcome::SkippedNonFinite);
        assert_eq!(a.step, 0);
        assert_eq!(s.value(crate::diffcore::ParamId(0)).item(), 1.0);
    }

    #[test]
    fn report_on_zero_model() {
        let s = store_with(0.0, 0.0);
        let r = stability_report(&s, &Tensor::zeros(&[2, 3]), 1e-16);
        assert_eq!((r.hidden_norm, r.grad_rms_min, r.grad_rms_max), (0.0, 0.0, 0.0));
        assert!(r.eps_at_or_above_grad_rms);
        let s = store_with(0.0, 0.5);
        let r = stability_report(&s, &Tensor::full(&[1, 4], 1.0), 1e-16);
        assert_eq!(r.hidden_norm, 2.0);
        assert!(!r.eps_at_or_above_grad_rms);
        assert!(stability_report(&s, &Tensor::full(&[1, 4], 1.0), 0.5).eps_at_or_above_grad_rms);
    }
}
