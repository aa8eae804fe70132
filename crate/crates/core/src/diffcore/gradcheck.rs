//! Central finite-difference check of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor `max(|analytic|, |numeric|, floor)`, so entries with
    /// vanishing gradient are judged by absolute error.
    pub floor: f64,
    /// Checks at most this many evenly strided entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: DEFAULT_STEP, floor: 1e-6, max_entries_per_param: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat entry)` of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Max relative error between reverse-mode and central-difference gradients
/// of the scalar function `f` at `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions { step, ..Default::default() };
    Ok(grad_check_with(f, params, opts)?.max_rel_error)
}

pub fn grad_check_with<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {}", opts.step)));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("function value is {v}")));
        }
        Ok(v)
    };

    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::Evaluation("function value is not finite".into()));
    }
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), entries_checked: 0 };
    for (pi, (p, &v)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(v, p.shape());
        let n = p.len();
        let stride = opts.max_entries_per_param.map_or(1, |m| n.div_ceil(m.max(1)));
        for e in (0..n).step_by(stride) {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, e);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::graph::AttentionDims;
    use crate::diffcore::rng::{seeded_init, InitDistribution, RngState};
    use std::rc::Rc;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        seeded_init(shape, InitDistribution::TruncatedNormal, 1.0, &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn quadratic() {
        let err = grad_check(|g, v| g.mul(v[0], v[0]), &[Tensor::scalar(3.0)], DEFAULT_STEP).unwrap();
        assert!(err < 1e-9, "{err}");
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn nonfinite_function_is_an_error() {
        let r = grad_check(|g, v| Ok(g.recip(v[0])), &[Tensor::scalar(0.0)], 1e-4);
        assert!(matches!(r, Err(Error::Evaluation(_))));
        assert!(grad_check(|_, v| Ok(v[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }

    /// Every primitive and fused node on three random instances.
    #[test]
    fn primitives_match_finite_differences() {
        for seed in 0..3 {
            let a = rand(&[3, 4], seed);
            let b = rand(&[4, 5], seed + 10);
            let err = grad_check(
                |g, v| {
                    let m = g.matmul(v[0], v[1])?;
                    let s = g.silu(m);
                    let n = g.rms_norm(s);
                    let sm = g.softmax_rows(n);
                    let w = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64).sin()).collect())?;
                    g.weighted_sum(sm, w)
                },
                &[a.clone(), b.clone()],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");

            let c = rand(&[3, 1], seed + 20).map(|x| x.abs() + 0.5);
            let err = grad_check(
                |g, v| {
                    let r = g.recip(v[1]);
                    let y = g.mul_col(v[0], r)?;
                    let rs = g.row_sum(y);
                    let picked = g.pick(y, &[(0, 1), (2, 3), (2, 3)])?;
                    let gathered = g.gather_rows(y, &[2, 0, 2])?;
                    let sc = g.scatter_rows(gathered, &[1, 1, 0], 3)?;
                    let sl = g.slice_rows(sc, 1, 3)?;
                    let cat = g.concat_rows(&[sl, y])?;
                    let sq = g.mul(cat, cat)?;
                    let t0 = g.sum_all(sq);
                    let t1 = g.sum_all(rs);
                    let t2 = g.sum_all(picked);
                    let d = g.sub(t0, t2)?;
                    let e = g.add(d, g.scale(t1, 0.3))?;
                    Ok(e)
                },
                &[a.clone(), c],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn losses_match_finite_differences() {
        for seed in 0..3 {
            let logits = rand(&[6, 7], seed);
            let targets = [0usize, 3, 6, 2, 2, 5];
            let err = grad_check(|g, v| g.cross_entropy(v[0], &targets), &[logits], DEFAULT_STEP).unwrap();
            assert!(err < 1e-4, "ce seed {seed}: {err}");
            let z = rand(&[4, 6], seed + 3);
            let err = grad_check(|g, v| Ok(g.hidden_z_loss(v[0], 1.0)), &[z], DEFAULT_STEP).unwrap();
            assert!(err < 1e-4, "z-loss seed {seed}: {err}");
        }
    }

    #[test]
    fn rope_and_attention_match_finite_differences() {
        let dims = AttentionDims { heads: 2, nope_dim: 3, rope_dim: 2, value_dim: 3, seq_len: 3 };
        let rows = 6;
        for seed in 0..3 {
            let ps = [
                rand(&[rows, 6], seed),
                rand(&[rows, 4], seed + 1),
                rand(&[rows, 6], seed + 2),
                rand(&[rows, 2], seed + 3),
                rand(&[rows, 6], seed + 4),
            ];
            let pos = Rc::new((0..rows).map(|r| (r % 3) as f64).collect::<Vec<_>>());
            let err = grad_check(
                |g, v| {
                    let qr = g.rope(v[1], Rc::clone(&pos), 100.0, 2)?;
                    let kr = g.rope(v[3], Rc::clone(&pos), 100.0, 2)?;
                    let o = g.latent_attention(v[0], qr, v[2], kr, v[4], dims)?;
                    let w = Tensor::new(vec![rows, 6], (0..36).map(|i| (i as f64 * 0.7).cos()).collect())?;
                    g.weighted_sum(o, w)
                },
                &ps,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn attention_is_causal() {
        let dims = AttentionDims { heads: 1, nope_dim: 2, rope_dim: 2, value_dim: 2, seq_len: 4 };
        let build = |v_last: f64| {
            let g = Graph::new();
            let qc = g.constant(rand(&[4, 2], 1));
            let qr = g.constant(rand(&[4, 2], 2));
            let kc = g.constant(rand(&[4, 2], 3));
            let kr = g.constant(rand(&[4, 2], 4));
            let mut vt = rand(&[4, 2], 5);
            vt.row_mut(3).fill(v_last);
            let v = g.constant(vt);
            let o = g.latent_attention(qc, qr, kc, kr, v, dims).unwrap();
            (*g.value(o)).clone()
        };
        let a = build(0.0);
        let b = build(100.0);
        assert_eq!(a.slice_rows(0, 3).unwrap(), b.slice_rows(0, 3).unwrap());
        assert_ne!(a.row(3), b.row(3));
    }
}
