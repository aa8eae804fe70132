//! Multi-head latent attention with scale-corrected compressions.
//!
//! Weights are stored `[in, out]` and applied as `x · W`:
//!
//! ```text
//! c_q  = α_q · h W_dq          c_kv = α_kv · h W_dkv
//! q_c  = c_q W_uq              k_c  = c_kv W_uk
//! q_r  = rope(c_q W_qr)        k_r  = rope(h W_kr)      (shared by heads)
//! v    = c_kv W_uv             u    = attn(q, k, v) W_o
//! ```

use serde::{Deserialize, Serialize};

use super::{Bound, InitScheme, SeqCtx};
use crate::diffcore::rope::rope_heads;
use crate::diffcore::tensor::{dot, softmax_in_place};
use crate::diffcore::{AttentionDims, Graph, ParamClass, ParamId, ParamStore, RngState, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlaConfig {
    pub d_model: usize,
    pub d_q: usize,
    pub d_kv: usize,
    pub heads: usize,
    pub nope_dim: usize,
    pub rope_dim: usize,
    pub value_dim: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "yes")]
    pub scale_correction: bool,
}

fn default_rope_base() -> f64 {
    1e6
}

fn yes() -> bool {
    true
}

impl MlaConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_model, self.d_q, self.d_kv, self.heads, self.nope_dim, self.rope_dim, self.value_dim];
        if dims.contains(&0) {
            return Err(Error::Config(format!("attention dimensions must be positive: {self:?}")));
        }
        if !self.rope_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rope_dim {} must be even", self.rope_dim)));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config("rope_base must exceed 1".into()));
        }
        Ok(())
    }

    pub fn attention_dims(&self, seq_len: usize) -> AttentionDims {
        AttentionDims {
            heads: self.heads,
            nope_dim: self.nope_dim,
            rope_dim: self.rope_dim,
            value_dim: self.value_dim,
            seq_len,
        }
    }

    /// `(α_q, α_kv)`, or `(1, 1)` with the correction disabled.
    pub fn scale_factors(&self) -> Result<(f64, f64)> {
        if self.scale_correction {
            mla_scale_factors(self.d_model, self.d_q, self.d_kv)
        } else {
            Ok((1.0, 1.0))
        }
    }
}

/// `(sqrt(d_model / d_q), sqrt(d_model / d_kv))`.
pub fn mla_scale_factors(d_model: usize, d_q: usize, d_kv: usize) -> Result<(f64, f64)> {
    if d_model == 0 || d_q == 0 || d_kv == 0 {
        return Err(Error::Parameter(format!("zero dimension in ({d_model}, {d_q}, {d_kv})")));
    }
    let d = d_model as f64;
    Ok(((d / d_q as f64).sqrt(), (d / d_kv as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mla {
    pub config: MlaConfig,
    pub alpha_q: f64,
    pub alpha_kv: f64,
    pub w_dq: ParamId,
    pub w_uq: ParamId,
    pub w_qr: ParamId,
    pub w_dkv: ParamId,
    pub w_uk: ParamId,
    pub w_uv: ParamId,
    pub w_kr: ParamId,
    pub w_o: ParamId,
}

/// Intermediate projections of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MlaComponents {
    pub c_q: Var,
    pub c_kv: Var,
    pub q_c: Var,
    /// Rotated.
    pub q_r: Var,
    pub k_c: Var,
    /// Rotated.
    pub k_r: Var,
    pub v: Var,
}

impl Mla {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut RngState,
        init: &InitScheme,
        prefix: &str,
        config: MlaConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (alpha_q, alpha_kv) = config.scale_factors()?;
        let c = &config;
        let h = c.heads;
        let mut add =
            |name: &str, shape: &[usize]| init.add(store, rng, format!("{prefix}.{name}"), shape, ParamClass::Hidden);
        Ok(Self {
            w_dq: add("w_dq", &[c.d_model, c.d_q])?,
            w_uq: add("w_uq", &[c.d_q, h * c.nope_dim])?,
            w_qr: add("w_qr", &[c.d_q, h * c.rope_dim])?,
            w_dkv: add("w_dkv", &[c.d_model, c.d_kv])?,
            w_uk: add("w_uk", &[c.d_kv, h * c.nope_dim])?,
            w_uv: add("w_uv", &[c.d_kv, h * c.value_dim])?,
            w_kr: add("w_kr", &[c.d_model, c.rope_dim])?,
            w_o: add("w_o", &[h * c.value_dim, c.d_model])?,
            config,
            alpha_q,
            alpha_kv,
        })
    }

    pub fn params(&self) -> [ParamId; 8] {
        [self.w_dq, self.w_uq, self.w_qr, self.w_dkv, self.w_uk, self.w_uv, self.w_kr, self.w_o]
    }

    pub fn components(&self, g: &Graph, p: &Bound, h: Var, ctx: &SeqCtx) -> Result<MlaComponents> {
        let c = &self.config;
        let c_q = g.scale(g.matmul(h, p.var(self.w_dq))?, self.alpha_q);
        let c_kv = g.scale(g.matmul(h, p.var(self.w_dkv))?, self.alpha_kv);
        let q_c = g.matmul(c_q, p.var(self.w_uq))?;
        let q_r = g.rope(g.matmul(c_q, p.var(self.w_qr))?, ctx.positions.clone(), c.rope_base, c.rope_dim)?;
        let k_c = g.matmul(c_kv, p.var(self.w_uk))?;
        let k_r = g.rope(g.matmul(h, p.var(self.w_kr))?, ctx.positions.clone(), c.rope_base, c.rope_dim)?;
        let v = g.matmul(c_kv, p.var(self.w_uv))?;
        Ok(MlaComponents { c_q, c_kv, q_c, q_r, k_c, k_r, v })
    }

    /// Causal attention over the rows of `h: [B·S, d_model]`.
    pub fn forward(&self, g: &Graph, p: &Bound, h: Var, ctx: &SeqCtx) -> Result<Var> {
        let shape = g.shape(h);
        if shape.len() != 2 || shape[1] != self.config.d_model || shape[0] != ctx.rows() {
            return Err(Error::Dimension(format!(
                "attention input {shape:?} for {} rows of width {}",
                ctx.rows(),
                self.config.d_model
            )));
        }
        let m = self.components(g, p, h, ctx)?;
        let o = g.latent_attention(m.q_c, m.q_r, m.k_c, m.k_r, m.v, self.config.attention_dims(ctx.seq_len))?;
        g.matmul(o, p.var(self.w_o))
    }

    /// One incremental decoding step using the compressed cache.
    ///
    /// The content key is never materialized: each head's query is absorbed
    /// into the latent space through `W_uk`, and values are read back through
    /// `W_uv` after the attention average.
    pub fn decode_step(
        &self,
        store: &ParamStore,
        h: &[f64],
        position: usize,
        cache: &mut MlaCache,
    ) -> Result<Vec<f64>> {
        let c = &self.config;
        if h.len() != c.d_model {
            return Err(Error::Dimension(format!("input width {} for d_model {}", h.len(), c.d_model)));
        }
        if position != cache.len() {
            return Err(Error::State(format!("position {position} with {} cached entries", cache.len())));
        }
        if cache.ckv.first().is_some_and(|row| row.len() != c.d_kv) {
            return Err(Error::State("cache width does not match d_kv".into()));
        }
        let row = Tensor::new(vec![1, c.d_model], h.to_vec())?;
        let pos = [position as f64];
        let c_q = row.matmul(store.value(self.w_dq))?.scale(self.alpha_q);
        let c_kv = row.matmul(store.value(self.w_dkv))?.scale(self.alpha_kv);
        let q_c = c_q.matmul(store.value(self.w_uq))?;
        let q_r = rope_heads(&c_q.matmul(store.value(self.w_qr))?, &pos, c.rope_base, c.rope_dim, false)?;
        let k_r = rope_heads(&row.matmul(store.value(self.w_kr))?, &pos, c.rope_base, c.rope_dim, false)?;
        cache.ckv.push(c_kv.into_data());
        cache.kr.push(k_r.into_data());

        let w_uk = store.value(self.w_uk);
        let w_uv = store.value(self.w_uv);
        let scale = c.attention_dims(1).scale();
        let mut o = vec![0.0; c.heads * c.value_dim];
        let mut scores = vec![0.0; cache.len()];
        for hd in 0..c.heads {
            let qc_h = &q_c.data()[hd * c.nope_dim..(hd + 1) * c.nope_dim];
            let qr_h = &q_r.data()[hd * c.rope_dim..(hd + 1) * c.rope_dim];
            let absorbed: Vec<f64> =
                (0..c.d_kv).map(|j| dot(qc_h, &w_uk.row(j)[hd * c.nope_dim..(hd + 1) * c.nope_dim])).collect();
            for (s, sc) in scores.iter_mut().enumerate() {
                *sc = (dot(&absorbed, &cache.ckv[s]) + dot(qr_h, &cache.kr[s])) * scale;
            }
            softmax_in_place(&mut scores);
            let mut latent = vec![0.0; c.d_kv];
            for (s, &w) in scores.iter().enumerate() {
                for (l, &x) in latent.iter_mut().zip(&cache.ckv[s]) {
                    *l += w * x;
                }
            }
            for vi in 0..c.value_dim {
                let col = hd * c.value_dim + vi;
                o[col] = (0..c.d_kv).fold(0.0, |a, j| a + latent[j] * w_uv.at(j, col));
            }
        }
        let o = Tensor::new(vec![1, o.len()], o)?;
        Ok(o.matmul(store.value(self.w_o))?.into_data())
    }
}

/// Per-position compressed latent `c_kv` and rotated shared key `k_r`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MlaCache {
    pub ckv: Vec<Vec<f64>>,
    pub kr: Vec<Vec<f64>>,
}

impl MlaCache {
    pub fn len(&self) -> usize {
        self.ckv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ckv.is_empty()
    }

    /// Cached scalars per position.
    pub fn width(&self) -> usize {
        self.ckv.first().map_or(0, |r| r.len()) + self.kr.first().map_or(0, |r| r.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::value;
    use crate::diffcore::{seeded_init, InitDistribution};

    fn config(d_model: usize, d_q: usize, d_kv: usize, heads: usize) -> MlaConfig {
        MlaConfig {
            d_model,
            d_q,
            d_kv,
            heads,
            nope_dim: 4,
            rope_dim: 4,
            value_dim: 4,
            rope_base: 10_000.0,
            scale_correction: true,
        }
    }

    fn build(cfg: MlaConfig, seed: u64) -> (ParamStore, Mla) {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(seed);
        let init = InitScheme::for_width(cfg.d_model);
        let mla = Mla::init(&mut store, &mut rng, &init, "mla", cfg).unwrap();
        (store, mla)
    }

    fn input(rows: usize, d: usize, seed: u64) -> Tensor {
        seeded_init(&[rows, d], InitDistribution::TruncatedNormal, 1.0, &mut RngState::new(seed)).unwrap()
    }

    fn run(store: &ParamStore, mla: &Mla, x: &Tensor, batch: usize, seq: usize) -> Tensor {
        let g = Graph::new();
        let p = Bound::new(&g, store, false);
        let h = g.constant(x.clone());
        let out = mla.forward(&g, &p, h, &SeqCtx::new(batch, seq)).unwrap();
        value(&g, out)
    }

    #[test]
    fn scale_factor_examples() {
        assert_eq!(mla_scale_factors(64, 64, 64).unwrap(), (1.0, 1.0));
        let (q, kv) = mla_scale_factors(6144, 1536, 512).unwrap();
        assert_eq!(q, 2.0);
        assert!((kv - 12f64.sqrt()).abs() < 1e-15);
        assert_eq!(mla_scale_factors(768, 192, 64).unwrap(), (q, kv));
        assert!(matches!(mla_scale_factors(0, 1, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let (mut store, mla) = build(config(32, 8, 4, 2), 0);
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let out = run(&store, &mla, &input(4, 32, 1), 1, 4);
        assert_eq!(out.shape(), &[4, 32]);
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    /// Loop-by-loop recomputation of the whole sequence, no caching and no
    /// fused kernels.
    fn straight_line(store: &ParamStore, mla: &Mla, x: &Tensor) -> Tensor {
        let c = mla.config;
        let w = |id: ParamId| store.value(id).clone();
        let project = |rows: &Tensor, w: &Tensor, s: f64| -> Vec<Vec<f64>> {
            (0..rows.rows())
                .map(|r| {
                    (0..w.cols()).map(|j| s * (0..w.rows()).fold(0.0, |a, i| a + rows.at(r, i) * w.at(i, j))).collect()
                })
                .collect()
        };
        let rotate = |v: &[f64], pos: usize, head_dim: usize| -> Vec<f64> {
            let mut out = v.to_vec();
            for chunk in out.chunks_mut(head_dim) {
                for i in 0..head_dim / 2 {
                    let theta = pos as f64 * c.rope_base.powf(-2.0 * i as f64 / head_dim as f64);
                    let (a, b) = (chunk[2 * i], chunk[2 * i + 1]);
                    chunk[2 * i] = a * theta.cos() - b * theta.sin();
                    chunk[2 * i + 1] = a * theta.sin() + b * theta.cos();
                }
            }
            out
        };
        let t = x.rows();
        let cq = Tensor::from_rows(&project(x, &w(mla.w_dq), mla.alpha_q)).unwrap();
        let ckv = Tensor::from_rows(&project(x, &w(mla.w_dkv), mla.alpha_kv)).unwrap();
        let qc = project(&cq, &w(mla.w_uq), 1.0);
        let qr: Vec<_> =
            project(&cq, &w(mla.w_qr), 1.0).iter().enumerate().map(|(p, r)| rotate(r, p, c.rope_dim)).collect();
        let kc = project(&ckv, &w(mla.w_uk), 1.0);
        let kr: Vec<_> =
            project(x, &w(mla.w_kr), 1.0).iter().enumerate().map(|(p, r)| rotate(r, p, c.rope_dim)).collect();
        let v = project(&ckv, &w(mla.w_uv), 1.0);
        let scale = 1.0 / ((c.nope_dim + c.rope_dim) as f64).sqrt();
        let mut o = vec![vec![0.0; c.heads * c.value_dim]; t];
        for hd in 0..c.heads {
            let n = hd * c.nope_dim..(hd + 1) * c.nope_dim;
            let r = hd * c.rope_dim..(hd + 1) * c.rope_dim;
            for i in 0..t {
                let s: Vec<f64> = (0..=i)
                    .map(|j| {
                        let a: f64 = qc[i][n.clone()].iter().zip(&kc[j][n.clone()]).map(|(x, y)| x * y).sum();
                        let b: f64 = qr[i][r.clone()].iter().zip(&kr[j]).map(|(x, y)| x * y).sum();
                        (a + b) * scale
                    })
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for vi in 0..c.value_dim {
                    let col = hd * c.value_dim + vi;
                    o[i][col] = (0..=i).map(|j| e[j] / z * v[j][col]).sum();
                }
            }
        }
        let o = Tensor::from_rows(&o).unwrap();
        Tensor::from_rows(&project(&o, &w(mla.w_o), 1.0)).unwrap()
    }

    #[test]
    fn matches_straight_line_reference() {
        let (store, mla) = build(config(16, 8, 4, 1), 0);
        let x = input(5, 16, 0);
        let fast = run(&store, &mla, &x, 1, 5);
        let slow = straight_line(&store, &mla, &x);
        let err = fast.sub(&slow).unwrap().max_abs();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn cached_decode_matches_full_forward() {
        let (store, mla) = build(config(32, 8, 4, 2), 3);
        let x = input(6, 32, 4);
        let full = run(&store, &mla, &x, 1, 6);
        let mut cache = MlaCache::default();
        for t in 0..6 {
            let out = mla.decode_step(&store, x.row(t), t, &mut cache).unwrap();
            for (a, b) in out.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-10, "position {t}: {a} vs {b}");
            }
        }
        assert_eq!(cache.width(), 4 + 4);
        let err = mla.decode_step(&store, x.row(0), 2, &mut cache).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn sequences_in_a_batch_are_independent() {
        let (store, mla) = build(config(32, 8, 4, 2), 5);
        let x = input(8, 32, 6);
        let both = run(&store, &mla, &x, 2, 4);
        let second = run(&store, &mla, &x.slice_rows(4, 8).unwrap(), 1, 4);
        assert_eq!(both.slice_rows(4, 8).unwrap(), second);
    }

    fn component_variances(cfg: MlaConfig, tokens: usize) -> [f64; 4] {
        let (store, mla) = build(cfg, 11);
        let x = input(tokens, cfg.d_model, 12);
        let g = Graph::new();
        let p = Bound::new(&g, &store, false);
        let h = g.rms_norm(g.constant(x));
        let m = mla.components(&g, &p, h, &SeqCtx::new(1, tokens)).unwrap();
        [m.q_c, m.q_r, m.k_c, m.k_r]
            .map(|v| g.value(v).data().iter().map(|x| x * x).sum::<f64>() / g.value(v).len() as f64)
    }

    #[test]
    fn variance_alignment_at_init() {
        let on = component_variances(config(384, 96, 32, 2), 256);
        let max = on.iter().cloned().fold(0.0, f64::max);
        let min = on.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max / min < 1.25, "{on:?}");
        let mut off_cfg = config(256, 16, 16, 2);
        off_cfg.scale_correction = false;
        let off = component_variances(off_cfg, 256);
        assert!(off[3] / off[0] >= 4.0, "{off:?}");
    }
}
