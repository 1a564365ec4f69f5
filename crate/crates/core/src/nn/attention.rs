//! Scaled dot-product multi-head attention and the three token-mixing modes
//! used to integrate expert outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::ops::{self, matmul_acc, matmul_at_acc, matmul_bt_acc};
use crate::nn::{Module, Parameter, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct MultiHeadAttention<S> {
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub heads: usize,
}

pub struct AttentionCache<S> {
    q_in: Tensor<S>,
    k_in: Tensor<S>,
    v_in: Tensor<S>,
    q: Tensor<S>,
    k: Tensor<S>,
    v: Tensor<S>,
    /// `[heads × nq × nk]`, rows sum to one.
    pub weights: Tensor<S>,
    concat: Tensor<S>,
}

pub struct AttentionGrads<S> {
    pub dq_in: Tensor<S>,
    pub dk_in: Tensor<S>,
    pub dv_in: Tensor<S>,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidHeads { dim, heads });
        }
        Ok(Self {
            wq: Linear::new(&format!("{name}.wq"), dim, dim, true, rng),
            wk: Linear::new(&format!("{name}.wk"), dim, dim, true, rng),
            wv: Linear::new(&format!("{name}.wv"), dim, dim, true, rng),
            wo: Linear::new(&format!("{name}.wo"), dim, dim, true, rng),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.out_dim()
    }

    /// `q_in: [nq × d]`, `k_in`, `v_in: [nk × d]` → `[nq × d]`.
    pub fn forward(
        &self,
        q_in: &Tensor<S>,
        k_in: &Tensor<S>,
        v_in: &Tensor<S>,
    ) -> Result<(Tensor<S>, AttentionCache<S>)> {
        let d = self.dim();
        for t in [q_in, k_in, v_in] {
            if t.shape().len() != 2 || t.shape()[1] != d {
                return Err(Error::shape("multi_head_attention", t.shape(), &[t.rows(), d]));
            }
        }
        if k_in.rows() != v_in.rows() {
            return Err(Error::shape("multi_head_attention", k_in.shape(), v_in.shape()));
        }
        let (nq, nk, h) = (q_in.rows(), k_in.rows(), self.heads);
        let dh = d / h;
        let q = self.wq.forward(q_in)?;
        let k = self.wk.forward(k_in)?;
        let v = self.wv.forward(v_in)?;
        let scale = S::one() / S::of(dh as f64).sqrt();

        let mut weights = vec![S::zero(); h * nq * nk];
        let mut concat = vec![S::zero(); nq * d];
        let mut qh = vec![S::zero(); nq * dh];
        let mut kh = vec![S::zero(); nk * dh];
        let mut vh = vec![S::zero(); nk * dh];
        let mut oh = vec![S::zero(); nq * dh];
        for head in 0..h {
            gather_head(q.data(), &mut qh, nq, d, head, dh);
            gather_head(k.data(), &mut kh, nk, d, head, dh);
            gather_head(v.data(), &mut vh, nk, d, head, dh);
            let a = &mut weights[head * nq * nk..(head + 1) * nq * nk];
            matmul_bt_acc(&qh, &kh, a, nq, dh, nk);
            a.iter_mut().for_each(|s| *s *= scale);
            let mut at = Tensor::from_vec(&[nq, nk], a.to_vec())?;
            at = ops::softmax(&at);
            a.copy_from_slice(at.data());
            oh.iter_mut().for_each(|x| *x = S::zero());
            matmul_acc(a, &vh, &mut oh, nq, nk, dh);
            scatter_head(&oh, &mut concat, nq, d, head, dh, false);
        }
        let concat = Tensor::from_vec(&[nq, d], concat)?;
        let out = self.wo.forward(&concat)?;
        let cache = AttentionCache {
            q_in: q_in.clone(),
            k_in: k_in.clone(),
            v_in: v_in.clone(),
            q,
            k,
            v,
            weights: Tensor::from_vec(&[h, nq, nk], weights)?,
            concat,
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: &AttentionCache<S>, dy: &Tensor<S>) -> AttentionGrads<S> {
        let d = self.dim();
        let h = self.heads;
        let dh = d / h;
        let (nq, nk) = (cache.q_in.rows(), cache.k_in.rows());
        let scale = S::one() / S::of(dh as f64).sqrt();
        let dconcat = self.wo.backward(&cache.concat, dy);

        let mut dq = vec![S::zero(); nq * d];
        let mut dk = vec![S::zero(); nk * d];
        let mut dv = vec![S::zero(); nk * d];
        let mut qh = vec![S::zero(); nq * dh];
        let mut kh = vec![S::zero(); nk * dh];
        let mut vh = vec![S::zero(); nk * dh];
        let mut doh = vec![S::zero(); nq * dh];
        for head in 0..h {
            gather_head(cache.q.data(), &mut qh, nq, d, head, dh);
            gather_head(cache.k.data(), &mut kh, nk, d, head, dh);
            gather_head(cache.v.data(), &mut vh, nk, d, head, dh);
            gather_head(dconcat.data(), &mut doh, nq, d, head, dh);
            let a = &cache.weights.data()[head * nq * nk..(head + 1) * nq * nk];

            let mut da = vec![S::zero(); nq * nk];
            matmul_bt_acc(&doh, &vh, &mut da, nq, dh, nk);
            let mut dvh = vec![S::zero(); nk * dh];
            matmul_at_acc(a, &doh, &mut dvh, nq, nk, dh);
            let at = Tensor::from_vec(&[nq, nk], a.to_vec()).expect("attn shape");
            let dat = Tensor::from_vec(&[nq, nk], da).expect("attn shape");
            let mut ds = ops::softmax_backward(&at, &dat).into_data();
            ds.iter_mut().for_each(|s| *s *= scale);
            let mut dqh = vec![S::zero(); nq * dh];
            matmul_acc(&ds, &kh, &mut dqh, nq, nk, dh);
            let mut dkh = vec![S::zero(); nk * dh];
            matmul_at_acc(&ds, &qh, &mut dkh, nq, nk, dh);

            scatter_head(&dqh, &mut dq, nq, d, head, dh, true);
            scatter_head(&dkh, &mut dk, nk, d, head, dh, true);
            scatter_head(&dvh, &mut dv, nk, d, head, dh, true);
        }
        let dq = Tensor::from_vec(&[nq, d], dq).expect("dq");
        let dk = Tensor::from_vec(&[nk, d], dk).expect("dk");
        let dv = Tensor::from_vec(&[nk, d], dv).expect("dv");
        AttentionGrads {
            dq_in: self.wq.backward(&cache.q_in, &dq),
            dk_in: self.wk.backward(&cache.k_in, &dk),
            dv_in: self.wv.backward(&cache.v_in, &dv),
        }
    }
}

fn gather_head<S: Scalar>(src: &[S], dst: &mut [S], n: usize, d: usize, head: usize, dh: usize) {
    for i in 0..n {
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[i * d + head * dh..i * d + (head + 1) * dh]);
    }
}

fn scatter_head<S: Scalar>(src: &[S], dst: &mut [S], n: usize, d: usize, head: usize, dh: usize, add: bool) {
    for i in 0..n {
        let out = &mut dst[i * d + head * dh..i * d + (head + 1) * dh];
        let inp = &src[i * dh..(i + 1) * dh];
        if add {
            for (o, &v) in out.iter_mut().zip(inp) {
                *o += v;
            }
        } else {
            out.copy_from_slice(inp);
        }
    }
}

impl<S: Scalar> Module<S> for MultiHeadAttention<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            l.collect_params(out);
        }
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        for l in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo] {
            l.collect_params_mut(out);
        }
    }
}

/// How a token sequence and a summary query are mixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Residual self-attention over the tokens, then mean over tokens.
    #[serde(rename = "self")]
    SelfAttention,
    /// The query attends over the tokens (residual on the query).
    Cross,
    /// Self-attention over the tokens, then the query attends over the
    /// self-attended tokens.
    Hybrid,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::SelfAttention => "self",
            AttentionMode::Cross => "cross",
            AttentionMode::Hybrid => "hybrid",
        }
    }
}

/// Attention weights captured from one attention stage.
#[derive(Clone, Debug)]
pub struct AttentionMap<S> {
    pub stage: &'static str,
    /// `[heads × nq × nk]`
    pub weights: Tensor<S>,
}

/// Token mixer implementing all three [`AttentionMode`]s with one pair of
/// attention blocks; modes that do not use a block leave it untouched.
#[derive(Clone, Debug)]
pub struct TokenMixer<S> {
    pub mode: AttentionMode,
    pub self_attn: MultiHeadAttention<S>,
    pub cross_attn: MultiHeadAttention<S>,
}

pub struct MixerCache<S> {
    n_tokens: usize,
    self_cache: Option<AttentionCache<S>>,
    cross_cache: Option<AttentionCache<S>>,
}

impl<S: Scalar> MixerCache<S> {
    pub fn attention_maps(&self) -> Vec<AttentionMap<S>> {
        let mut maps = Vec::new();
        if let Some(c) = &self.self_cache {
            maps.push(AttentionMap {
                stage: "self",
                weights: c.weights.clone(),
            });
        }
        if let Some(c) = &self.cross_cache {
            maps.push(AttentionMap {
                stage: "cross",
                weights: c.weights.clone(),
            });
        }
        maps
    }
}

impl<S: Scalar> TokenMixer<S> {
    pub fn new<R: Rng + ?Sized>(name: &str, mode: AttentionMode, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mode,
            self_attn: MultiHeadAttention::new(&format!("{name}.self"), dim, heads, rng)?,
            cross_attn: MultiHeadAttention::new(&format!("{name}.cross"), dim, heads, rng)?,
        })
    }

    /// `tokens: [n × d]`, `query: [1 × d]` → pooled `[d]`.
    pub fn forward(&self, tokens: &Tensor<S>, query: &Tensor<S>) -> Result<(Tensor<S>, MixerCache<S>)> {
        let n = tokens.rows();
        match self.mode {
            AttentionMode::SelfAttention => {
                let (a, c) = self.self_attn.forward(tokens, tokens, tokens)?;
                let mut h = a;
                h.add_assign(tokens);
                Ok((
                    ops::mean_rows(&h),
                    MixerCache {
                        n_tokens: n,
                        self_cache: Some(c),
                        cross_cache: None,
                    },
                ))
            }
            AttentionMode::Cross => {
                let (a, c) = self.cross_attn.forward(query, tokens, tokens)?;
                let mut h = a;
                h.add_assign(query);
                Ok((
                    Tensor::vector(h.into_data()),
                    MixerCache {
                        n_tokens: n,
                        self_cache: None,
                        cross_cache: Some(c),
                    },
                ))
            }
            AttentionMode::Hybrid => {
                let (a, sc) = self.self_attn.forward(tokens, tokens, tokens)?;
                let mut s = a;
                s.add_assign(tokens);
                let (b, cc) = self.cross_attn.forward(query, &s, &s)?;
                let mut h = b;
                h.add_assign(query);
                Ok((
                    Tensor::vector(h.into_data()),
                    MixerCache {
                        n_tokens: n,
                        self_cache: Some(sc),
                        cross_cache: Some(cc),
                    },
                ))
            }
        }
    }

    /// Returns `(dL/dtokens, dL/dquery)`.
    pub fn backward(&mut self, cache: &MixerCache<S>, dout: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        let d = dout.len();
        let n = cache.n_tokens;
        match self.mode {
            AttentionMode::SelfAttention => {
                let dh = ops::mean_rows_backward(n, dout);
                let g = self.self_attn.backward(cache.self_cache.as_ref().expect("self cache"), &dh);
                let mut dt = dh;
                dt.add_assign(&g.dq_in);
                dt.add_assign(&g.dk_in);
                dt.add_assign(&g.dv_in);
                (dt, Tensor::zeros(&[1, d]))
            }
            AttentionMode::Cross => {
                let dh = dout.clone().reshape(&[1, d]).expect("query grad");
                let g = self.cross_attn.backward(cache.cross_cache.as_ref().expect("cross cache"), &dh);
                let mut dq = dh;
                dq.add_assign(&g.dq_in);
                let mut dt = g.dk_in;
                dt.add_assign(&g.dv_in);
                (dt, dq)
            }
            AttentionMode::Hybrid => {
                let dh = dout.clone().reshape(&[1, d]).expect("query grad");
                let g = self.cross_attn.backward(cache.cross_cache.as_ref().expect("cross cache"), &dh);
                let mut dq = dh;
                dq.add_assign(&g.dq_in);
                let mut ds = g.dk_in;
                ds.add_assign(&g.dv_in);
                let gs = self.self_attn.backward(cache.self_cache.as_ref().expect("self cache"), &ds);
                let mut dt = ds;
                dt.add_assign(&gs.dq_in);
                dt.add_assign(&gs.dk_in);
                dt.add_assign(&gs.dv_in);
                (dt, dq)
            }
        }
    }
}

impl<S: Scalar> Module<S> for TokenMixer<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        self.self_attn.collect_params(out);
        self.cross_attn.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        self.self_attn.collect_params_mut(out);
        self.cross_attn.collect_params_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::uniform(shape, 1.0, rng)
    }

    #[test]
    fn single_token_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::<f64>::new("a", 8, 2, &mut rng).unwrap();
        let x = rand_tensor(&[1, 8], &mut rng);
        let (y, cache) = mha.forward(&x, &x, &x).unwrap();
        assert!(cache.weights.data().iter().all(|&w| (w - 1.0).abs() < 1e-15));
        let v = mha.wv.forward(&x).unwrap();
        let expected = mha.wo.forward(&v).unwrap();
        assert!(y.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn key_permutation_permutes_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mha = MultiHeadAttention::<f64>::new("a", 8, 2, &mut rng).unwrap();
        let q = rand_tensor(&[3, 8], &mut rng);
        let kv = rand_tensor(&[4, 8], &mut rng);
        let perm = [2usize, 0, 3, 1];
        let rows: Vec<&[f64]> = perm.iter().map(|&i| kv.row(i)).collect();
        let kv_p = Tensor::stack_rows(&rows).unwrap();
        let (y, c) = mha.forward(&q, &kv, &kv).unwrap();
        let (yp, cp) = mha.forward(&q, &kv_p, &kv_p).unwrap();
        assert!(y.max_abs_diff(&yp) < 1e-12);
        for h in 0..2 {
            for i in 0..3 {
                for (j, &pj) in perm.iter().enumerate() {
                    let a = c.weights.data()[(h * 3 + i) * 4 + pj];
                    let b = cp.weights.data()[(h * 3 + i) * 4 + j];
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mha = MultiHeadAttention::<f64>::new("a", 12, 3, &mut rng).unwrap();
        let x = rand_tensor(&[5, 12], &mut rng);
        let (_, c) = mha.forward(&x, &x, &x).unwrap();
        for row in c.weights.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            MultiHeadAttention::<f64>::new("a", 10, 3, &mut rng),
            Err(Error::InvalidHeads { dim: 10, heads: 3 })
        ));
    }
}
