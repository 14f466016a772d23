//! A small pre-norm decoder-only transformer with hand-written backprop.
//!
//! Parameters live in one flat vector. They are stored as `f64` but every
//! value written by initialization, the optimizers, or checkpoint loading is
//! representable in `f32`, which makes the 32-bit checkpoint payload exact.
//! All arithmetic runs in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arch {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub context_length: usize,
    /// Hidden size of the feed-forward block; `4 * width` when absent.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
}

impl Arch {
    pub fn hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(4 * self.width)
    }

    /// Number of parameters for a vocabulary of `vocab` tokens, `None` on
    /// arithmetic overflow.
    pub fn param_count(&self, vocab: usize) -> Option<usize> {
        let d = self.width;
        let h = self.hidden();
        let per_layer = d
            .checked_mul(3 * d)?
            .checked_add(d.checked_mul(d)?)?
            .checked_add(d.checked_mul(h)?.checked_mul(2)?)?
            .checked_add(9 * d + h)?;
        vocab
            .checked_mul(d)?
            .checked_add(self.context_length.checked_mul(d)?)?
            .checked_add(self.layers.checked_mul(per_layer)?)?
            .checked_add(2 * d)?
            .checked_add(d.checked_mul(vocab)?)?
            .checked_add(vocab)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.context_length == 0 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.hidden() == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// A named parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<ParamSpec>,
    total: usize,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn new(arch: &Arch, vocab: usize) -> Self {
        let d = arch.width;
        let h = arch.hidden();
        let mut specs = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let at = offset;
            offset += shape.iter().product::<usize>();
            specs.push(ParamSpec { name, shape, offset: at });
            at
        };
        let tok_emb = add("tok_emb".into(), vec![vocab, d]);
        let pos_emb = add("pos_emb".into(), vec![arch.context_length, d]);
        let mut layers = Vec::with_capacity(arch.layers);
        for l in 0..arch.layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            layers.push(LayerOffsets {
                ln1_g: add(p("ln1_g"), vec![d]),
                ln1_b: add(p("ln1_b"), vec![d]),
                w_qkv: add(p("w_qkv"), vec![d, 3 * d]),
                b_qkv: add(p("b_qkv"), vec![3 * d]),
                w_o: add(p("w_o"), vec![d, d]),
                b_o: add(p("b_o"), vec![d]),
                ln2_g: add(p("ln2_g"), vec![d]),
                ln2_b: add(p("ln2_b"), vec![d]),
                w1: add(p("w1"), vec![d, h]),
                b1: add(p("b1"), vec![h]),
                w2: add(p("w2"), vec![h, d]),
                b2: add(p("b2"), vec![d]),
            });
        }
        let lnf_g = add("lnf_g".into(), vec![d]);
        let lnf_b = add("lnf_b".into(), vec![d]);
        let head_w = add("head_w".into(), vec![d, vocab]);
        let head_b = add("head_b".into(), vec![vocab]);
        Layout {
            specs,
            total: offset,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    arch: Arch,
    vocab: Vocabulary,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for PolicyModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.vocab == other.vocab && self.params_bitwise_eq(other)
    }
}

/// Rounds through `f32` so the value survives a 32-bit checkpoint exactly.
#[inline]
pub fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

impl PolicyModel {
    /// Seeded initialization: Gaussian weights scaled by fan-in, unit layer
    /// norm gains, zero biases.
    pub fn init(arch: Arch, vocab: Vocabulary, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch, vocab.len());
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_scale = 1.0 / (2.0 * arch.layers as f64).sqrt();
        for spec in &layout.specs {
            let name = spec.name.rsplit('.').next().unwrap_or(&spec.name);
            let std = match name {
                "tok_emb" | "pos_emb" => 0.3,
                "w_qkv" | "w1" | "head_w" => 1.0 / (spec.shape[0] as f64).sqrt(),
                "w_o" | "w2" => residual_scale / (spec.shape[0] as f64).sqrt(),
                _ => 0.0,
            };
            let slice = &mut params[spec.offset..spec.offset + spec.len()];
            if name.ends_with("_g") {
                slice.fill(1.0);
            } else if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("finite std");
                for v in slice.iter_mut() {
                    *v = to_f32_grid(normal.sample(&mut rng));
                }
            }
        }
        Ok(PolicyModel {
            arch,
            vocab,
            layout,
            params,
        })
    }

    /// Wraps an explicit parameter vector laid out for `arch` and `vocab`.
    pub fn from_params(arch: Arch, vocab: Vocabulary, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch, vocab.len());
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "{} parameters given, architecture needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(PolicyModel {
            arch,
            vocab,
            layout,
            params,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Raw parameter access. Values that are not on the `f32` grid are
    /// rounded when checkpointed.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn params_bitwise_eq(&self, other: &PolicyModel) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.arch.context_length {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                limit: self.arch.context_length,
                record: None,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab.len()) {
            return Err(Error::Precondition(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab.len()
            )));
        }
        Ok(())
    }

    /// Raw output logits at every position of `tokens`.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let weights = vec![1.0; tokens.len()];
        let fwd = self.forward(tokens, &weights, true);
        let v = self.vocab.len();
        Ok(fwd.logits.chunks(v).map(|c| c.to_vec()).collect())
    }

    /// `sum_t w[t] * log p(tokens[t+1] | tokens[..=t])`; `weights` has one
    /// entry per predicted token (`tokens.len() - 1`).
    pub fn weighted_log_prob(&self, tokens: &[TokenId], weights: &[f64]) -> Result<f64> {
        self.check_tokens(tokens)?;
        check_weights(tokens, weights)?;
        let fwd = self.forward(tokens, weights, false);
        Ok(fwd.score)
    }

    /// As [`weighted_log_prob`](Self::weighted_log_prob), also accumulating
    /// `scale * d(score)/d(params)` into `grad`.
    pub fn weighted_log_prob_grad(
        &self,
        tokens: &[TokenId],
        weights: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_tokens(tokens)?;
        check_weights(tokens, weights)?;
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        let fwd = self.forward(tokens, weights, false);
        if scale != 0.0 {
            self.backward(tokens, weights, &fwd, scale, grad);
        }
        Ok(fwd.score)
    }

    // -- forward -----------------------------------------------------------

    fn forward(&self, tokens: &[TokenId], weights: &[f64], all_logits: bool) -> Forward {
        let p = &self.params;
        let a = &self.arch;
        let t_len = tokens.len();
        let d = a.width;
        let hid = a.hidden();
        let v = self.vocab.len();
        let nh = a.heads;
        let dh = d / nh;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = &p[self.layout.tok_emb + tok as usize * d..][..d];
            let pe = &p[self.layout.pos_emb + t * d..][..d];
            for i in 0..d {
                x[t * d + i] = e[i] + pe[i];
            }
        }

        let mut layers = Vec::with_capacity(a.layers);
        for lo in &self.layout.layers {
            let (a_out, ln1) = layer_norm(&x, t_len, d, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d]);
            let mut qkv = vec![0.0; t_len * 3 * d];
            matmul(&a_out, t_len, d, &p[lo.w_qkv..][..d * 3 * d], 3 * d, Some(&p[lo.b_qkv..][..3 * d]), &mut qkv);
            let mut att = vec![0.0; nh * t_len * t_len];
            let mut o = vec![0.0; t_len * d];
            for h in 0..nh {
                for i in 0..t_len {
                    let q = &qkv[i * 3 * d + h * dh..][..dh];
                    let row = &mut att[(h * t_len + i) * t_len..][..t_len];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let k = &qkv[j * 3 * d + d + h * dh..][..dh];
                        let s = dot(q, k) * inv_sqrt;
                        row[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut().take(i + 1) {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    let inv = 1.0 / sum;
                    let out = &mut o[i * d + h * dh..][..dh];
                    for j in 0..=i {
                        row[j] *= inv;
                        let vv = &qkv[j * 3 * d + 2 * d + h * dh..][..dh];
                        axpy(row[j], vv, out);
                    }
                }
            }
            let mut proj = vec![0.0; t_len * d];
            matmul(&o, t_len, d, &p[lo.w_o..][..d * d], d, Some(&p[lo.b_o..][..d]), &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
            let (c, ln2) = layer_norm(&x, t_len, d, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d]);
            let mut h_pre = vec![0.0; t_len * hid];
            matmul(&c, t_len, d, &p[lo.w1..][..d * hid], hid, Some(&p[lo.b1..][..hid]), &mut h_pre);
            let h_act: Vec<f64> = h_pre.iter().map(|&z| gelu(z)).collect();
            let mut m = vec![0.0; t_len * d];
            matmul(&h_act, t_len, hid, &p[lo.w2..][..hid * d], d, Some(&p[lo.b2..][..d]), &mut m);
            for (xi, mi) in x.iter_mut().zip(&m) {
                *xi += mi;
            }
            layers.push(LayerCache {
                ln1,
                a: a_out,
                qkv,
                att,
                o,
                ln2,
                c,
                h_pre,
                h_act,
            });
        }

        let (f, lnf) = layer_norm(&x, t_len, d, &p[self.layout.lnf_g..][..d], &p[self.layout.lnf_b..][..d]);
        let head_w = &p[self.layout.head_w..][..d * v];
        let head_b = &p[self.layout.head_b..][..v];
        let mut logits = vec![0.0; t_len * v];
        let mut score = 0.0;
        for t in 0..t_len {
            let needed = all_logits || (t + 1 < t_len && weights[t] != 0.0);
            if !needed {
                continue;
            }
            let row = &mut logits[t * v..][..v];
            row.copy_from_slice(head_b);
            let ft = &f[t * d..][..d];
            for (k, &fk) in ft.iter().enumerate() {
                axpy(fk, &head_w[k * v..][..v], row);
            }
            if t + 1 < t_len && weights[t] != 0.0 {
                let lse = log_sum_exp(row);
                score += weights[t] * (row[tokens[t + 1] as usize] - lse);
            }
        }
        Forward {
            layers,
            lnf,
            f,
            logits,
            score,
        }
    }

    // -- backward ----------------------------------------------------------

    fn backward(&self, tokens: &[TokenId], weights: &[f64], fwd: &Forward, scale: f64, grad: &mut [f64]) {
        let p = &self.params;
        let a = &self.arch;
        let t_len = tokens.len();
        let d = a.width;
        let hid = a.hidden();
        let v = self.vocab.len();
        let nh = a.heads;
        let dh = d / nh;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let lo_head_w = self.layout.head_w;
        let lo_head_b = self.layout.head_b;

        // d score / d f
        let mut df = vec![0.0; t_len * d];
        let mut dlogit = vec![0.0; v];
        for t in 0..t_len.saturating_sub(1) {
            let w = weights[t];
            if w == 0.0 {
                continue;
            }
            let row = &fwd.logits[t * v..][..v];
            let lse = log_sum_exp(row);
            for (g, &z) in dlogit.iter_mut().zip(row) {
                *g = -(z - lse).exp() * w * scale;
            }
            dlogit[tokens[t + 1] as usize] += w * scale;
            for (gb, &g) in grad[lo_head_b..lo_head_b + v].iter_mut().zip(&dlogit) {
                *gb += g;
            }
            let ft = &fwd.f[t * d..][..d];
            for k in 0..d {
                axpy(ft[k], &dlogit, &mut grad[lo_head_w + k * v..][..v]);
                df[t * d + k] = dot(&p[lo_head_w + k * v..][..v], &dlogit);
            }
        }
        let mut dx = layer_norm_backward(
            &df,
            &fwd.lnf,
            t_len,
            d,
            &p[self.layout.lnf_g..][..d],
            grad,
            self.layout.lnf_g,
            self.layout.lnf_b,
        );

        for (lo, cache) in self.layout.layers.iter().zip(&fwd.layers).rev() {
            // feed-forward block: x_out = x_mid + W2 gelu(W1 LN2(x_mid))
            let dm = &dx;
            let mut dh_act = vec![0.0; t_len * hid];
            matmul_backward(&cache.h_act, t_len, hid, &p[lo.w2..][..hid * d], d, dm, Some(&mut dh_act), grad, lo.w2, Some(lo.b2));
            let dh_pre: Vec<f64> = dh_act
                .iter()
                .zip(&cache.h_pre)
                .map(|(&g, &z)| g * gelu_grad(z))
                .collect();
            let mut dc = vec![0.0; t_len * d];
            matmul_backward(&cache.c, t_len, d, &p[lo.w1..][..d * hid], hid, &dh_pre, Some(&mut dc), grad, lo.w1, Some(lo.b1));
            let dx_mid_ln = layer_norm_backward(&dc, &cache.ln2, t_len, d, &p[lo.ln2_g..][..d], grad, lo.ln2_g, lo.ln2_b);
            let mut dx_mid = dx.clone();
            for (a, b) in dx_mid.iter_mut().zip(&dx_mid_ln) {
                *a += b;
            }

            // attention block: x_mid = x_in + Wo attn(LN1(x_in))
            let mut do_ = vec![0.0; t_len * d];
            matmul_backward(&cache.o, t_len, d, &p[lo.w_o..][..d * d], d, &dx_mid, Some(&mut do_), grad, lo.w_o, Some(lo.b_o));
            let mut dqkv = vec![0.0; t_len * 3 * d];
            let mut dp = vec![0.0; t_len];
            for h in 0..nh {
                for i in 0..t_len {
                    let row = &cache.att[(h * t_len + i) * t_len..][..t_len];
                    let doi = &do_[i * d + h * dh..][..dh];
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        let vv = &cache.qkv[j * 3 * d + 2 * d + h * dh..][..dh];
                        dp[j] = dot(doi, vv);
                        weighted += row[j] * dp[j];
                        // dv_j += p_ij * do_i
                        axpy(row[j], doi, &mut dqkv[j * 3 * d + 2 * d + h * dh..][..dh]);
                    }
                    for j in 0..=i {
                        let ds = row[j] * (dp[j] - weighted) * inv_sqrt;
                        if ds == 0.0 {
                            continue;
                        }
                        let (qi_off, kj_off) = (i * 3 * d + h * dh, j * 3 * d + d + h * dh);
                        for e in 0..dh {
                            let kj = cache.qkv[kj_off + e];
                            let qi = cache.qkv[qi_off + e];
                            dqkv[qi_off + e] += ds * kj;
                            dqkv[kj_off + e] += ds * qi;
                        }
                    }
                }
            }
            let mut da = vec![0.0; t_len * d];
            matmul_backward(&cache.a, t_len, d, &p[lo.w_qkv..][..d * 3 * d], 3 * d, &dqkv, Some(&mut da), grad, lo.w_qkv, Some(lo.b_qkv));
            let dx_in_ln = layer_norm_backward(&da, &cache.ln1, t_len, d, &p[lo.ln1_g..][..d], grad, lo.ln1_g, lo.ln1_b);
            for (a, b) in dx_mid.iter_mut().zip(&dx_in_ln) {
                *a += b;
            }
            dx = dx_mid;
        }

        for (t, &tok) in tokens.iter().enumerate() {
            let g = &dx[t * d..][..d];
            let te = self.layout.tok_emb + tok as usize * d;
            let pe = self.layout.pos_emb + t * d;
            for i in 0..d {
                grad[te + i] += g[i];
                grad[pe + i] += g[i];
            }
        }
    }

    // -- incremental decoding ---------------------------------------------

    /// Feeds one token into a decoding state and returns next-token logits.
    pub(crate) fn step_logits(&self, state: &mut DecodeState, token: TokenId) -> Result<Vec<f64>> {
        let t = state.len;
        if t >= self.arch.context_length {
            return Err(Error::ContextOverflow {
                len: t + 1,
                limit: self.arch.context_length,
                record: None,
            });
        }
        if token as usize >= self.vocab.len() {
            return Err(Error::Precondition(format!("token id {token} outside vocabulary")));
        }
        let p = &self.params;
        let a = &self.arch;
        let d = a.width;
        let hid = a.hidden();
        let v = self.vocab.len();
        let nh = a.heads;
        let dh = d / nh;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let mut x: Vec<f64> = (0..d)
            .map(|i| p[self.layout.tok_emb + token as usize * d + i] + p[self.layout.pos_emb + t * d + i])
            .collect();
        if state.keys.len() < a.layers {
            state.keys.resize(a.layers, Vec::new());
            state.values.resize(a.layers, Vec::new());
        }
        let mut scores = vec![0.0; t + 1];
        for (l, lo) in self.layout.layers.iter().enumerate() {
            let (a_out, _) = layer_norm(&x, 1, d, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d]);
            let mut qkv = vec![0.0; 3 * d];
            matmul(&a_out, 1, d, &p[lo.w_qkv..][..d * 3 * d], 3 * d, Some(&p[lo.b_qkv..][..3 * d]), &mut qkv);
            state.keys[l].extend_from_slice(&qkv[d..2 * d]);
            state.values[l].extend_from_slice(&qkv[2 * d..]);
            let keys = &state.keys[l];
            let values = &state.values[l];
            let mut o = vec![0.0; d];
            for h in 0..nh {
                let q = &qkv[h * dh..][..dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=t {
                    let s = dot(q, &keys[j * d + h * dh..][..dh]) * inv_sqrt;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = 1.0 / sum;
                let out = &mut o[h * dh..][..dh];
                for j in 0..=t {
                    axpy(scores[j] * inv, &values[j * d + h * dh..][..dh], out);
                }
            }
            let mut proj = vec![0.0; d];
            matmul(&o, 1, d, &p[lo.w_o..][..d * d], d, Some(&p[lo.b_o..][..d]), &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
            let (c, _) = layer_norm(&x, 1, d, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d]);
            let mut h_pre = vec![0.0; hid];
            matmul(&c, 1, d, &p[lo.w1..][..d * hid], hid, Some(&p[lo.b1..][..hid]), &mut h_pre);
            for z in h_pre.iter_mut() {
                *z = gelu(*z);
            }
            let mut m = vec![0.0; d];
            matmul(&h_pre, 1, hid, &p[lo.w2..][..hid * d], d, Some(&p[lo.b2..][..d]), &mut m);
            for (xi, mi) in x.iter_mut().zip(&m) {
                *xi += mi;
            }
        }
        let (f, _) = layer_norm(&x, 1, d, &p[self.layout.lnf_g..][..d], &p[self.layout.lnf_b..][..d]);
        let mut logits = p[self.layout.head_b..][..v].to_vec();
        for (k, &fk) in f.iter().enumerate() {
            axpy(fk, &p[self.layout.head_w + k * v..][..v], &mut logits);
        }
        state.len += 1;
        Ok(logits)
    }
}

/// Key/value cache for incremental decoding.
#[derive(Debug, Clone, Default)]
pub struct DecodeState {
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn check_weights(tokens: &[TokenId], weights: &[f64]) -> Result<()> {
    if weights.len() + 1 != tokens.len() && !(tokens.is_empty() && weights.is_empty()) {
        return Err(Error::Precondition(format!(
            "{} weights for {} tokens; expected one per predicted token",
            weights.len(),
            tokens.len()
        )));
    }
    Ok(())
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

struct Forward {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    f: Vec<f64>,
    logits: Vec<f64>,
    score: f64,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[rows x n] = x[rows x m] . w[m x n] + b`
fn matmul(x: &[f64], rows: usize, m: usize, w: &[f64], n: usize, b: Option<&[f64]>, y: &mut [f64]) {
    for r in 0..rows {
        let out = &mut y[r * n..][..n];
        match b {
            Some(b) => out.copy_from_slice(b),
            None => out.fill(0.0),
        }
        let xr = &x[r * m..][..m];
        for (k, &xk) in xr.iter().enumerate() {
            if xk != 0.0 {
                axpy(xk, &w[k * n..][..n], out);
            }
        }
    }
}

/// Accumulates `dW += x^T dy`, `db += sum_rows dy` into `grad` at the given
/// offsets and writes `dx = dy W^T` when requested.
#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    x: &[f64],
    rows: usize,
    m: usize,
    w: &[f64],
    n: usize,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    grad: &mut [f64],
    w_off: usize,
    b_off: Option<usize>,
) {
    for r in 0..rows {
        let dyr = &dy[r * n..][..n];
        let xr = &x[r * m..][..m];
        for (k, &xk) in xr.iter().enumerate() {
            if xk != 0.0 {
                axpy(xk, dyr, &mut grad[w_off + k * n..][..n]);
            }
        }
        if let Some(b) = b_off {
            for (g, &d) in grad[b..b + n].iter_mut().zip(dyr) {
                *g += d;
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = &dy[r * n..][..n];
            for k in 0..m {
                dx[r * m + k] = dot(&w[k * n..][..n], dyr);
            }
        }
    }
}

fn layer_norm(x: &[f64], rows: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..][..d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * g[i] + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    rows: usize,
    d: usize,
    g: &[f64],
    grad: &mut [f64],
    g_off: usize,
    b_off: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..][..d];
        let xh = &cache.xhat[r * d..][..d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            grad[g_off + i] += dyr[i] * xh[i];
            grad[b_off + i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] = rs * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Log-softmax of a logit row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|z| z - lse).collect()
}
