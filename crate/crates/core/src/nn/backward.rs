//! Manual reverse-mode differentiation of the forward pass in `model.rs`.
//!
//! The same sweep produces weight gradients (pretraining) and/or gradients
//! of the four per-layer injection coefficients (calibration). Model
//! weights are treated as constants whenever weight gradients are not
//! requested.

use std::ops::Range;

use super::model::{gelu_grad, ForwardPass, InjectionSite, InjectionTerms, LnCache, Transformer};
use super::scalar::{matmul_a_bt, matmul_at_b_acc, Scalar};
use crate::error::{Error, Result};
use crate::injection::{ContextVector, GradientVector, InjectionCoefficients};

impl<T: Scalar> Transformer<T> {
    /// Back-propagate `dlogits` through a cached pass. Weight gradients are
    /// accumulated into `weight_grads` when given; the coefficient gradient
    /// (`4L` entries) is returned when the pass was injected.
    pub(crate) fn backward(
        &self,
        pass: &ForwardPass<T>,
        dlogits: &[T],
        mut weight_grads: Option<&mut [T]>,
    ) -> Option<Vec<T>> {
        let cfg = self.config();
        let (n, d, ff, v) = (pass.tokens.len(), cfg.d_model, cfg.ff_dim, cfg.vocab_size);
        let heads = cfg.n_heads;
        let w = self.weights();
        let lay = self.layout();
        let mut coeff_grad = pass
            .injection
            .as_ref()
            .map(|_| vec![T::zero(); cfg.n_coefficients()]);

        let mut dln = vec![T::zero(); n * d];
        matmul_a_bt(&mut dln, dlogits, &w[lay.w_head..][..d * v], n, v, d, false);
        if let Some(g) = weight_grads.as_deref_mut() {
            matmul_at_b_acc(&mut g[lay.w_head..][..d * v], &pass.lnf.out, dlogits, n, d, v);
        }
        let mut dx = vec![T::zero(); n * d];
        layer_norm_backward(
            &dln,
            &pass.lnf,
            &w[lay.lnf_gain..][..d],
            &mut dx,
            weight_grads
                .as_deref_mut()
                .map(|g| &mut g[lay.lnf_gain..lay.lnf_gain + 2 * d]),
            n,
            d,
        );

        let mut dmod = vec![T::zero(); n * d];
        let mut dact = vec![T::zero(); n * ff];
        let mut dctx = vec![T::zero(); n * d];
        let mut dqkv = vec![T::zero(); n * 3 * d];

        for (l, off) in lay.layers.iter().enumerate().rev() {
            let cache = &pass.layers[l];

            // MLP branch: r_out = r_mid + λm·m̄ + βm·m  (or + m)
            injected_branch_backward(
                &dx,
                &cache.mlp_out,
                pass.injection.as_ref().map(|inj| (inj, inj.mlp_vec(l, d), 4 * l + 2)),
                coeff_grad.as_deref_mut(),
                &mut dmod,
                d,
            );
            if let Some(g) = weight_grads.as_deref_mut() {
                matmul_at_b_acc(&mut g[off.w_proj..][..ff * d], &cache.fc_act, &dmod, n, ff, d);
                bias_grad(&mut g[off.b_proj..][..d], &dmod);
            }
            matmul_a_bt(&mut dact, &dmod, &w[off.w_proj..][..ff * d], n, d, ff, false);
            for (g, &u) in dact.iter_mut().zip(&cache.fc_pre) {
                *g *= gelu_grad(u);
            }
            if let Some(g) = weight_grads.as_deref_mut() {
                matmul_at_b_acc(&mut g[off.w_fc..][..d * ff], &cache.ln2.out, &dact, n, d, ff);
                bias_grad(&mut g[off.b_fc..][..ff], &dact);
            }
            matmul_a_bt(&mut dln, &dact, &w[off.w_fc..][..d * ff], n, ff, d, false);
            layer_norm_backward(
                &dln,
                &cache.ln2,
                &w[off.ln2_gain..][..d],
                &mut dx,
                weight_grads
                    .as_deref_mut()
                    .map(|g| &mut g[off.ln2_gain..off.ln2_gain + 2 * d]),
                n,
                d,
            );

            // Attention branch: r_mid = r_in + λa·ā + βa·a  (or + a)
            injected_branch_backward(
                &dx,
                &cache.attn_out,
                pass.injection.as_ref().map(|inj| (inj, inj.attn_vec(l, d), 4 * l)),
                coeff_grad.as_deref_mut(),
                &mut dmod,
                d,
            );
            if let Some(g) = weight_grads.as_deref_mut() {
                matmul_at_b_acc(&mut g[off.w_out..][..d * d], &cache.ctx, &dmod, n, d, d);
                bias_grad(&mut g[off.b_out..][..d], &dmod);
            }
            matmul_a_bt(&mut dctx, &dmod, &w[off.w_out..][..d * d], n, d, d, false);
            attention_backward(&dctx, &cache.qkv, &cache.probs, &mut dqkv, n, d, heads);
            if let Some(g) = weight_grads.as_deref_mut() {
                matmul_at_b_acc(&mut g[off.w_qkv..][..d * 3 * d], &cache.ln1.out, &dqkv, n, d, 3 * d);
                bias_grad(&mut g[off.b_qkv..][..3 * d], &dqkv);
            }
            matmul_a_bt(&mut dln, &dqkv, &w[off.w_qkv..][..d * 3 * d], n, 3 * d, d, false);
            layer_norm_backward(
                &dln,
                &cache.ln1,
                &w[off.ln1_gain..][..d],
                &mut dx,
                weight_grads
                    .as_deref_mut()
                    .map(|g| &mut g[off.ln1_gain..off.ln1_gain + 2 * d]),
                n,
                d,
            );
        }

        if let Some(g) = weight_grads {
            for (t, &tok) in pass.tokens.iter().enumerate() {
                let row = &dx[t * d..(t + 1) * d];
                let te = &mut g[lay.tok_emb + tok as usize * d..][..d];
                for (a, &b) in te.iter_mut().zip(row) {
                    *a += b;
                }
                let pe = &mut g[lay.pos_emb + t * d..][..d];
                for (a, &b) in pe.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        coeff_grad
    }

    /// Negative log-likelihood of the answer tokens under the injected
    /// forward pass, and its gradient with respect to the coefficients only.
    ///
    /// `answer_span` indexes `tokens`; the token at position `p` is scored
    /// by the logits at `p - 1`.
    pub fn loss_and_coeff_grad(
        &self,
        tokens: &[u32],
        answer_span: Range<usize>,
        v: &ContextVector,
        coeffs: &InjectionCoefficients,
        site: InjectionSite,
    ) -> Result<(f64, GradientVector)> {
        self.check_tokens(tokens)?;
        check_span(&answer_span, tokens.len())?;
        let terms = InjectionTerms::new(self.config(), v, coeffs, site)?;
        let pass = self.run(tokens, Some(terms));
        let targets: Vec<(usize, u32)> = answer_span.map(|p| (p - 1, tokens[p])).collect();
        let (loss, dlogits) = cross_entropy(&pass.logits, self.config().vocab_size, &targets, T::one());
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("answer loss {loss}")));
        }
        let grad = self
            .backward(&pass, &dlogits, None)
            .expect("injected pass yields coefficient gradients");
        let grad = GradientVector::new(grad.into_iter().map(|g| g.as_f64()).collect())?;
        Ok((loss, grad))
    }

    /// Answer-span loss without gradients.
    pub fn answer_loss(
        &self,
        tokens: &[u32],
        answer_span: Range<usize>,
        v: &ContextVector,
        coeffs: &InjectionCoefficients,
        site: InjectionSite,
    ) -> Result<f64> {
        self.check_tokens(tokens)?;
        check_span(&answer_span, tokens.len())?;
        let logits = self.forward_injected_at(tokens, v, coeffs, site)?;
        let loss: f64 = answer_span
            .map(|p| -log_softmax_at(logits.row(p - 1), tokens[p] as usize))
            .sum();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("answer loss {loss}")));
        }
        Ok(loss)
    }

    /// Mean next-token cross-entropy over a whole sequence; weight gradients
    /// (scaled by `grad_scale`) are accumulated into `grads`.
    pub(crate) fn lm_loss_and_grad(&self, tokens: &[u32], grads: &mut [T], grad_scale: T) -> Result<f64> {
        self.check_tokens(tokens)?;
        if tokens.len() < 2 {
            return Err(Error::Empty("sequence needs at least two tokens"));
        }
        let pass = self.run(tokens, None);
        let targets: Vec<(usize, u32)> = (0..tokens.len() - 1).map(|t| (t, tokens[t + 1])).collect();
        let per = T::one() / T::from_f64(targets.len() as f64);
        let (loss, dlogits) = cross_entropy(
            &pass.logits,
            self.config().vocab_size,
            &targets,
            per * grad_scale,
        );
        self.backward(&pass, &dlogits, Some(grads));
        Ok(loss / targets.len() as f64)
    }

    /// Mean next-token cross-entropy over a whole sequence (no gradients).
    pub fn lm_loss(&self, tokens: &[u32]) -> Result<f64> {
        self.check_tokens(tokens)?;
        if tokens.len() < 2 {
            return Err(Error::Empty("sequence needs at least two tokens"));
        }
        let (logits, _) = self.forward(tokens, false)?;
        let total: f64 = (0..tokens.len() - 1)
            .map(|t| -log_softmax_at(logits.row(t), tokens[t + 1] as usize))
            .sum();
        Ok(total / (tokens.len() - 1) as f64)
    }
}

fn check_span(span: &Range<usize>, len: usize) -> Result<()> {
    if span.is_empty() {
        return Err(Error::Empty("answer span"));
    }
    if span.start == 0 || span.end > len {
        return Err(Error::Shape(format!(
            "answer span {span:?} must lie within 1..={len}"
        )));
    }
    Ok(())
}

/// `log softmax(row)[target]`, accumulated in f64.
pub fn log_softmax_at<T: Scalar>(row: &[T], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
    let z: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
    row[target].as_f64() - max - z.ln()
}

/// Summed cross-entropy over `(row, target)` pairs and the logits gradient,
/// with every row's gradient multiplied by `scale`.
fn cross_entropy<T: Scalar>(logits: &[T], vocab: usize, targets: &[(usize, u32)], scale: T) -> (f64, Vec<T>) {
    let mut dlogits = vec![T::zero(); logits.len()];
    let mut loss = 0.0;
    for &(row_idx, target) in targets {
        let row = &logits[row_idx * vocab..(row_idx + 1) * vocab];
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let drow = &mut dlogits[row_idx * vocab..(row_idx + 1) * vocab];
        let mut z = T::zero();
        for (g, &x) in drow.iter_mut().zip(row) {
            *g = (x - max).exp();
            z += *g;
        }
        for g in drow.iter_mut() {
            *g = *g / z * scale;
        }
        drow[target as usize] -= scale;
        loss += -(row[target as usize] - max).as_f64() + z.as_f64().ln();
    }
    (loss, dlogits)
}

/// Gradient through `r_out = r_in + f(module_out)` where `f` is either the
/// identity or the injected `λ·context + β·module_out`. Writes the gradient
/// reaching the module output into `dmod` and accumulates `∂/∂λ`, `∂/∂β`.
fn injected_branch_backward<T: Scalar>(
    dx: &[T],
    module_out: &[T],
    injection: Option<(&InjectionTerms<T>, &[T], usize)>,
    coeff_grad: Option<&mut [T]>,
    dmod: &mut [T],
    d: usize,
) {
    let Some((inj, context, idx)) = injection else {
        dmod.copy_from_slice(dx);
        return;
    };
    let coeff_grad = coeff_grad.expect("coefficient buffer exists for injected passes");
    let beta = inj.coeffs[idx + 1];
    let (mut dlam, mut dbeta) = (T::zero(), T::zero());
    for (pos, ((g, out), dm)) in dx
        .chunks_exact(d)
        .zip(module_out.chunks_exact(d))
        .zip(dmod.chunks_exact_mut(d))
        .enumerate()
    {
        if inj.site.covers(pos) {
            for i in 0..d {
                dlam += g[i] * context[i];
                dbeta += g[i] * out[i];
                dm[i] = beta * g[i];
            }
        } else {
            dm.copy_from_slice(g);
        }
    }
    coeff_grad[idx] += dlam;
    coeff_grad[idx + 1] += dbeta;
}

fn bias_grad<T: Scalar>(g: &mut [T], rows: &[T]) {
    for row in rows.chunks_exact(g.len()) {
        for (a, &b) in g.iter_mut().zip(row) {
            *a += b;
        }
    }
}

/// Accumulates the input gradient into `dx`; gain/bias gradients go into
/// `gain_bias` (`[gain | bias]`, 2d entries) when present.
fn layer_norm_backward<T: Scalar>(
    dout: &[T],
    cache: &LnCache<T>,
    gain: &[T],
    dx: &mut [T],
    mut gain_bias: Option<&mut [T]>,
    n: usize,
    d: usize,
) {
    let inv_d = T::one() / T::from_f64(d as f64);
    for t in 0..n {
        let dy = &dout[t * d..(t + 1) * d];
        let xh = &cache.xhat[t * d..(t + 1) * d];
        if let Some(gb) = gain_bias.as_deref_mut() {
            let (gg, gb) = gb.split_at_mut(d);
            for i in 0..d {
                gg[i] += dy[i] * xh[i];
                gb[i] += dy[i];
            }
        }
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for i in 0..d {
            let dxh = dy[i] * gain[i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[i];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        let rs = cache.rstd[t];
        let out = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            let dxh = dy[i] * gain[i];
            out[i] += rs * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
}

fn attention_backward<T: Scalar>(
    dctx: &[T],
    qkv: &[T],
    probs: &[T],
    dqkv: &mut [T],
    n: usize,
    d: usize,
    heads: usize,
) {
    let hd = d / heads;
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let stride = 3 * d;
    dqkv.fill(T::zero());
    let mut dp = vec![T::zero(); n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for i in 0..n {
            let p = &probs[(h * n + i) * n..][..n];
            let dc = &dctx[i * d + qo..][..hd];
            let mut dot = T::zero();
            for j in 0..=i {
                let vj = &qkv[j * stride + vo..][..hd];
                let s = dc.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                dp[j] = s;
                dot += p[j] * s;
                let dv = &mut dqkv[j * stride + vo..][..hd];
                for (g, &c) in dv.iter_mut().zip(dc) {
                    *g += p[j] * c;
                }
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == T::zero() {
                    continue;
                }
                for e in 0..hd {
                    let kj = qkv[j * stride + ko + e];
                    let qi = qkv[i * stride + qo + e];
                    dqkv[i * stride + qo + e] += ds * kj;
                    dqkv[j * stride + ko + e] += ds * qi;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::injection::Provenance;
    use crate::nn::{ModelConfig, Param};

    fn model(seed: u64) -> Transformer<f64> {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ff_dim: 12,
            vocab_size: 11,
            max_seq_len: 8,
            seed,
        };
        let mut m = Transformer::<f64>::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..2 {
            for w in m.param_mut(Param::Ln1Gain(l)).unwrap() {
                *w = rng.random_range(0.5..1.5);
            }
            for w in m.param_mut(Param::Ln2Bias(l)).unwrap() {
                *w = rng.random_range(-0.5..0.5);
            }
        }
        m
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn weight_gradients_match_central_differences() {
        for seed in 0..3 {
            let m = model(seed);
            let tokens = [1u32, 4, 7, 2, 9, 3, 3];
            let mut grads = vec![0.0; m.n_params()];
            let loss = m.lm_loss_and_grad(&tokens, &mut grads, 1.0).unwrap();
            assert!((loss - m.lm_loss(&tokens).unwrap()).abs() < 1e-12);

            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let mut worst = 0.0f64;
            for p in m.layout().params() {
                let range = m.layout().range(p);
                for _ in 0..4 {
                    let i = rng.random_range(range.clone());
                    let h = 1e-5;
                    let mut plus = m.clone();
                    plus.weights_mut().unwrap()[i] += h;
                    let mut minus = m.clone();
                    minus.weights_mut().unwrap()[i] -= h;
                    let fd = (plus.lm_loss(&tokens).unwrap() - minus.lm_loss(&tokens).unwrap()) / (2.0 * h);
                    if fd.abs() > 1e-7 || grads[i].abs() > 1e-7 {
                        worst = worst.max(rel(grads[i], fd));
                    }
                }
            }
            assert!(worst < 1e-5, "seed {seed}: worst relative error {worst:e}");
        }
    }

    #[test]
    fn gradient_accumulates_with_scale() {
        let m = model(7);
        let tokens = [1u32, 2, 3, 4];
        let mut once = vec![0.0; m.n_params()];
        m.lm_loss_and_grad(&tokens, &mut once, 1.0).unwrap();
        let mut twice = vec![0.0; m.n_params()];
        m.lm_loss_and_grad(&tokens, &mut twice, 0.5).unwrap();
        m.lm_loss_and_grad(&tokens, &mut twice, 1.5).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn coefficient_gradient_matches_central_differences_at_one_position() {
        let m = model(3);
        let cfg = *m.config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..2 * cfg.n_layers * cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = ContextVector::from_parts(cfg.n_layers, cfg.d_model, data, 1, Provenance::Unspecified).unwrap();
        let k = InjectionCoefficients::from_values((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let tokens = [1u32, 5, 6, 2, 8, 9];
        for site in [InjectionSite::AllPositions, InjectionSite::Position(3)] {
            let (loss, grad) = m.loss_and_coeff_grad(&tokens, 4..6, &v, &k, site).unwrap();
            assert!((loss - m.answer_loss(&tokens, 4..6, &v, &k, site).unwrap()).abs() < 1e-12);
            for i in 0..8 {
                let h = 1e-4f32;
                let shift = |s: f32| {
                    let mut c = k.as_slice().to_vec();
                    c[i] += s;
                    m.answer_loss(&tokens, 4..6, &v, &InjectionCoefficients::from_values(c).unwrap(), site)
                        .unwrap()
                };
                let step = ((k.as_slice()[i] + h) as f64 - (k.as_slice()[i] - h) as f64) / 2.0;
                let fd = (shift(h) - shift(-h)) / (2.0 * step);
                assert!(rel(grad.as_slice()[i], fd) < 1e-5, "{site:?} coefficient {i}");
            }
        }
    }

    #[test]
    fn log_softmax_oracle() {
        let row = [1.0f32, 2.0, 3.0];
        let z: f64 = row.iter().map(|&x| (x as f64).exp()).sum();
        assert!((log_softmax_at(&row, 2) - (3.0 - z.ln())).abs() < 1e-12);
        assert!(log_softmax_at(&[1000.0f32, 0.0], 0).abs() < 1e-12);
    }

    #[test]
    fn bad_spans_are_rejected() {
        let m = model(0);
        let v = ContextVector::zeros(2, 8).unwrap();
        let k = InjectionCoefficients::neutral(2).unwrap();
        for span in [0..1, 2..2, 3..9] {
            assert!(m.loss_and_coeff_grad(&[1, 2, 3], span, &v, &k, InjectionSite::AllPositions).is_err());
        }
        assert!(m.lm_loss(&[1]).is_err());
    }
}
