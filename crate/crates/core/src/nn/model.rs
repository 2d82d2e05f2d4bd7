use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layout::{Param, ParamLayout};
use super::scalar::{matmul, Scalar};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::injection::{ContextVector, InjectionCoefficients};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Frozen-or-trainable decoder-only transformer with pre-layer-norm blocks.
///
/// `T` is the compute precision. Everything outside the gradient oracle
/// uses the `f32` alias [`ToyTransformer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T: Scalar = f32> {
    config: ModelConfig,
    layout: ParamLayout,
    weights: Vec<T>,
    frozen: bool,
}

pub type ToyTransformer = Transformer<f32>;

/// Which positions of a sequence receive the injected residual update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InjectionSite {
    #[default]
    AllPositions,
    /// Inject at a single position; every other position uses the plain
    /// residual update.
    Position(usize),
}

impl InjectionSite {
    #[inline]
    pub fn covers(&self, pos: usize) -> bool {
        match *self {
            InjectionSite::AllPositions => true,
            InjectionSite::Position(p) => p == pos,
        }
    }
}

/// Per-position next-token logits, row-major `[seq_len × vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T = f32> {
    pub seq_len: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Logits<T> {
    pub fn row(&self, pos: usize) -> &[T] {
        &self.data[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub fn last(&self) -> &[T] {
        self.row(self.seq_len - 1)
    }
}

/// Module outputs that were added into the residual stream, per layer and
/// position. Layers and positions are 0-based here.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T = f32> {
    pub n_layers: usize,
    pub seq_len: usize,
    pub d_model: usize,
    mha: Vec<T>,
    mlp: Vec<T>,
}

impl<T> ActivationTrace<T> {
    fn index(&self, layer: usize, pos: usize) -> Range<usize> {
        assert!(layer < self.n_layers && pos < self.seq_len);
        let at = (layer * self.seq_len + pos) * self.d_model;
        at..at + self.d_model
    }

    pub fn mha(&self, layer: usize, pos: usize) -> &[T] {
        &self.mha[self.index(layer, pos)]
    }

    pub fn mlp(&self, layer: usize, pos: usize) -> &[T] {
        &self.mlp[self.index(layer, pos)]
    }
}

/// Context vector and coefficients converted to compute precision.
#[derive(Debug, Clone)]
pub(crate) struct InjectionTerms<T> {
    pub attn: Vec<T>,
    pub mlp: Vec<T>,
    pub coeffs: Vec<T>,
    pub site: InjectionSite,
}

impl<T: Scalar> InjectionTerms<T> {
    pub fn new(
        cfg: &ModelConfig,
        v: &ContextVector,
        coeffs: &InjectionCoefficients,
        site: InjectionSite,
    ) -> Result<Self> {
        if v.n_layers() != cfg.n_layers || v.d_model() != cfg.d_model {
            return Err(Error::Shape(format!(
                "context vector is {}×{} but model is {}×{}",
                v.n_layers(),
                v.d_model(),
                cfg.n_layers,
                cfg.d_model
            )));
        }
        if coeffs.n_layers() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "{} coefficient layers for a {}-layer model",
                coeffs.n_layers(),
                cfg.n_layers
            )));
        }
        Ok(Self {
            attn: v.attn_all().iter().map(|&x| T::from_f32(x)).collect(),
            mlp: v.mlp_all().iter().map(|&x| T::from_f32(x)).collect(),
            coeffs: coeffs.as_slice().iter().map(|&x| T::from_f32(x)).collect(),
            site,
        })
    }

    #[inline]
    pub fn attn_vec(&self, layer: usize, d: usize) -> &[T] {
        &self.attn[layer * d..(layer + 1) * d]
    }

    #[inline]
    pub fn mlp_vec(&self, layer: usize, d: usize) -> &[T] {
        &self.mlp[layer * d..(layer + 1) * d]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
    pub out: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    pub ln1: LnCache<T>,
    pub qkv: Vec<T>,
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
    pub attn_out: Vec<T>,
    pub ln2: LnCache<T>,
    pub fc_pre: Vec<T>,
    pub fc_act: Vec<T>,
    pub mlp_out: Vec<T>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardPass<T> {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerCache<T>>,
    pub lnf: LnCache<T>,
    pub logits: Vec<T>,
    pub injection: Option<InjectionTerms<T>>,
}

/// Build a model with deterministic scaled-uniform weights drawn from
/// `config.seed`.
pub fn init_model(config: ModelConfig) -> Result<ToyTransformer> {
    Transformer::init(config)
}

impl<T: Scalar> Transformer<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut weights = vec![T::zero(); layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for p in layout.params() {
            let range = layout.range(p);
            match layout.fan_in(p) {
                Some(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for w in &mut weights[range] {
                        *w = T::from_f64(rng.random_range(-bound..bound));
                    }
                }
                None if ParamLayout::is_gain(p) => weights[range].fill(T::one()),
                None => {}
            }
        }
        Ok(Self {
            config,
            layout,
            weights,
            frozen: false,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, weights: Vec<T>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if weights.len() != layout.total() {
            return Err(Error::Shape(format!(
                "expected {} weights, got {}",
                layout.total(),
                weights.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            weights,
            frozen,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn param(&self, p: Param) -> &[T] {
        &self.weights[self.layout.range(p)]
    }

    /// Mutable access to one tensor. Fails once the model is frozen.
    pub fn param_mut(&mut self, p: Param) -> Result<&mut [T]> {
        if self.frozen {
            return Err(Error::Config("model is frozen".into()));
        }
        let r = self.layout.range(p);
        Ok(&mut self.weights[r])
    }

    pub(crate) fn weights_mut(&mut self) -> Result<&mut [T]> {
        if self.frozen {
            return Err(Error::Config("model is frozen".into()));
        }
        Ok(&mut self.weights)
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config,
            layout: self.layout.clone(),
            weights: self.weights.iter().map(|w| U::from_f64(w.as_f64())).collect(),
            frozen: self.frozen,
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Plain forward pass; with `capture` the per-layer MHA and MLP outputs
    /// are returned as well.
    pub fn forward(
        &self,
        tokens: &[u32],
        capture: bool,
    ) -> Result<(Logits<T>, Option<ActivationTrace<T>>)> {
        self.check_tokens(tokens)?;
        let pass = self.run(tokens, None);
        let trace = capture.then(|| self.trace_of(&pass));
        Ok((self.logits_of(pass), trace))
    }

    /// Forward pass with the context vector injected at every position.
    pub fn forward_injected(
        &self,
        tokens: &[u32],
        v: &ContextVector,
        coeffs: &InjectionCoefficients,
    ) -> Result<Logits<T>> {
        self.forward_injected_at(tokens, v, coeffs, InjectionSite::AllPositions)
    }

    pub fn forward_injected_at(
        &self,
        tokens: &[u32],
        v: &ContextVector,
        coeffs: &InjectionCoefficients,
        site: InjectionSite,
    ) -> Result<Logits<T>> {
        self.check_tokens(tokens)?;
        let terms = InjectionTerms::new(&self.config, v, coeffs, site)?;
        Ok(self.logits_of(self.run(tokens, Some(terms))))
    }

    fn logits_of(&self, pass: ForwardPass<T>) -> Logits<T> {
        Logits {
            seq_len: pass.tokens.len(),
            vocab: self.config.vocab_size,
            data: pass.logits,
        }
    }

    fn trace_of(&self, pass: &ForwardPass<T>) -> ActivationTrace<T> {
        let mut mha = Vec::with_capacity(self.config.n_layers * pass.tokens.len() * self.config.d_model);
        let mut mlp = Vec::with_capacity(mha.capacity());
        for layer in &pass.layers {
            mha.extend_from_slice(&layer.attn_out);
            mlp.extend_from_slice(&layer.mlp_out);
        }
        ActivationTrace {
            n_layers: self.config.n_layers,
            seq_len: pass.tokens.len(),
            d_model: self.config.d_model,
            mha,
            mlp,
        }
    }

    /// Forward pass keeping every intermediate. Inputs must already be
    /// validated.
    pub(crate) fn run(&self, tokens: &[u32], injection: Option<InjectionTerms<T>>) -> ForwardPass<T> {
        let cfg = &self.config;
        let (n, d, ff, v) = (tokens.len(), cfg.d_model, cfg.ff_dim, cfg.vocab_size);
        let w = &self.weights;
        let lay = &self.layout;

        let mut x = vec![T::zero(); n * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let te = &w[lay.tok_emb + tok as usize * d..][..d];
            let pe = &w[lay.pos_emb + t * d..][..d];
            for ((xi, &a), &b) in x[t * d..(t + 1) * d].iter_mut().zip(te).zip(pe) {
                *xi = a + b;
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, off) in lay.layers.iter().enumerate() {
            let ln1 = layer_norm(&x, &w[off.ln1_gain..][..d], &w[off.ln1_bias..][..d], n, d);

            let mut qkv = vec![T::zero(); n * 3 * d];
            matmul(&mut qkv, &ln1.out, &w[off.w_qkv..][..d * 3 * d], n, d, 3 * d, false);
            add_bias(&mut qkv, &w[off.b_qkv..][..3 * d]);

            let (probs, ctx) = causal_attention(&qkv, n, d, cfg.n_heads);

            let mut attn_out = vec![T::zero(); n * d];
            matmul(&mut attn_out, &ctx, &w[off.w_out..][..d * d], n, d, d, false);
            add_bias(&mut attn_out, &w[off.b_out..][..d]);

            match &injection {
                Some(inj) => {
                    let (lam, beta) = (inj.coeffs[4 * l], inj.coeffs[4 * l + 1]);
                    residual_inject(&mut x, &attn_out, inj.attn_vec(l, d), lam, beta, inj.site, d);
                }
                None => residual_add(&mut x, &attn_out),
            }

            let ln2 = layer_norm(&x, &w[off.ln2_gain..][..d], &w[off.ln2_bias..][..d], n, d);
            let mut fc_pre = vec![T::zero(); n * ff];
            matmul(&mut fc_pre, &ln2.out, &w[off.w_fc..][..d * ff], n, d, ff, false);
            add_bias(&mut fc_pre, &w[off.b_fc..][..ff]);
            let fc_act: Vec<T> = fc_pre.iter().map(|&u| gelu(u)).collect();
            let mut mlp_out = vec![T::zero(); n * d];
            matmul(&mut mlp_out, &fc_act, &w[off.w_proj..][..ff * d], n, ff, d, false);
            add_bias(&mut mlp_out, &w[off.b_proj..][..d]);

            match &injection {
                Some(inj) => {
                    let (lam, beta) = (inj.coeffs[4 * l + 2], inj.coeffs[4 * l + 3]);
                    residual_inject(&mut x, &mlp_out, inj.mlp_vec(l, d), lam, beta, inj.site, d);
                }
                None => residual_add(&mut x, &mlp_out),
            }

            layers.push(LayerCache {
                ln1,
                qkv,
                probs,
                ctx,
                attn_out,
                ln2,
                fc_pre,
                fc_act,
                mlp_out,
            });
        }

        let lnf = layer_norm(&x, &w[lay.lnf_gain..][..d], &w[lay.lnf_bias..][..d], n, d);
        let mut logits = vec![T::zero(); n * v];
        matmul(&mut logits, &lnf.out, &w[lay.w_head..][..d * v], n, d, v, false);

        ForwardPass {
            tokens: tokens.to_vec(),
            layers,
            lnf,
            logits,
            injection,
        }
    }
}

fn add_bias<T: Scalar>(rows: &mut [T], bias: &[T]) {
    for row in rows.chunks_exact_mut(bias.len()) {
        for (r, &b) in row.iter_mut().zip(bias) {
            *r += b;
        }
    }
}

fn residual_add<T: Scalar>(x: &mut [T], delta: &[T]) {
    for (a, &b) in x.iter_mut().zip(delta) {
        *a += b;
    }
}

/// `r ← r + λ·context + β·module_out` at injected positions, the plain
/// `r ← r + module_out` elsewhere.
fn residual_inject<T: Scalar>(
    x: &mut [T],
    module_out: &[T],
    context: &[T],
    lambda: T,
    beta: T,
    site: InjectionSite,
    d: usize,
) {
    for (pos, (row, out)) in x
        .chunks_exact_mut(d)
        .zip(module_out.chunks_exact(d))
        .enumerate()
    {
        if site.covers(pos) {
            for ((r, &o), &c) in row.iter_mut().zip(out).zip(context) {
                *r += lambda * c + beta * o;
            }
        } else {
            for (r, &o) in row.iter_mut().zip(out) {
                *r += o;
            }
        }
    }
}

pub(crate) fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], n: usize, d: usize) -> LnCache<T> {
    let mut xhat = vec![T::zero(); n * d];
    let mut out = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    let inv_d = T::one() / T::from_f64(d as f64);
    let eps = T::from_f64(LN_EPS);
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[t] = rs;
        for i in 0..d {
            let h = (row[i] - mean) * rs;
            xhat[t * d + i] = h;
            out[t * d + i] = h * gain[i] + bias[i];
        }
    }
    LnCache { xhat, rstd, out }
}

/// Multi-head causal self-attention. Returns the softmax probabilities
/// `[heads × n × n]` (zero above the diagonal) and the concatenated
/// per-head context `[n × d]`.
fn causal_attention<T: Scalar>(qkv: &[T], n: usize, d: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let hd = d / heads;
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let stride = 3 * d;
    let mut probs = vec![T::zero(); heads * n * n];
    let mut ctx = vec![T::zero(); n * d];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for i in 0..n {
            let q = &qkv[i * stride + qo..][..hd];
            let p = &mut probs[(h * n + i) * n..][..n];
            let mut max = T::neg_infinity();
            for j in 0..=i {
                let k = &qkv[j * stride + ko..][..hd];
                let s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                p[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut z = T::zero();
            for pj in &mut p[..=i] {
                *pj = (*pj - max).exp();
                z += *pj;
            }
            for pj in &mut p[..=i] {
                *pj /= z;
            }
            let out = &mut ctx[i * d + qo..][..hd];
            for j in 0..=i {
                let vj = &qkv[j * stride + vo..][..hd];
                let pj = p[j];
                for (o, &vv) in out.iter_mut().zip(vj) {
                    *o += pj * vv;
                }
            }
        }
    }
    (probs, ctx)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(u: T) -> T {
    let half = T::from_f64(0.5);
    let inner = T::from_f64(GELU_C) * (u + T::from_f64(GELU_A) * u * u * u);
    half * u * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(u: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * u * u)
}
