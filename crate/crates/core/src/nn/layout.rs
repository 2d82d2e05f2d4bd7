//! Offsets of every weight tensor inside the flat parameter buffer.
//!
//! The order below is also the on-disk order of checkpoint weights:
//!
//! 1. `tok_emb` `[vocab × d]`, `pos_emb` `[max_seq_len × d]`
//! 2. per layer: `ln1_gain [d]`, `ln1_bias [d]`, `w_qkv [d × 3d]`,
//!    `b_qkv [3d]`, `w_out [d × d]`, `b_out [d]`, `ln2_gain [d]`,
//!    `ln2_bias [d]`, `w_fc [d × ff]`, `b_fc [ff]`, `w_proj [ff × d]`,
//!    `b_proj [d]`
//! 3. `lnf_gain [d]`, `lnf_bias [d]`, `w_head [d × vocab]`
//!
//! Matrices are row-major with the input dimension first, so a row vector
//! `x` maps to `x · W`.

use std::ops::Range;

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    TokEmb,
    PosEmb,
    Ln1Gain(usize),
    Ln1Bias(usize),
    WQkv(usize),
    BQkv(usize),
    WOut(usize),
    BOut(usize),
    Ln2Gain(usize),
    Ln2Bias(usize),
    WFc(usize),
    BFc(usize),
    WProj(usize),
    BProj(usize),
    LnfGain,
    LnfBias,
    WHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    cfg: ModelConfig,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_gain: usize,
    pub(crate) lnf_bias: usize,
    pub(crate) w_head: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let ff = cfg.ff_dim;
        let mut next = 0usize;
        let mut take = |n: usize| {
            let at = next;
            next += n;
            at
        };
        let tok_emb = take(cfg.vocab_size * d);
        let pos_emb = take(cfg.max_seq_len * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerOffsets {
                ln1_gain: take(d),
                ln1_bias: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_out: take(d * d),
                b_out: take(d),
                ln2_gain: take(d),
                ln2_bias: take(d),
                w_fc: take(d * ff),
                b_fc: take(ff),
                w_proj: take(ff * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_gain = take(d);
        let lnf_bias = take(d);
        let w_head = take(d * cfg.vocab_size);
        Self {
            cfg: *cfg,
            tok_emb,
            pos_emb,
            layers,
            lnf_gain,
            lnf_bias,
            w_head,
            total: next,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Element count of one tensor.
    pub fn len_of(&self, p: Param) -> usize {
        let c = &self.cfg;
        let d = c.d_model;
        match p {
            Param::TokEmb => c.vocab_size * d,
            Param::PosEmb => c.max_seq_len * d,
            Param::Ln1Gain(_) | Param::Ln1Bias(_) | Param::Ln2Gain(_) | Param::Ln2Bias(_) => d,
            Param::BOut(_) | Param::BProj(_) | Param::LnfGain | Param::LnfBias => d,
            Param::WQkv(_) => 3 * d * d,
            Param::BQkv(_) => 3 * d,
            Param::WOut(_) => d * d,
            Param::WFc(_) => d * c.ff_dim,
            Param::BFc(_) => c.ff_dim,
            Param::WProj(_) => c.ff_dim * d,
            Param::WHead => d * c.vocab_size,
        }
    }

    pub fn range(&self, p: Param) -> Range<usize> {
        let start = match p {
            Param::TokEmb => self.tok_emb,
            Param::PosEmb => self.pos_emb,
            Param::Ln1Gain(l) => self.layers[l].ln1_gain,
            Param::Ln1Bias(l) => self.layers[l].ln1_bias,
            Param::WQkv(l) => self.layers[l].w_qkv,
            Param::BQkv(l) => self.layers[l].b_qkv,
            Param::WOut(l) => self.layers[l].w_out,
            Param::BOut(l) => self.layers[l].b_out,
            Param::Ln2Gain(l) => self.layers[l].ln2_gain,
            Param::Ln2Bias(l) => self.layers[l].ln2_bias,
            Param::WFc(l) => self.layers[l].w_fc,
            Param::BFc(l) => self.layers[l].b_fc,
            Param::WProj(l) => self.layers[l].w_proj,
            Param::BProj(l) => self.layers[l].b_proj,
            Param::LnfGain => self.lnf_gain,
            Param::LnfBias => self.lnf_bias,
            Param::WHead => self.w_head,
        };
        start..start + self.len_of(p)
    }

    /// All tensors in storage order.
    pub fn params(&self) -> Vec<Param> {
        let mut out = vec![Param::TokEmb, Param::PosEmb];
        for l in 0..self.cfg.n_layers {
            out.extend([
                Param::Ln1Gain(l),
                Param::Ln1Bias(l),
                Param::WQkv(l),
                Param::BQkv(l),
                Param::WOut(l),
                Param::BOut(l),
                Param::Ln2Gain(l),
                Param::Ln2Bias(l),
                Param::WFc(l),
                Param::BFc(l),
                Param::WProj(l),
                Param::BProj(l),
            ]);
        }
        out.extend([Param::LnfGain, Param::LnfBias, Param::WHead]);
        out
    }

    /// Row count used as fan-in for initialisation; `None` for
    /// layer-norm parameters, which start at gain 1 / bias 0.
    pub(crate) fn fan_in(&self, p: Param) -> Option<usize> {
        let c = &self.cfg;
        match p {
            Param::TokEmb | Param::PosEmb => Some(c.d_model),
            Param::WQkv(_) | Param::BQkv(_) | Param::WOut(_) | Param::BOut(_) => Some(c.d_model),
            Param::WFc(_) | Param::BFc(_) | Param::WHead => Some(c.d_model),
            Param::WProj(_) | Param::BProj(_) => Some(c.ff_dim),
            Param::Ln1Gain(_)
            | Param::Ln1Bias(_)
            | Param::Ln2Gain(_)
            | Param::Ln2Bias(_)
            | Param::LnfGain
            | Param::LnfBias => None,
        }
    }

    pub(crate) fn is_gain(p: Param) -> bool {
        matches!(p, Param::Ln1Gain(_) | Param::Ln2Gain(_) | Param::LnfGain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_tile_the_buffer_in_storage_order() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ff_dim: 12,
            vocab_size: 10,
            max_seq_len: 5,
            seed: 0,
        };
        let layout = ParamLayout::new(&cfg);
        let mut cursor = 0;
        for p in layout.params() {
            let r = layout.range(p);
            assert_eq!(r.start, cursor, "{p:?}");
            cursor = r.end;
        }
        assert_eq!(cursor, layout.total());
    }
}
