use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ToyTransformer;
use crate::task::{render_demonstration, Example, Template};

const IFCV_MAGIC: &[u8; 4] = b"IFCV";
const IFCV_VERSION: u16 = 1;
/// magic(4) version(u16) dtype(u8) L(u16) d_model(u16) count(u16)
pub const IFCV_HEADER_LEN: usize = 13;

/// Storage precision of context-vector payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F16,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F16),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Unspecified,
    Local { client: u16, round: u32 },
    Global { round: u32 },
}

/// MHA and MLP activations of one rendered demonstration, one
/// `d_model` vector of each per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DemonstrationVector {
    n_layers: usize,
    d_model: usize,
    // attention block for layers 0..L, then MLP block for layers 0..L
    data: Vec<f32>,
}

impl DemonstrationVector {
    pub fn new(n_layers: usize, d_model: usize, attn: Vec<f32>, mlp: Vec<f32>) -> Result<Self> {
        let want = n_layers * d_model;
        if n_layers == 0 || d_model == 0 || attn.len() != want || mlp.len() != want {
            return Err(Error::Shape(format!(
                "demonstration vector blocks of {} and {} for {n_layers}×{d_model}",
                attn.len(),
                mlp.len()
            )));
        }
        let mut data = attn;
        data.extend(mlp);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("demonstration activation".into()));
        }
        Ok(Self {
            n_layers,
            d_model,
            data,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn attn(&self, layer: usize) -> &[f32] {
        &self.data[layer * self.d_model..(layer + 1) * self.d_model]
    }

    pub fn mlp(&self, layer: usize) -> &[f32] {
        let base = self.n_layers * self.d_model;
        &self.data[base + layer * self.d_model..base + (layer + 1) * self.d_model]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Mean of demonstration vectors: local to one client, or the server-side
/// global average.
///
/// Immutable once built; every constructor validates shape and finiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector {
    n_layers: usize,
    d_model: usize,
    data: Vec<f32>,
    count: u32,
    provenance: Provenance,
}

impl ContextVector {
    pub fn from_parts(
        n_layers: usize,
        d_model: usize,
        data: Vec<f32>,
        count: u32,
        provenance: Provenance,
    ) -> Result<Self> {
        if n_layers == 0 || d_model == 0 || data.len() != 2 * n_layers * d_model {
            return Err(Error::Shape(format!(
                "{} values for a 2×{n_layers}×{d_model} context vector",
                data.len()
            )));
        }
        if count == 0 {
            return Err(Error::Config("context vector count must be at least 1".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("context vector value".into()));
        }
        Ok(Self {
            n_layers,
            d_model,
            data,
            count,
            provenance,
        })
    }

    /// All-zero vector, mostly useful in tests.
    pub fn zeros(n_layers: usize, d_model: usize) -> Result<Self> {
        Self::from_parts(
            n_layers,
            d_model,
            vec![0.0; 2 * n_layers * d_model],
            1,
            Provenance::Unspecified,
        )
    }

    pub fn with_provenance(self, provenance: Provenance) -> Self {
        Self { provenance, ..self }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Flattened values: attention block then MLP block, layer-major.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn attn_all(&self) -> &[f32] {
        &self.data[..self.n_layers * self.d_model]
    }

    pub fn mlp_all(&self) -> &[f32] {
        &self.data[self.n_layers * self.d_model..]
    }

    pub fn attn(&self, layer: usize) -> &[f32] {
        &self.attn_all()[layer * self.d_model..(layer + 1) * self.d_model]
    }

    pub fn mlp(&self, layer: usize) -> &[f32] {
        &self.mlp_all()[layer * self.d_model..(layer + 1) * self.d_model]
    }

    pub fn same_shape(&self, other: &ContextVector) -> bool {
        self.n_layers == other.n_layers && self.d_model == other.d_model
    }

    /// `13 + 2·L·d_model·width(dtype)` bytes.
    pub fn encoded_len(&self, dtype: Dtype) -> usize {
        IFCV_HEADER_LEN + self.data.len() * dtype.width()
    }

    /// `"IFCV"`, version u16, dtype u8, L u16, d_model u16, count u16, then
    /// the attention vectors for layers 1..L followed by the MLP vectors,
    /// little-endian.
    pub fn encode(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let layers = u16::try_from(self.n_layers)
            .map_err(|_| Error::Encode("n_layers exceeds u16".into()))?;
        let width = u16::try_from(self.d_model)
            .map_err(|_| Error::Encode("d_model exceeds u16".into()))?;
        let count = u16::try_from(self.count)
            .map_err(|_| Error::Encode(format!("count {} exceeds u16", self.count)))?;
        let mut out = Vec::with_capacity(self.encoded_len(dtype));
        out.extend_from_slice(IFCV_MAGIC);
        out.extend_from_slice(&IFCV_VERSION.to_le_bytes());
        out.push(dtype.code());
        out.extend_from_slice(&layers.to_le_bytes());
        out.extend_from_slice(&width.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        match dtype {
            Dtype::F32 => self.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F16 => self
                .data
                .iter()
                .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], provenance: Provenance) -> Result<Self> {
        if bytes.len() < IFCV_HEADER_LEN || &bytes[..4] != IFCV_MAGIC {
            return Err(Error::decode("IFCV", "missing magic"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let version = u16_at(4);
        if version != IFCV_VERSION {
            return Err(Error::decode("IFCV", format!("unsupported version {version}")));
        }
        let dtype = Dtype::from_code(bytes[6])
            .ok_or_else(|| Error::decode("IFCV", format!("unknown dtype {}", bytes[6])))?;
        let n_layers = u16_at(7) as usize;
        let d_model = u16_at(9) as usize;
        let count = u16_at(11) as u32;
        let body = &bytes[IFCV_HEADER_LEN..];
        let n_values = 2 * n_layers * d_model;
        if body.len() != n_values * dtype.width() {
            return Err(Error::decode(
                "IFCV",
                format!("{} body bytes for {n_values} values of {dtype:?}", body.len()),
            ));
        }
        let data = match dtype {
            Dtype::F32 => body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => body
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        };
        Self::from_parts(n_layers, d_model, data, count, provenance)
            .map_err(|e| Error::decode("IFCV", e.to_string()))
    }
}

/// Run the model over one rendered demonstration and keep, per layer, the
/// MHA and MLP outputs at the final token.
pub fn extract_demonstration_vector(
    model: &ToyTransformer,
    template: &Template,
    example: &Example,
) -> Result<DemonstrationVector> {
    let rendered = render_demonstration(template, example, model.config().max_seq_len)?;
    let (_, trace) = model.forward(&rendered.tokens, true)?;
    let trace = trace.expect("capture requested");
    let last = rendered.tokens.len() - 1;
    let cfg = model.config();
    let mut attn = Vec::with_capacity(cfg.n_layers * cfg.d_model);
    let mut mlp = Vec::with_capacity(cfg.n_layers * cfg.d_model);
    for l in 0..cfg.n_layers {
        attn.extend_from_slice(trace.mha(l, last));
        mlp.extend_from_slice(trace.mlp(l, last));
    }
    DemonstrationVector::new(cfg.n_layers, cfg.d_model, attn, mlp)
}

/// Unweighted element-wise mean of a client's demonstration vectors.
pub fn local_context_vector(demos: &[DemonstrationVector]) -> Result<ContextVector> {
    let first = demos.first().ok_or(Error::Empty("demonstration list"))?;
    let (l, d) = (first.n_layers, first.d_model);
    let mut acc = vec![0.0f64; first.data.len()];
    for demo in demos {
        if demo.n_layers != l || demo.d_model != d {
            return Err(Error::Shape(format!(
                "demonstration {}×{} among {l}×{d}",
                demo.n_layers, demo.d_model
            )));
        }
        for (a, &v) in acc.iter_mut().zip(&demo.data) {
            *a += v as f64;
        }
    }
    let n = demos.len() as f64;
    let count = u32::try_from(demos.len()).map_err(|_| Error::Config("too many demonstrations".into()))?;
    ContextVector::from_parts(
        l,
        d,
        acc.into_iter().map(|a| (a / n) as f32).collect(),
        count,
        Provenance::Unspecified,
    )
}
