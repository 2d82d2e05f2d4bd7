use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IFCC_MAGIC: &[u8; 4] = b"IFCC";
const IFCC_VERSION: u8 = 1;
/// Bytes before the coefficient body: magic, version (u8), L (u8).
pub const IFCC_HEADER_LEN: usize = 6;

/// The `4L` injection scalars, stored per layer as
/// `(λ_attn, β_attn, λ_mlp, β_mlp)`.
///
/// `λ` scales the injected context vector, `β` scales the module's own
/// output at the same residual addition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct InjectionCoefficients {
    values: Vec<f32>,
}

impl TryFrom<Vec<f32>> for InjectionCoefficients {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::from_values(values)
    }
}

impl From<InjectionCoefficients> for Vec<f32> {
    fn from(c: InjectionCoefficients) -> Self {
        c.values
    }
}

/// `λ = 0`, `β = 1` on every layer: the injected forward pass equals the
/// plain one.
pub fn neutral_coefficients(n_layers: usize) -> Result<InjectionCoefficients> {
    InjectionCoefficients::neutral(n_layers)
}

impl InjectionCoefficients {
    pub fn neutral(n_layers: usize) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        let values = (0..n_layers).flat_map(|_| [0.0, 1.0, 0.0, 1.0]).collect();
        Ok(Self { values })
    }

    pub fn from_values(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() || !values.len().is_multiple_of(4) {
            return Err(Error::Shape(format!(
                "coefficient count {} is not a positive multiple of 4",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("coefficient {bad}")));
        }
        Ok(Self { values })
    }

    pub fn n_layers(&self) -> usize {
        self.values.len() / 4
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    /// `(λ_attn, β_attn, λ_mlp, β_mlp)` for one layer.
    pub fn layer(&self, l: usize) -> [f32; 4] {
        let s = &self.values[4 * l..4 * l + 4];
        [s[0], s[1], s[2], s[3]]
    }

    /// Serialized length: `6 + 16·L`.
    pub fn encoded_len(&self) -> usize {
        IFCC_HEADER_LEN + 4 * self.values.len()
    }

    /// `"IFCC"`, version u8, L u8, then per layer the quadruple as
    /// little-endian f32.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let layers = u8::try_from(self.n_layers())
            .map_err(|_| Error::Encode(format!("{} layers do not fit in u8", self.n_layers())))?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(IFCC_MAGIC);
        out.push(IFCC_VERSION);
        out.push(layers);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < IFCC_HEADER_LEN || &bytes[..4] != IFCC_MAGIC {
            return Err(Error::decode("IFCC", "missing magic"));
        }
        if bytes[4] != IFCC_VERSION {
            return Err(Error::decode("IFCC", format!("unsupported version {}", bytes[4])));
        }
        let layers = bytes[5] as usize;
        let body = &bytes[IFCC_HEADER_LEN..];
        if layers == 0 || body.len() != 16 * layers {
            return Err(Error::decode(
                "IFCC",
                format!("{} body bytes for {layers} layers", body.len()),
            ));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_values(values).map_err(|e| Error::decode("IFCC", e.to_string()))
    }

    /// Element-wise `self + step·direction`.
    pub fn stepped(&self, direction: &[f64], step: f64) -> Result<Self> {
        if direction.len() != self.values.len() {
            return Err(Error::Shape("step direction length".into()));
        }
        let values = self
            .values
            .iter()
            .zip(direction)
            .map(|(&v, &g)| (v as f64 + step * g) as f32)
            .collect();
        Self::from_values(values)
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Partial derivatives aligned index-for-index with
/// [`InjectionCoefficients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if !values.len().is_multiple_of(4) {
            return Err(Error::Shape("gradient length is not a multiple of 4".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {bad}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(n_layers: usize) -> Self {
        Self(vec![0.0; 4 * n_layers])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradientVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            *a *= s;
        }
    }
}
