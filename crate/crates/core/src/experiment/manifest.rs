use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationConfig, GradMode, Optimizer};
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::injection::Dtype;
use crate::nn::{ModelConfig, PretrainSchedule};
use crate::task::TaskSpec;

/// The four compared methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The frozen model on bare queries.
    ZeroShot,
    /// Demonstrations concatenated in the prompt.
    LocalIcl,
    /// Federated context vector and coefficients.
    IfedIcl,
    /// Each client's own context vector and locally calibrated coefficients.
    LocalOnlyInjection,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::ZeroShot,
        Method::LocalIcl,
        Method::IfedIcl,
        Method::LocalOnlyInjection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero_shot",
            Method::LocalIcl => "local_icl",
            Method::IfedIcl => "ifed_icl",
            Method::LocalOnlyInjection => "local_only_injection",
        }
    }
}

/// Pretraining corpus size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_docs: usize,
    pub doc_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_docs: 4000,
            doc_len: 64,
        }
    }
}

/// A run manifest, read from TOML. Top-level keys configure the federated
/// run; `[model]`, `[task]`, `[pretrain]` and `[corpus]` configure the toy
/// model and its pretraining. `seed` drives the task draw, the partition
/// and calibration; `[task].seed` only drives the pretraining corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    pub n_clients: usize,
    pub alpha: f64,
    pub seed: u64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dtype: Dtype,
    pub quorum: usize,
    pub optimizer: Optimizer,
    pub grad_mode: GradMode,
    pub last_position_only: bool,
    pub cohort_fraction: f64,
    pub weighted: bool,
    pub max_demos: Option<usize>,
    pub n_train: usize,
    pub n_test: usize,
    /// Naming scheme the evaluated task uses.
    pub scheme: usize,
    pub methods: Vec<Method>,
    /// Expected model shape; `None` accepts whatever the checkpoint holds.
    pub model: Option<ModelConfig>,
    pub task: TaskSpec,
    pub pretrain: PretrainSchedule,
    pub corpus: CorpusConfig,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            n_clients: 10,
            alpha: 0.5,
            seed: 0,
            rounds: 10,
            local_epochs: 2,
            learning_rate: 0.05,
            batch_size: 16,
            dtype: Dtype::F32,
            quorum: 1,
            optimizer: Optimizer::GradientDescent,
            grad_mode: GradMode::Reverse,
            last_position_only: false,
            cohort_fraction: 1.0,
            weighted: false,
            max_demos: None,
            n_train: 800,
            n_test: 200,
            scheme: 0,
            methods: Method::ALL.to_vec(),
            model: None,
            task: TaskSpec::default(),
            pretrain: PretrainSchedule::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive and finite, got {}", self.alpha));
        }
        if self.n_train < self.n_clients {
            return bad(format!("{} training examples for {} clients", self.n_train, self.n_clients));
        }
        if self.scheme >= self.task.naming_schemes.len() {
            return bad(format!(
                "scheme {} but the task has {} naming schemes",
                self.scheme,
                self.task.naming_schemes.len()
            ));
        }
        if self.methods.is_empty() {
            return bad("methods must name at least one method".into());
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return bad("methods lists a method twice".into());
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        self.task.validate()?;
        self.federation().validate()
    }

    pub fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            local_epochs: self.local_epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            grad_mode: self.grad_mode,
            last_position_only: self.last_position_only,
            seed: self.seed,
            ..CalibrationConfig::default()
        }
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            n_clients: self.n_clients,
            alpha: self.alpha,
            seed: self.seed,
            rounds: self.rounds,
            quorum: self.quorum,
            cohort_fraction: self.cohort_fraction,
            dtype: self.dtype,
            weighted: self.weighted,
            max_demos: self.max_demos,
            capture: false,
            calibration: self.calibration(),
        }
    }

    /// The model shape pretraining builds: `[model]` if given, else the
    /// default shape.
    pub fn model_config(&self) -> ModelConfig {
        self.model.unwrap_or_default()
    }

    /// Task parameters for one run: the manifest's task with the run seed.
    pub fn run_task(&self, seed: u64) -> TaskSpec {
        TaskSpec {
            seed,
            ..self.task.clone()
        }
    }

    pub fn wants(&self, method: Method) -> bool {
        self.methods.contains(&method)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_manifest_is_the_default() {
        assert_eq!(Manifest::from_toml("").unwrap(), Manifest::default());
    }

    #[test]
    fn toml_roundtrip() {
        let m = Manifest {
            rounds: 3,
            dtype: Dtype::F16,
            methods: vec![Method::IfedIcl, Method::ZeroShot],
            model: Some(ModelConfig::default()),
            ..Default::default()
        };
        assert_eq!(Manifest::from_toml(&m.to_toml().unwrap()).unwrap(), m);
    }

    #[test]
    fn keys_parse() {
        let m = Manifest::from_toml(
            "n_clients = 4\nalpha = 1.5\nseed = 9\nrounds = 2\nlocal_epochs = 3\nlearning_rate = 0.1\n\
             batch_size = 8\ndtype = \"f16\"\nquorum = 2\nmethods = [\"ifed_icl\"]\n[corpus]\nn_docs = 10\n",
        )
        .unwrap();
        assert_eq!((m.n_clients, m.seed, m.rounds, m.quorum), (4, 9, 2, 2));
        assert_eq!(m.dtype, Dtype::F16);
        assert_eq!(m.calibration().local_epochs, 3);
        assert_eq!(m.corpus.n_docs, 10);
        assert_eq!(m.federation().alpha, 1.5);
    }

    #[test]
    fn rejects_bad_manifests() {
        for text in [
            "n_clent = 3",
            "quorum = 11",
            "methods = []",
            "methods = [\"zero_shot\", \"zero_shot\"]",
            "methods = [\"few_shot\"]",
            "scheme = 2",
            "n_train = 5",
            "alpha = -1.0",
            "rounds = \"ten\"",
        ] {
            assert!(
                matches!(Manifest::from_toml(text), Err(Error::Manifest(_) | Error::Config(_))),
                "{text}"
            );
        }
    }
}
