use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate_coefficients_weighted, aggregate_context_vectors_weighted};
use super::partition::{partition_dirichlet, PartitionPlan};
use super::wire::{Bus, Message, MessageKind, Payload, Stage, SERVER_ID};
use crate::calibration::{calibrate_local, CalibrationConfig, CalibrationResult};
use crate::error::{Error, Result};
use crate::injection::{
    extract_demonstration_vector, local_context_vector, AdaptedModel, ContextVector, Dtype, InjectionCoefficients,
    Provenance,
};
use crate::nn::ToyTransformer;
use crate::task::{render_demonstration, Example, Rendered, Template, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Federated calibration rounds.
    pub rounds: usize,
    /// Minimum number of clients whose uploads must arrive for a round to
    /// be aggregated.
    pub quorum: usize,
    /// Fraction of clients selected per calibration round.
    pub cohort_fraction: f64,
    /// Wire precision of context vectors.
    pub dtype: Dtype,
    /// Weight client uploads by demonstration count instead of uniformly.
    pub weighted: bool,
    /// Cap on demonstrations per client; `None` uses the whole shard.
    pub max_demos: Option<usize>,
    /// Keep a copy of every serialized message.
    pub capture: bool,
    pub calibration: CalibrationConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n_clients: 10,
            alpha: 0.5,
            seed: 0,
            rounds: 10,
            quorum: 1,
            cohort_fraction: 1.0,
            dtype: Dtype::F32,
            weighted: false,
            max_demos: None,
            capture: false,
            calibration: CalibrationConfig::default(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.n_clients >= SERVER_ID as usize {
            return Err(Error::Config(format!("n_clients {} out of range", self.n_clients)));
        }
        if !(self.cohort_fraction > 0.0 && self.cohort_fraction <= 1.0) {
            return Err(Error::Config("cohort_fraction must lie in (0, 1]".into()));
        }
        if self.quorum > self.n_clients {
            return Err(Error::Config(format!(
                "quorum {} exceeds {} clients",
                self.quorum, self.n_clients
            )));
        }
        if self.rounds > u32::MAX as usize - 1 {
            return Err(Error::Config("too many rounds".into()));
        }
        if self.max_demos == Some(0) {
            return Err(Error::Config("max_demos must be at least 1".into()));
        }
        self.calibration.validate()
    }
}

/// Deterministic seed for one (client, round) pair, independent of which
/// worker thread runs it.
fn stream_seed(base: u64, client: u16, round: u32) -> u64 {
    let mut z = base ^ ((client as u64) << 32 | round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One participant. It only ever holds its own shard.
#[derive(Debug, Clone)]
pub struct Client {
    id: u16,
    shard: Vec<Example>,
    n_demos: usize,
    template: Option<Template>,
    calibration_set: Vec<Rendered>,
    local_vector: Option<ContextVector>,
    global_vector: Option<ContextVector>,
    coeffs: Option<InjectionCoefficients>,
    last_result: Option<CalibrationResult>,
    steps: usize,
    /// Replaces the federation-wide calibration settings for this client.
    pub calibration_override: Option<CalibrationConfig>,
}

impl Client {
    pub fn new(id: u16, shard: Vec<Example>, max_demos: Option<usize>) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Empty("client shard"));
        }
        let n_demos = max_demos.map_or(shard.len(), |m| m.min(shard.len()));
        Ok(Self {
            id,
            shard,
            n_demos,
            template: None,
            calibration_set: Vec::new(),
            local_vector: None,
            global_vector: None,
            coeffs: None,
            last_result: None,
            steps: 0,
            calibration_override: None,
        })
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn shard(&self) -> &[Example] {
        &self.shard
    }

    /// The demonstrations distilled into this client's context vector.
    pub fn demonstrations(&self) -> &[Example] {
        &self.shard[..self.n_demos]
    }

    pub fn local_vector(&self) -> Option<&ContextVector> {
        self.local_vector.as_ref()
    }

    pub fn global_vector(&self) -> Option<&ContextVector> {
        self.global_vector.as_ref()
    }

    pub fn coefficients(&self) -> Option<&InjectionCoefficients> {
        self.coeffs.as_ref()
    }

    pub fn last_calibration(&self) -> Option<&CalibrationResult> {
        self.last_result.as_ref()
    }

    /// Calibration steps run so far in federated rounds.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn receive_template(&mut self, message: &Message, tokenizer: &Tokenizer, max_len: usize) -> Result<()> {
        let Payload::Template(text) = message.decode_payload()? else {
            return Err(Error::decode("IFMS", "expected a template"));
        };
        let template = Template::parse_canonical(&text, tokenizer)?;
        self.calibration_set = self
            .shard
            .iter()
            .map(|e| render_demonstration(&template, e, max_len))
            .collect::<Result<_>>()?;
        self.template = Some(template);
        Ok(())
    }

    fn build_context_vector(&mut self, model: &ToyTransformer) -> Result<ContextVector> {
        let template = self.template.as_ref().ok_or(Error::Empty("client template"))?;
        let demos = self
            .demonstrations()
            .iter()
            .map(|e| extract_demonstration_vector(model, template, e))
            .collect::<Result<Vec<_>>>()?;
        let v = local_context_vector(&demos)?.with_provenance(Provenance::Local {
            client: self.id,
            round: 0,
        });
        self.local_vector = Some(v.clone());
        Ok(v)
    }

    fn receive_global_vector(&mut self, message: &Message) -> Result<()> {
        let Payload::Vector(v) = message.decode_payload()? else {
            return Err(Error::decode("IFMS", "expected a context vector"));
        };
        self.global_vector = Some(v);
        Ok(())
    }

    fn calibration_config(&self, base: &CalibrationConfig, round: u32) -> CalibrationConfig {
        let cfg = self.calibration_override.as_ref().unwrap_or(base);
        CalibrationConfig {
            seed: stream_seed(cfg.seed, self.id, round),
            ..cfg.clone()
        }
    }

    fn calibrate_round(
        &mut self,
        model: &ToyTransformer,
        message: &Message,
        base: &CalibrationConfig,
    ) -> Result<InjectionCoefficients> {
        let Payload::Coefficients(init) = message.decode_payload()? else {
            return Err(Error::decode("IFMS", "expected coefficients"));
        };
        let v = self.global_vector.as_ref().ok_or(Error::Empty("client global vector"))?;
        let cfg = self.calibration_config(base, message.round);
        let result = calibrate_local(model, v, &init, &self.calibration_set, &cfg)?;
        self.steps += result.steps;
        self.coeffs = Some(result.coeffs.clone());
        let coeffs = result.coeffs.clone();
        self.last_result = Some(result);
        Ok(coeffs)
    }

    fn local_only(
        &self,
        model: &ToyTransformer,
        base: &CalibrationConfig,
        rounds: usize,
    ) -> Result<LocalOnlyClient> {
        let v = self.local_vector.as_ref().ok_or(Error::Empty("client local vector"))?;
        let mut coeffs = InjectionCoefficients::neutral(v.n_layers())?;
        let mut per_round = Vec::with_capacity(rounds);
        let mut steps = 0;
        for t in 1..=rounds as u32 {
            let cfg = self.calibration_config(base, t);
            let r = calibrate_local(model, v, &coeffs, &self.calibration_set, &cfg)?;
            steps += r.steps;
            coeffs = r.coeffs;
            per_round.push(coeffs.clone());
        }
        Ok(LocalOnlyClient {
            client: self.id,
            per_round,
            steps,
        })
    }
}

/// Outcome of one federated calibration round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub cohort: Vec<u16>,
    pub reported: Vec<u16>,
    /// Cohort members whose calibration diverged.
    pub excluded: Vec<u16>,
    pub coeffs: InjectionCoefficients,
}

/// Central coordinator: picks cohorts, gathers uploads behind a barrier and
/// averages them in client-id order.
#[derive(Debug, Clone)]
pub struct Server {
    template: Template,
    quorum: usize,
    weighted: bool,
    cohort_fraction: f64,
    rng: ChaCha8Rng,
    global_vector: Option<ContextVector>,
    global_coeffs: Option<InjectionCoefficients>,
    history: Vec<RoundSummary>,
}

impl Server {
    pub fn new(template: Template, config: &FederationConfig) -> Self {
        Self {
            template,
            quorum: config.quorum,
            weighted: config.weighted,
            cohort_fraction: config.cohort_fraction,
            rng: ChaCha8Rng::seed_from_u64(stream_seed(config.seed, SERVER_ID, 0)),
            global_vector: None,
            global_coeffs: None,
            history: Vec::new(),
        }
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn global_vector(&self) -> Option<&ContextVector> {
        self.global_vector.as_ref()
    }

    pub fn global_coefficients(&self) -> Option<&InjectionCoefficients> {
        self.global_coeffs.as_ref()
    }

    pub fn history(&self) -> &[RoundSummary] {
        &self.history
    }

    fn select_cohort(&mut self, ids: &[u16]) -> Vec<u16> {
        if self.cohort_fraction >= 1.0 {
            return ids.to_vec();
        }
        let size = ((ids.len() as f64 * self.cohort_fraction).ceil() as usize).clamp(1, ids.len());
        let mut picked: Vec<u16> = sample(&mut self.rng, ids.len(), size).into_iter().map(|i| ids[i]).collect();
        picked.sort_unstable();
        picked
    }

    /// Barrier check: every cohort member either reported or was excluded,
    /// and at least `quorum` reported.
    pub fn check_barrier<T>(
        &self,
        round: u32,
        cohort: &[u16],
        uploads: &BTreeMap<u16, T>,
        excluded: &[u16],
    ) -> Result<()> {
        let expected: BTreeSet<u16> = cohort.iter().copied().collect();
        let mut seen: BTreeSet<u16> = uploads.keys().copied().collect();
        for id in excluded {
            if !seen.insert(*id) {
                return Err(Error::Config(format!("client {id} both reported and was excluded")));
            }
        }
        if seen != expected {
            return Err(Error::Config(format!(
                "round {round}: cohort {expected:?} but heard from {seen:?}"
            )));
        }
        let required = self.quorum.max(1);
        if uploads.len() < required {
            return Err(Error::Quorum {
                round,
                reported: uploads.len(),
                required,
            });
        }
        Ok(())
    }

    fn weights(&self, counts: impl Iterator<Item = f64>) -> Vec<f64> {
        counts.map(|c| if self.weighted { c } else { 1.0 }).collect()
    }
}

/// Per-client coefficients from calibrating against the client's own
/// context vector only, snapshotted after each round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalOnlyClient {
    pub client: u16,
    pub per_round: Vec<InjectionCoefficients>,
    pub steps: usize,
}

/// The protocol driver: a server, its clients and the bus between them.
/// Client work runs on the current rayon pool.
#[derive(Debug)]
pub struct Federation {
    model: Arc<ToyTransformer>,
    tokenizer: Tokenizer,
    config: FederationConfig,
    server: Server,
    clients: Vec<Client>,
    bus: Bus,
    partition: Option<PartitionPlan>,
}

impl Federation {
    /// Split `train` across clients with a Dirichlet label partition.
    pub fn new(
        model: Arc<ToyTransformer>,
        tokenizer: Tokenizer,
        template: Template,
        train: &[Example],
        config: FederationConfig,
    ) -> Result<Self> {
        config.validate()?;
        let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
        let plan = partition_dirichlet(&labels, config.n_clients, config.alpha, config.seed)?;
        let shards = plan
            .shards()
            .into_iter()
            .map(|idx| idx.into_iter().map(|i| train[i].clone()).collect())
            .collect();
        let mut fed = Self::from_shards(model, tokenizer, template, shards, config)?;
        fed.partition = Some(plan);
        Ok(fed)
    }

    /// Clients with explicitly given shards; client `k` gets id `k`.
    pub fn from_shards(
        model: Arc<ToyTransformer>,
        tokenizer: Tokenizer,
        template: Template,
        shards: Vec<Vec<Example>>,
        config: FederationConfig,
    ) -> Result<Self> {
        let config = FederationConfig {
            n_clients: shards.len(),
            ..config
        };
        config.validate()?;
        if !model.is_frozen() {
            return Err(Error::Config("federation requires a frozen model".into()));
        }
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(k, shard)| Client::new(k as u16, shard, config.max_demos))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            tokenizer,
            server: Server::new(template, &config),
            bus: Bus::new(config.capture),
            config,
            clients,
            partition: None,
        })
    }

    pub fn model(&self) -> &Arc<ToyTransformer> {
        &self.model
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn clients_mut(&mut self) -> &mut [Client] {
        &mut self.clients
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn partition(&self) -> Option<&PartitionPlan> {
        self.partition.as_ref()
    }

    fn client_ids(&self) -> Vec<u16> {
        self.clients.iter().map(|c| c.id).collect()
    }

    /// Distribute the template, collect every client's context vector and
    /// average them into the global vector.
    pub fn run_stage1(&mut self) -> Result<ContextVector> {
        let text = self.server.template.canonical();
        let max_len = self.model.config().max_seq_len;
        for client in &mut self.clients {
            let delivered = self.bus.transmit(Stage::ContextVectors, client.id, &Message::template(0, &text))?;
            client.receive_template(&delivered, &self.tokenizer, max_len)?;
        }

        let model = &self.model;
        let results: Vec<Result<ContextVector>> = self
            .clients
            .par_iter_mut()
            .map(|c| c.build_context_vector(model))
            .collect();

        let mut uploads = BTreeMap::new();
        let mut excluded = Vec::new();
        for (client, result) in self.clients.iter().zip(results) {
            match result {
                Ok(v) => {
                    let message = Message::vector(
                        MessageKind::ContextVectorUpload,
                        0,
                        client.id,
                        v.encode(self.config.dtype)?,
                    );
                    let delivered = self.bus.transmit(Stage::ContextVectors, client.id, &message)?;
                    let Payload::Vector(v) = delivered.decode_payload()? else {
                        unreachable!("upload kind decodes to a vector")
                    };
                    uploads.insert(client.id, v);
                }
                Err(Error::NonFinite(msg)) => {
                    log::warn!("client {} excluded from stage 1: {msg}", client.id);
                    excluded.push(client.id);
                }
                Err(e) => return Err(e),
            }
        }
        self.server.check_barrier(0, &self.client_ids(), &uploads, &excluded)?;
        let vectors: Vec<ContextVector> = uploads.into_values().collect();
        let weights = self.server.weights(vectors.iter().map(|v| v.count() as f64));
        let global = aggregate_context_vectors_weighted(&vectors, &weights, 0)?;
        // hold exactly what the clients will decode
        let global = ContextVector::decode(&global.encode(self.config.dtype)?, Provenance::Global { round: 0 })?;
        self.server.global_vector = Some(global.clone());
        Ok(global)
    }

    /// Federated coefficient calibration. `on_round` sees the global
    /// coefficients after each round's aggregation.
    pub fn run_stage2<F>(&mut self, mut on_round: F) -> Result<InjectionCoefficients>
    where
        F: FnMut(u32, &InjectionCoefficients) -> Result<()>,
    {
        let global_vector = self
            .server
            .global_vector
            .clone()
            .ok_or(Error::Config("stage 2 needs the stage 1 global vector".into()))?;
        let vector_message = Message::vector(
            MessageKind::GlobalContextVector,
            0,
            SERVER_ID,
            global_vector.encode(self.config.dtype)?,
        );
        for client in &mut self.clients {
            let delivered = self.bus.transmit(Stage::Calibration, client.id, &vector_message)?;
            client.receive_global_vector(&delivered)?;
        }

        let mut global = InjectionCoefficients::neutral(self.model.config().n_layers)?;
        let ids = self.client_ids();
        for t in 1..=self.config.rounds as u32 {
            let cohort = self.server.select_cohort(&ids);
            let outgoing = Message::vector(MessageKind::GlobalCoefficients, t, SERVER_ID, global.encode()?);
            let mut inbox: BTreeMap<u16, Message> = BTreeMap::new();
            for &id in &cohort {
                inbox.insert(id, self.bus.transmit(Stage::Calibration, id, &outgoing)?);
            }

            let model = &self.model;
            let base = &self.config.calibration;
            let results: Vec<(u16, Result<InjectionCoefficients>)> = self
                .clients
                .par_iter_mut()
                .filter_map(|c| inbox.get(&c.id).map(|m| (c, m)))
                .map(|(c, m)| (c.id, c.calibrate_round(model, m, base)))
                .collect();

            let mut uploads = BTreeMap::new();
            let mut excluded = Vec::new();
            for (id, result) in results {
                match result {
                    Ok(coeffs) => {
                        let message = Message::vector(MessageKind::CoefficientUpload, t, id, coeffs.encode()?);
                        let delivered = self.bus.transmit(Stage::Calibration, id, &message)?;
                        let Payload::Coefficients(c) = delivered.decode_payload()? else {
                            unreachable!("upload kind decodes to coefficients")
                        };
                        uploads.insert(id, c);
                    }
                    Err(Error::NonFinite(msg)) => {
                        log::warn!("round {t}: client {id} excluded: {msg}");
                        excluded.push(id);
                    }
                    Err(e) => return Err(e),
                }
            }
            self.server.check_barrier(t, &cohort, &uploads, &excluded)?;
            let counts: Vec<f64> = uploads
                .keys()
                .map(|id| self.clients[*id as usize].shard.len() as f64)
                .collect();
            let reported: Vec<u16> = uploads.keys().copied().collect();
            let sets: Vec<InjectionCoefficients> = uploads.into_values().collect();
            global = aggregate_coefficients_weighted(&sets, &self.server.weights(counts.into_iter()))?;
            self.server.history.push(RoundSummary {
                round: t,
                cohort,
                reported,
                excluded,
                coeffs: global.clone(),
            });
            on_round(t, &global)?;
        }
        self.server.global_coeffs = Some(global.clone());
        Ok(global)
    }

    /// Send the final coefficients to every client; each builds its
    /// adapted inference handle from what it received.
    pub fn run_stage3(&mut self) -> Result<Vec<AdaptedModel>> {
        let coeffs = self
            .server
            .global_coeffs
            .clone()
            .ok_or(Error::Config("stage 3 needs stage 2 coefficients".into()))?;
        let message = Message::vector(
            MessageKind::GlobalCoefficients,
            self.config.rounds as u32,
            SERVER_ID,
            coeffs.encode()?,
        );
        let mut handles = Vec::with_capacity(self.clients.len());
        for client in &mut self.clients {
            let delivered = self.bus.transmit(Stage::Deployment, client.id, &message)?;
            let Payload::Coefficients(received) = delivered.decode_payload()? else {
                unreachable!("coefficient kind decodes to coefficients")
            };
            let v = client.global_vector.clone().ok_or(Error::Empty("client global vector"))?;
            client.coeffs = Some(received.clone());
            handles.push(AdaptedModel::new(
                Arc::clone(&self.model),
                v,
                received,
                self.config.calibration.last_position_only,
            )?);
        }
        Ok(handles)
    }

    /// Each client calibrates against its own context vector, never
    /// exchanging coefficients, for the same rounds and seeds as the
    /// federated run.
    pub fn run_local_only_baseline(&self) -> Result<Vec<LocalOnlyClient>> {
        let model = &self.model;
        let base = &self.config.calibration;
        let rounds = self.config.rounds;
        self.clients.par_iter().map(|c| c.local_only(model, base, rounds)).collect()
    }
}
