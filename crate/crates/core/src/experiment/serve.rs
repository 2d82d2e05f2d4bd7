use std::hash::Hasher;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use super::run::check_model;
use crate::error::{Error, Result};
use crate::federation::Federation;
use crate::nn::ToyTransformer;
use crate::store::{template_hash, TaskKey, TaskStore, TrainedTask};
use crate::task::{evaluate, generate_task, Template};

/// One line of a request file (JSON). The template is either one of the
/// manifest task's naming schemes or an explicit canonical template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRequest {
    pub task_id: String,
    #[serde(default)]
    pub scheme: Option<usize>,
    #[serde(default)]
    pub template: Option<String>,
    /// Data seed for training on a miss; defaults to the manifest seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// One line of the outcome stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeOutcome {
    pub request: usize,
    pub task_id: Option<String>,
    pub template_hash: Option<String>,
    pub cache_hit: bool,
    pub training_steps: usize,
    /// FNV-1a of the coefficient payload bytes.
    pub coefficients_digest: Option<String>,
    pub vector_ref: Option<u64>,
    pub round: Option<u32>,
    pub error: Option<String>,
}

/// Parse a request file: one JSON object per non-blank line. Lines that do
/// not parse are kept as errors so they still get an outcome.
pub fn parse_requests(text: &str) -> Vec<Result<TaskRequest>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn request_template(manifest: &Manifest, request: &TaskRequest) -> Result<Template> {
    let tok = manifest.task.tokenizer()?;
    match (&request.template, request.scheme) {
        (Some(text), None) => Template::parse_canonical(text, &tok),
        (None, scheme) => {
            let scheme = scheme.unwrap_or(manifest.scheme);
            if scheme >= manifest.task.naming_schemes.len() {
                return Err(Error::Config(format!("unknown naming scheme {scheme}")));
            }
            manifest.task.template(scheme, &tok)
        }
        (Some(_), Some(_)) => Err(Error::Config("give either scheme or template, not both".into())),
    }
}

/// Federated stages 1 and 2 for one task; returns what the store keeps and
/// the total number of client calibration steps.
pub fn train_task(
    model: &Arc<ToyTransformer>,
    manifest: &Manifest,
    template: &Template,
    seed: u64,
) -> Result<(TrainedTask, usize)> {
    let spec = manifest.run_task(seed);
    let tok = spec.tokenizer()?;
    let mut data = generate_task(&spec, manifest.n_train, manifest.n_test, 0)?;
    // relabelling under the requested template keeps the inputs and classes
    data.template = template.clone();
    if template.n_classes() != spec.n_classes {
        return Err(Error::Config(format!(
            "template has {} labels for a {}-class task",
            template.n_classes(),
            spec.n_classes
        )));
    }
    let config = crate::federation::FederationConfig {
        seed,
        calibration: crate::calibration::CalibrationConfig {
            seed,
            ..manifest.calibration()
        },
        ..manifest.federation()
    };
    let mut fed = Federation::new(Arc::clone(model), tok, template.clone(), &data.train, config)?;
    let vector = fed.run_stage1().map_err(|e| e.in_phase("stage 1"))?;
    let coeffs = fed.run_stage2(|_, _| Ok(())).map_err(|e| e.in_phase("stage 2"))?;
    let metrics = evaluate(model, Some((&vector, &coeffs)), template, &data.test, manifest.last_position_only)?;
    let steps = fed.clients().iter().map(|c| c.steps()).sum();
    Ok((
        TrainedTask {
            vector,
            coeffs,
            round: manifest.rounds as u32,
            metrics: Some(metrics),
        },
        steps,
    ))
}

fn digest(bytes: &[u8]) -> String {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

fn serve_one(
    model: &Arc<ToyTransformer>,
    manifest: &Manifest,
    store: &mut TaskStore,
    index: usize,
    request: &TaskRequest,
) -> Result<ServeOutcome> {
    let template = request_template(manifest, request)?;
    let key = TaskKey::new(request.task_id.clone(), &template)?;
    let mut steps = 0;
    let (record, hit) = store.lookup_or_train(&key, || {
        let (trained, s) = train_task(model, manifest, &template, request.seed.unwrap_or(manifest.seed))?;
        steps = s;
        Ok(trained)
    })?;
    Ok(ServeOutcome {
        request: index,
        task_id: Some(request.task_id.clone()),
        template_hash: Some(format!("{:016x}", template_hash(&template))),
        cache_hit: hit,
        training_steps: steps,
        coefficients_digest: Some(digest(&record.coeffs.encode()?)),
        vector_ref: Some(record.vector_ref),
        round: Some(record.round),
        error: None,
    })
}

/// Answer requests in order through the store's lookup-or-train path,
/// writing one JSON outcome line per request to `out`. A failing request
/// is reported in its outcome and the loop moves on.
pub fn serve_requests<W: Write>(
    model: &Arc<ToyTransformer>,
    manifest: &Manifest,
    store: &mut TaskStore,
    requests: &[Result<TaskRequest>],
    out: &mut W,
) -> Result<Vec<ServeOutcome>> {
    check_model(model, manifest, &manifest.task.tokenizer()?)?;
    if store.fingerprint() != model.fingerprint() {
        return Err(Error::Config("store is bound to a different model".into()));
    }
    let mut outcomes = Vec::with_capacity(requests.len());
    for (index, request) in requests.iter().enumerate() {
        let outcome = match request {
            Ok(r) => serve_one(model, manifest, store, index, r),
            Err(e) => Err(Error::Config(format!("unparseable request: {e}"))),
        };
        let outcome = outcome.unwrap_or_else(|e| {
            log::error!("request {index}: {e}");
            ServeOutcome {
                request: index,
                task_id: request.as_ref().ok().map(|r| r.task_id.clone()),
                template_hash: None,
                cache_hit: false,
                training_steps: 0,
                coefficients_digest: None,
                vector_ref: None,
                round: None,
                error: Some(e.to_string()),
            }
        });
        serde_json::to_writer(&mut *out, &outcome)?;
        out.write_all(b"\n")?;
        out.flush()?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{pretrain_from_manifest, CorpusConfig};
    use crate::nn::{ModelConfig, PretrainSchedule};

    fn setup() -> (Arc<ToyTransformer>, Manifest) {
        let m = Manifest {
            n_clients: 2,
            rounds: 1,
            local_epochs: 1,
            n_train: 24,
            n_test: 8,
            model: Some(ModelConfig {
                n_layers: 1,
                d_model: 8,
                n_heads: 2,
                ff_dim: 16,
                vocab_size: 96,
                max_seq_len: 48,
                seed: 1,
            }),
            pretrain: PretrainSchedule {
                steps: 2,
                warmup_steps: 1,
                ..Default::default()
            },
            corpus: CorpusConfig { n_docs: 8, doc_len: 48 },
            ..Default::default()
        };
        (Arc::new(pretrain_from_manifest(&m).unwrap().0), m)
    }

    fn requests(text: &str) -> Vec<Result<TaskRequest>> {
        parse_requests(text)
    }

    #[test]
    fn duplicates_hit_and_distinct_templates_miss() {
        let (model, m) = setup();
        let mut store = TaskStore::in_memory(model.fingerprint());
        let reqs = requests(
            "{\"task_id\":\"topic\",\"scheme\":0}\n\n{\"task_id\":\"topic\",\"scheme\":0,\"seed\":5}\n{\"task_id\":\"topic\",\"scheme\":1}\nnot json\n{\"task_id\":\"topic\",\"scheme\":9}\n",
        );
        let mut out = Vec::new();
        let got = serve_requests(&model, &m, &mut store, &reqs, &mut out).unwrap();
        assert_eq!(got.len(), 5);
        assert!(!got[0].cache_hit && got[0].training_steps > 0);
        assert!(got[1].cache_hit && got[1].training_steps == 0);
        assert_eq!(got[0].coefficients_digest, got[1].coefficients_digest);
        assert!(!got[2].cache_hit);
        assert_ne!(got[0].template_hash, got[2].template_hash);
        assert!(got[3].error.is_some() && got[4].error.is_some());
        let lines: Vec<ServeOutcome> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, got);
    }

    #[test]
    fn replay_gives_the_same_stream() {
        let (model, m) = setup();
        let text = "{\"task_id\":\"a\"}\n{\"task_id\":\"b\",\"scheme\":1}\n{\"task_id\":\"a\"}\n";
        let run = || {
            let mut store = TaskStore::in_memory(model.fingerprint());
            let mut out = Vec::new();
            serve_requests(&model, &m, &mut store, &requests(text), &mut out).unwrap();
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn explicit_template_matches_its_scheme() {
        let (model, m) = setup();
        let tok = m.task.tokenizer().unwrap();
        let canonical = m.task.template(1, &tok).unwrap().canonical();
        let text = format!(
            "{{\"task_id\":\"t\",\"scheme\":1}}\n{}\n",
            serde_json::to_string(&TaskRequest {
                task_id: "t".into(),
                scheme: None,
                template: Some(canonical),
                seed: None,
            })
            .unwrap()
        );
        let mut store = TaskStore::in_memory(model.fingerprint());
        let got = serve_requests(&model, &m, &mut store, &requests(&text), &mut Vec::new()).unwrap();
        assert!(got[1].cache_hit, "{got:?}");
    }

    #[test]
    fn store_for_another_model_is_refused() {
        let (model, m) = setup();
        let mut store = TaskStore::in_memory(model.fingerprint() ^ 1);
        assert!(serve_requests(&model, &m, &mut store, &[], &mut Vec::new()).is_err());
    }
}
