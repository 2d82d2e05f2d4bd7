use std::collections::BTreeMap;
use std::hash::Hasher;
use std::sync::Arc;
use std::time::Instant;

use super::manifest::{Manifest, Method};
use super::report::{
    ClientScore, ClientSummary, CommSummary, ExperimentReport, MethodResult, PretrainSummary, RoundRecord,
    SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::federation::{Federation, FederationConfig};
use crate::injection::{ContextVector, InjectionCoefficients};
use crate::nn::{init_model, pretrain, ToyTransformer};
use crate::task::{
    build_corpus, evaluate, evaluate_with, generate_task, render_icl_prompt, render_query, Metrics,
    TaskData, Tokenizer,
};

/// Execution knobs that must not change any result.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; `0` lets rayon decide.
    pub threads: usize,
    /// Keep every serialized message on the bus.
    pub capture: bool,
}

/// Run `f` on a dedicated rayon pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Build the corpus the manifest describes and pretrain a fresh model on it.
pub fn pretrain_from_manifest(manifest: &Manifest) -> Result<(ToyTransformer, PretrainSummary)> {
    let config = manifest.model_config();
    let tokenizer = manifest.task.tokenizer()?;
    if tokenizer.len() > config.vocab_size {
        return Err(Error::Config(format!(
            "task vocabulary of {} does not fit vocab_size {}",
            tokenizer.len(),
            config.vocab_size
        )));
    }
    let start = Instant::now();
    let corpus = build_corpus(&manifest.task, manifest.corpus.n_docs, manifest.corpus.doc_len, config.max_seq_len)
        .map_err(|e| e.in_phase("corpus"))?;
    let model = init_model(config)?;
    let n_params = model.n_params();
    let (model, report) = pretrain(model, &corpus, &manifest.pretrain).map_err(|e| e.in_phase("pretrain"))?;
    let summary = PretrainSummary {
        model_fingerprint: format!("{:016x}", model.fingerprint()),
        n_params,
        corpus_docs: corpus.len(),
        seconds: start.elapsed().as_secs_f64(),
        report,
    };
    Ok((model, summary))
}

/// The checkpoint must be frozen, match the manifest's `[model]` table when
/// one is given, and cover the task vocabulary.
pub fn check_model(model: &ToyTransformer, manifest: &Manifest, tokenizer: &Tokenizer) -> Result<()> {
    if let Some(expected) = &manifest.model {
        if expected != model.config() {
            return Err(Error::Config(format!(
                "checkpoint {:016x} has shape {:?}, manifest expects {:?}",
                model.fingerprint(),
                model.config(),
                expected
            )));
        }
    }
    if tokenizer.len() > model.config().vocab_size {
        return Err(Error::Config(format!(
            "task vocabulary of {} exceeds the model's {}",
            tokenizer.len(),
            model.config().vocab_size
        )));
    }
    if !model.is_frozen() {
        return Err(Error::Config("experiments need a frozen model".into()));
    }
    Ok(())
}

/// A completed run with the federation that produced it, for callers that
/// want to inspect clients or captured traffic.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: ExperimentReport,
    pub federation: Federation,
    pub data: TaskData,
}

/// Run every method the manifest names on one shared test set.
pub fn run_experiment(model: Arc<ToyTransformer>, manifest: &Manifest, options: RunOptions) -> Result<RunOutcome> {
    with_threads(options.threads, || run_in_pool(model, manifest, options))?
}

struct Clock(BTreeMap<String, f64>);

impl Clock {
    fn time<R>(&mut self, phase: &str, f: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let r = f();
        *self.0.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64();
        r
    }

    fn get(&self, phase: &str) -> f64 {
        self.0.get(phase).copied().unwrap_or(0.0)
    }
}

fn run_in_pool(model: Arc<ToyTransformer>, manifest: &Manifest, options: RunOptions) -> Result<RunOutcome> {
    manifest.validate()?;
    let mut clock = Clock(BTreeMap::new());
    let spec = manifest.run_task(manifest.seed);
    let tokenizer = spec.tokenizer()?;
    check_model(&model, manifest, &tokenizer).map_err(|e| e.in_phase("checkpoint"))?;

    let data = clock
        .time("task", || generate_task(&spec, manifest.n_train, manifest.n_test, manifest.scheme))
        .map_err(|e| e.in_phase("task"))?;
    let template = data.template.clone();
    let test = &data.test;
    let config = FederationConfig {
        capture: options.capture,
        ..manifest.federation()
    };
    let mut fed = clock
        .time("partition", || {
            Federation::new(Arc::clone(&model), tokenizer, template.clone(), &data.train, config)
        })
        .map_err(|e| e.in_phase("partition"))?;
    let last = manifest.last_position_only;
    let mut methods = BTreeMap::new();

    if manifest.wants(Method::ZeroShot) {
        let m = clock
            .time("zero_shot", || evaluate(&model, None, &template, test, last))
            .map_err(|e| e.in_phase("zero-shot evaluation"))?;
        methods.insert(Method::ZeroShot, result(m, clock.get("zero_shot")));
    }

    if manifest.wants(Method::LocalIcl) {
        let max_len = model.config().max_seq_len;
        let clients = fed.clients();
        let m = clock
            .time("local_icl", || {
                evaluate_with(&template, test, |i, e| {
                    let demos = clients[i % clients.len()].demonstrations();
                    let prompt = render_icl_prompt(&template, demos, &e.input, max_len)?;
                    Ok(model.forward(&prompt, false)?.0.last().to_vec())
                })
            })
            .map_err(|e| e.in_phase("local ICL evaluation"))?;
        methods.insert(Method::LocalIcl, result(m, clock.get("local_icl")));
    }

    let needs_federation = manifest.wants(Method::IfedIcl) || manifest.wants(Method::LocalOnlyInjection);
    let mut rounds = Vec::new();
    let mut final_coefficients = InjectionCoefficients::neutral(model.config().n_layers)?;
    if needs_federation {
        let global = clock.time("stage1", || fed.run_stage1()).map_err(|e| e.in_phase("stage 1"))?;

        if manifest.wants(Method::IfedIcl) {
            let mut per_round: Vec<(u32, Metrics)> = Vec::new();
            let mut eval_seconds = 0.0;
            let coeffs = clock
                .time("stage2", || {
                    fed.run_stage2(|t, c| {
                        let start = Instant::now();
                        let m = evaluate(&model, Some((&global, c)), &template, test, last)?;
                        eval_seconds += start.elapsed().as_secs_f64();
                        per_round.push((t, m));
                        Ok(())
                    })
                })
                .map_err(|e| e.in_phase("stage 2"))?;
            *clock.0.entry("stage2".into()).or_default() -= eval_seconds;
            clock.0.insert("round_evaluation".into(), eval_seconds);

            let handles = clock.time("stage3", || fed.run_stage3()).map_err(|e| e.in_phase("stage 3"))?;
            let m = clock
                .time("ifed_icl_evaluation", || {
                    evaluate_with(&template, test, |i, e| {
                        let handle = &handles[i % handles.len()];
                        Ok(handle.logits(&render_query(&template, &e.input))?.last().to_vec())
                    })
                })
                .map_err(|e| e.in_phase("IFed-ICL evaluation"))?;
            let seconds =
                clock.get("stage1") + clock.get("stage2") + clock.get("stage3") + clock.get("ifed_icl_evaluation");
            methods.insert(Method::IfedIcl, result(m, seconds));
            final_coefficients = coeffs;

            for ((t, global), summary) in per_round.into_iter().zip(fed.server().history()) {
                debug_assert_eq!(t, summary.round);
                rounds.push(RoundRecord {
                    round: t,
                    global: Some(global),
                    local: Vec::new(),
                    reported: summary.reported.clone(),
                    excluded: summary.excluded.clone(),
                });
            }
        }

        if manifest.wants(Method::LocalOnlyInjection) {
            let start = Instant::now();
            let local = fed.run_local_only_baseline().map_err(|e| e.in_phase("local-only calibration"))?;
            let mut last_round = Vec::with_capacity(local.len());
            let mut series: Vec<Vec<ClientScore>> = vec![Vec::new(); manifest.rounds];
            for (client, baseline) in fed.clients().iter().zip(&local) {
                let v: &ContextVector = client.local_vector().ok_or(Error::Empty("client local vector"))?;
                for (t, coeffs) in baseline.per_round.iter().enumerate() {
                    let m = evaluate(&model, Some((v, coeffs)), &template, test, last)
                        .map_err(|e| e.in_phase("local-only evaluation"))?;
                    series[t].push(ClientScore {
                        client: client.id(),
                        accuracy: m.accuracy,
                        macro_f1: m.macro_f1,
                    });
                    if t + 1 == baseline.per_round.len() {
                        last_round.push(m);
                    }
                }
                if baseline.per_round.is_empty() {
                    let neutral = InjectionCoefficients::neutral(v.n_layers())?;
                    last_round.push(evaluate(&model, Some((v, &neutral)), &template, test, last)?);
                }
            }
            let seconds = start.elapsed().as_secs_f64();
            clock.0.insert("local_only_injection".into(), seconds);
            methods.insert(Method::LocalOnlyInjection, result(mean_metrics(&last_round)?, seconds));
            if rounds.is_empty() {
                rounds = (1..=manifest.rounds as u32)
                    .map(|t| RoundRecord {
                        round: t,
                        global: None,
                        local: Vec::new(),
                        reported: Vec::new(),
                        excluded: Vec::new(),
                    })
                    .collect();
            }
            for (record, scores) in rounds.iter_mut().zip(series) {
                record.local = scores;
            }
        }
    }

    for &m in &manifest.methods {
        if !methods.contains_key(&m) {
            return Err(Error::Manifest(format!("method {} produced no result", m.name())));
        }
    }

    let clients = fed
        .clients()
        .iter()
        .map(|c| {
            let mut class_counts = vec![0; template.n_classes()];
            for e in c.shard() {
                class_counts[e.label] += 1;
            }
            ClientSummary {
                client: c.id(),
                shard_size: c.shard().len(),
                demonstrations: c.demonstrations().len(),
                class_counts,
                calibration_steps: c.steps(),
            }
        })
        .collect();

    let report = ExperimentReport {
        schema_version: SCHEMA_VERSION,
        run_id: run_id(manifest, model.fingerprint())?,
        seed: manifest.seed,
        threads: rayon::current_num_threads(),
        model_fingerprint: format!("{:016x}", model.fingerprint()),
        manifest: manifest.clone(),
        methods,
        rounds,
        final_coefficients,
        clients,
        communication: CommSummary::from_ledger(fed.bus().ledger()),
        timings: clock.0,
    };
    report.check()?;
    Ok(RunOutcome {
        report,
        federation: fed,
        data,
    })
}

fn result(metrics: Metrics, seconds: f64) -> MethodResult {
    MethodResult { metrics, seconds }
}

/// Client-averaged accuracy and macro-F1.
fn mean_metrics(all: &[Metrics]) -> Result<Metrics> {
    let first = all.first().ok_or(Error::Empty("client metrics"))?;
    let n = all.len() as f64;
    Ok(Metrics {
        accuracy: all.iter().map(|m| m.accuracy).sum::<f64>() / n,
        macro_f1: all.iter().map(|m| m.macro_f1).sum::<f64>() / n,
        n_samples: first.n_samples,
    })
}

/// Stable identifier of (manifest, model).
fn run_id(manifest: &Manifest, fingerprint: u64) -> Result<String> {
    let mut h = fnv::FnvHasher::default();
    h.write(serde_json::to_string(manifest)?.as_bytes());
    h.write_u64(fingerprint);
    Ok(format!("{:016x}", h.finish()))
}
