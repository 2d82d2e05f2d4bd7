//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; the process exits nonzero if any fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ificl_core::calibration::grad_oracle_check;
use ificl_core::experiment::{
    pretrain_from_manifest, run_experiment, train_task, ExperimentReport, Manifest, Method, RunOptions,
};
use ificl_core::federation::{
    aggregate_coefficients, aggregate_context_vectors, update_global_vector_incremental, Bus, Direction, Message,
    Stage, Traffic, ENVELOPE_LEN,
};
use ificl_core::injection::{
    extract_demonstration_vector, local_context_vector, ContextVector, Dtype, InjectionCoefficients, Provenance,
};
use ificl_core::nn::ToyTransformer;
use ificl_core::store::{TaskKey, TaskStore};
use ificl_core::task::{generate_task, render_demonstration, Rendered, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Suite {
    failed: usize,
}

impl Suite {
    fn record(&mut self, n: usize, name: &str, budget: Duration, elapsed: Duration, verdict: Verdict) {
        let in_time = elapsed < budget;
        let pass = verdict.pass && in_time;
        if !pass {
            self.failed += 1;
        }
        println!(
            "criterion {n} {name}: {} ({}; {:.1}s of {:.0}s budget{})",
            if pass { "PASS" } else { "FAIL" },
            verdict.detail,
            elapsed.as_secs_f64(),
            budget.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        );
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed())
}

fn random_vector(rng: &mut ChaCha8Rng, n_layers: usize, d_model: usize, scale: f32) -> ContextVector {
    let data = (0..2 * n_layers * d_model)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    ContextVector::from_parts(n_layers, d_model, data, 1, Provenance::Unspecified).unwrap()
}

fn identity_injection(model: &ToyTransformer) -> Verdict {
    let cfg = *model.config();
    let neutral = InjectionCoefficients::neutral(cfg.n_layers).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let len = rng.random_range(1..=cfg.max_seq_len);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
        let v = random_vector(&mut rng, cfg.n_layers, cfg.d_model, 4.0);
        let plain = model.forward(&tokens, false).unwrap().0;
        let injected = model.forward_injected(&tokens, &v, &neutral).unwrap();
        for pos in 0..len {
            for (a, b) in plain.row(pos).iter().zip(injected.row(pos)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Verdict::new(worst <= 1e-5, format!("100 pairs, max |Δlogit| {worst:.2e}"))
}

fn gradient_oracle(model: &ToyTransformer) -> Verdict {
    let n_layers = model.config().n_layers;
    let max_len = model.config().max_seq_len;
    let mut worst = 0.0f64;
    let instances = 40u64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let spec = TaskSpec {
            seed,
            ..TaskSpec::default()
        };
        let data = generate_task(&spec, 24, 4, (seed % 2) as usize).unwrap();
        let demos: Vec<_> = data.train[..16]
            .iter()
            .map(|e| extract_demonstration_vector(model, &data.template, e).unwrap())
            .collect();
        let v = local_context_vector(&demos).unwrap();
        let coeffs = InjectionCoefficients::from_values(
            (0..4 * n_layers)
                .map(|i| {
                    if i % 2 == 0 {
                        rng.random_range(-0.5..0.5)
                    } else {
                        rng.random_range(0.5..1.5)
                    }
                })
                .collect(),
        )
        .unwrap();
        let batch: Vec<Rendered> = data.train[16..20]
            .iter()
            .map(|e| render_demonstration(&data.template, e, max_len).unwrap())
            .collect();
        worst = worst.max(grad_oracle_check(model, &v, &coeffs, &batch, 1e-3).unwrap());
    }
    Verdict::new(worst <= 1e-3, format!("{instances} instances, max relative error {worst:.2e}"))
}

fn aggregation_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cases = 200;
    let (mut vec_err, mut coeff_err, mut incr_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let n_layers = rng.random_range(1..=6);
        let d_model = rng.random_range(1..=48);
        let n = rng.random_range(1..=12);
        let uploads: Vec<ContextVector> = (0..n)
            .map(|_| random_vector(&mut rng, n_layers, d_model, 3.0))
            .collect();
        let got = aggregate_context_vectors(&uploads, 1).unwrap();
        for (i, &g) in got.as_slice().iter().enumerate() {
            let mean = uploads.iter().map(|u| u.as_slice()[i] as f64).sum::<f64>() / n as f64;
            vec_err = vec_err.max((g as f64 - mean).abs());
        }

        let coeffs: Vec<InjectionCoefficients> = (0..n)
            .map(|_| {
                InjectionCoefficients::from_values((0..4 * n_layers).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .unwrap()
            })
            .collect();
        let got = aggregate_coefficients(&coeffs).unwrap();
        for (i, &g) in got.as_slice().iter().enumerate() {
            let mean = coeffs.iter().map(|c| c.as_slice()[i] as f64).sum::<f64>() / n as f64;
            coeff_err = coeff_err.max((g as f64 - mean).abs());
        }

        if n >= 2 {
            let split = rng.random_range(1..n);
            let prior = aggregate_context_vectors(&uploads[..split], 1).unwrap();
            let incremental = update_global_vector_incremental(&prior, &uploads[split..], split).unwrap();
            let batch = aggregate_context_vectors(&uploads, 1).unwrap();
            for (a, b) in incremental.as_slice().iter().zip(batch.as_slice()) {
                incr_err = incr_err.max((a - b).abs() as f64);
            }
        }
    }
    Verdict::new(
        vec_err <= 1e-6 && coeff_err <= 1e-7 && incr_err <= 1e-6,
        format!(
            "{cases} cases; vector mean err {vec_err:.2e}, coefficient mean err {coeff_err:.2e}, \
             incremental vs batch {incr_err:.2e}"
        ),
    )
}

fn acc(report: &ExperimentReport, m: Method) -> f64 {
    report.metrics(m).unwrap().accuracy
}

struct TrendOutcome {
    gain: Verdict,
    global_vs_local: Verdict,
    rounds: Verdict,
}

fn trends(reports: &[ExperimentReport]) -> TrendOutcome {
    let mut gains = 0;
    let mut global_wins = 0;
    let mut round_wins = 0;
    let mut gain_detail = Vec::new();
    let mut gl_detail = Vec::new();
    let mut round_detail = Vec::new();
    for r in reports {
        let (ifed, zero) = (acc(r, Method::IfedIcl), acc(r, Method::ZeroShot));
        gains += usize::from(ifed > zero);
        gain_detail.push(format!("seed {}: {ifed:.3} vs {zero:.3}", r.seed));

        let last = r.rounds.last().unwrap();
        let global = last.global.unwrap().accuracy;
        let mean_local = last.local.iter().map(|c| c.accuracy).sum::<f64>() / last.local.len() as f64;
        global_wins += usize::from(global >= mean_local);
        gl_detail.push(format!("seed {}: {global:.3} vs {mean_local:.3}", r.seed));

        let first = r.rounds.first().unwrap().global.unwrap().accuracy;
        round_wins += usize::from(global >= first);
        round_detail.push(format!("seed {}: round {} {global:.3} vs round 1 {first:.3}", r.seed, last.round));
    }
    let n = reports.len();
    TrendOutcome {
        gain: Verdict::new(
            gains == n && n == 3,
            format!("IFed-ICL > zero-shot on {gains}/{n}; {}", gain_detail.join(", ")),
        ),
        global_vs_local: Verdict::new(
            global_wins >= 2,
            format!("global ≥ mean local on {global_wins}/{n}; {}", gl_detail.join(", ")),
        ),
        rounds: Verdict::new(
            round_wins >= 2,
            format!("final ≥ first round on {round_wins}/{n}; {}", round_detail.join(", ")),
        ),
    }
}

fn captured_traffic(bus: &Bus) -> BTreeMap<(Stage, u32, Direction), Traffic> {
    let mut cells: BTreeMap<(Stage, u32, Direction), Traffic> = BTreeMap::new();
    for m in bus.captured().unwrap() {
        let decoded = Message::decode(&m.bytes).unwrap();
        let cell = cells.entry((m.stage, decoded.round, m.direction)).or_default();
        cell.messages += 1;
        cell.bytes += m.bytes.len() as u64;
    }
    cells
}

fn communication(model: &Arc<ToyTransformer>, base: &Manifest) -> Verdict {
    let manifest = Manifest {
        n_train: 120,
        n_test: 20,
        rounds: 2,
        local_epochs: 1,
        methods: vec![Method::IfedIcl],
        ..base.clone()
    };
    let outcome = run_experiment(Arc::clone(model), &manifest, RunOptions { threads: 0, capture: true }).unwrap();
    let bus = outcome.federation.bus();
    let ledger = bus.ledger();
    let captured_bytes: u64 = bus.captured().unwrap().iter().map(|m| m.bytes.len() as u64).sum();
    let cells = captured_traffic(bus);
    let cells_match = ledger.rows().len() == cells.len()
        && ledger.rows().iter().all(|row| {
            cells.get(&(row.stage, row.round, row.direction))
                == Some(&Traffic {
                    messages: row.messages,
                    bytes: row.bytes,
                })
        });
    let totals_match = ledger.total_bytes() == captured_bytes && outcome.report.communication.total_bytes == captured_bytes;

    let n_layers = model.config().n_layers as u64;
    let k = manifest.n_clients as u64;
    let per_client = 6 + 16 * n_layers + ENVELOPE_LEN as u64;
    let rounds_exact = (1..=manifest.rounds as u32).all(|t| {
        [Direction::Uplink, Direction::Downlink].into_iter().all(|d| {
            ledger.get(Stage::Calibration, t, d)
                == Traffic {
                    messages: k,
                    bytes: k * per_client,
                }
        })
    });

    let large = ContextVector::zeros(32, 4096).unwrap().encoded_len(Dtype::F16) as i64;
    let formula = 13 + 2 * 32 * 4096 * 2;
    let reported = 514 * 1024;
    let tolerance = reported as f64 * 0.01 + 2048.0;
    let large_ok = large == formula && ((large - reported).abs() as f64) <= tolerance;

    Verdict::new(
        cells_match && totals_match && rounds_exact && large_ok,
        format!(
            "ledger {} B == captured {captured_bytes} B over {} messages: {}; per-round calibration \
             {k}×{per_client} B each way: {rounds_exact}; IFCV at L=32 d=4096 f16 {large} B vs {reported} B",
            ledger.total_bytes(),
            bus.captured().unwrap().len(),
            cells_match && totals_match
        ),
    )
}

fn cache_behaviour(model: &Arc<ToyTransformer>, base: &Manifest) -> Verdict {
    let manifest = Manifest {
        n_train: 120,
        n_test: 20,
        rounds: 2,
        local_epochs: 1,
        ..base.clone()
    };
    let dir = tempfile::tempdir().unwrap();
    let tok = manifest.task.tokenizer().unwrap();
    let template = manifest.task.template(manifest.scheme, &tok).unwrap();
    let key = TaskKey::new("topic", &template).unwrap();

    let mut trainings = 0usize;
    let mut hits = Vec::new();
    let mut payloads = Vec::new();
    let (record, vector_bytes) = {
        let mut store = TaskStore::open(dir.path(), model.fingerprint()).unwrap();
        for _ in 0..3 {
            let (record, hit) = store
                .lookup_or_train(&key, || {
                    trainings += 1;
                    Ok(train_task(model, &manifest, &template, manifest.seed)?.0)
                })
                .unwrap();
            hits.push(hit);
            payloads.push(record.coeffs.encode().unwrap());
        }
        let record = store.get_record(&key).unwrap().unwrap();
        let bytes = store.vector(record.vector_ref).unwrap().encode(Dtype::F32).unwrap();
        (record, bytes)
    };
    let repeat_ok = trainings == 1 && hits == [false, true, true] && payloads.windows(2).all(|w| w[0] == w[1]);

    let mut reopened = TaskStore::open(dir.path(), model.fingerprint()).unwrap();
    let restored = reopened.get_record(&key).unwrap();
    let restored_vector = reopened
        .vector(record.vector_ref)
        .and_then(|v| v.encode(Dtype::F32))
        .unwrap();
    let mut retrain = 0usize;
    let (after, hit) = reopened
        .lookup_or_train(&key, || {
            retrain += 1;
            Ok(train_task(model, &manifest, &template, manifest.seed)?.0)
        })
        .unwrap();
    let restart_ok = restored.as_ref() == Some(&record)
        && restored_vector == vector_bytes
        && hit
        && retrain == 0
        && after.coeffs.encode().unwrap() == payloads[0];

    Verdict::new(
        repeat_ok && restart_ok,
        format!(
            "3 lookups: {trainings} training run(s), hits {hits:?}, identical payloads: {}; \
             restart bit-exact: {restart_ok}",
            payloads.windows(2).all(|w| w[0] == w[1])
        ),
    )
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn encodings(tokens: &[u32]) -> [Vec<u8>; 2] {
    [
        tokens.iter().flat_map(|t| t.to_le_bytes()).collect(),
        tokens.iter().flat_map(|&t| (t as u16).to_le_bytes()).collect(),
    ]
}

fn privacy(model: &Arc<ToyTransformer>, base: &Manifest) -> Verdict {
    let manifest = Manifest {
        methods: vec![Method::IfedIcl],
        ..base.clone()
    };
    let outcome = run_experiment(Arc::clone(model), &manifest, RunOptions { threads: 0, capture: true }).unwrap();
    let fed = &outcome.federation;
    let captured = fed.bus().captured().unwrap();
    let payloads: Vec<Vec<u8>> = captured
        .iter()
        .map(|m| Message::decode(&m.bytes).unwrap().payload)
        .collect();
    let tok = manifest.task.tokenizer().unwrap();
    let template = &outcome.data.template;
    let max_len = model.config().max_seq_len;

    let mut needles: Vec<Vec<u8>> = Vec::new();
    for client in fed.clients() {
        for e in client.shard() {
            needles.extend(encodings(&e.input));
            needles.push(tok.decode(&e.input).unwrap().into_bytes());
        }
        for e in client.demonstrations() {
            needles.extend(encodings(&render_demonstration(template, e, max_len).unwrap().tokens));
        }
    }
    let leaks = needles
        .iter()
        .filter(|n| captured.iter().any(|m| contains(&m.bytes, n)))
        .count();

    // the search must find a sequence that is planted in a payload
    let probe = encodings(&fed.clients()[0].shard()[0].input);
    let mut planted = payloads[payloads.len() / 2].clone();
    let mid = planted.len() / 2;
    planted.splice(mid..mid, probe[1].iter().copied());
    let control = contains(&planted, &probe[1]);

    Verdict::new(
        leaks == 0 && control,
        format!(
            "{} payloads, {} bytes, {} client sequences searched as u32/u16/text: {leaks} found; planted control found: {control}",
            payloads.len(),
            captured.iter().map(|m| m.bytes.len()).sum::<usize>(),
            needles.len()
        ),
    )
}

fn determinism(model: &Arc<ToyTransformer>, manifest: &Manifest) -> Verdict {
    let run = |threads| {
        run_experiment(Arc::clone(model), manifest, RunOptions { threads, capture: false })
            .unwrap()
            .report
    };
    let (a, b) = (run(1), run(3));
    let coeffs = a.final_coefficients.encode().unwrap() == b.final_coefficients.encode().unwrap();
    let metrics = a.methods.len() == b.methods.len()
        && a
            .methods
            .iter()
            .all(|(m, r)| b.methods.get(m).is_some_and(|s| s.metrics == r.metrics));
    let rounds = a.rounds == b.rounds;
    let ledger = a.communication == b.communication;
    Verdict::new(
        coeffs && metrics && rounds && ledger,
        format!(
            "threads 1 vs 3: coefficients {coeffs}, metrics {metrics}, rounds {rounds}, ledger {ledger} ({} B)",
            a.communication.total_bytes
        ),
    )
}

fn main() -> ExitCode {
    let mut suite = Suite { failed: 0 };
    let base = Manifest::default();

    let ((model, summary), pretrain_time) = timed(|| pretrain_from_manifest(&base).unwrap());
    let model = Arc::new(model);
    println!(
        "pretrained {} parameters in {:.1}s, held-out loss {:?} (uniform {:.3})",
        summary.n_params,
        pretrain_time.as_secs_f64(),
        summary.report.heldout_loss,
        summary.report.uniform_baseline
    );

    let (v, t) = timed(|| identity_injection(&model));
    suite.record(1, "identity injection", Duration::from_secs(10), t, v);

    let (v, t) = timed(|| gradient_oracle(&model));
    suite.record(2, "gradient oracle", Duration::from_secs(60), t, v);

    let (v, t) = timed(aggregation_equivalence);
    suite.record(3, "aggregation equivalence", Duration::from_secs(10), t, v);

    let (reports, runs_time) = timed(|| {
        (0..3u64)
            .map(|seed| {
                let m = Manifest { seed, ..base.clone() };
                run_experiment(Arc::clone(&model), &m, RunOptions::default()).unwrap().report
            })
            .collect::<Vec<_>>()
    });
    let e2e_time = pretrain_time + runs_time;
    let outcome = trends(&reports);
    suite.record(4, "end-to-end gain", Duration::from_secs(15 * 60), e2e_time, outcome.gain);
    suite.record(5, "global vs local", Duration::from_secs(15 * 60), e2e_time, outcome.global_vs_local);
    suite.record(6, "rounds trend", Duration::from_secs(15 * 60), e2e_time, outcome.rounds);

    let (v, t) = timed(|| communication(&model, &base));
    suite.record(7, "communication accounting", Duration::from_secs(5), t, v);

    let (v, t) = timed(|| cache_behaviour(&model, &base));
    suite.record(8, "cache behaviour", Duration::from_secs(10), t, v);

    let (v, t) = timed(|| privacy(&model, &base));
    suite.record(9, "privacy locality", Duration::from_secs(30), t, v);

    let (v, t) = timed(|| determinism(&model, &base));
    suite.record(10, "determinism", 2 * e2e_time, t, v);

    println!("{} of 10 criteria passed", 10 - suite.failed);
    if suite.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
