//! End-to-end acceptance checks. Every criterion prints one `PASS` or `FAIL`
//! line with the measured values; the process exits non-zero if any fails.
//!
//! Seeds are fixed constants chosen before the checks were first run.

use std::collections::BTreeMap;
use std::error::Error;
use std::path::Path;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vbci_core::clock::{Clock, VirtualClock};
use vbci_core::dataset::{self, EpochParams, LoadedRun, TrainedDecoderFile};
use vbci_core::metrics::{self, TrialBlocks};
use vbci_core::online::{self, DecisionConfig, EvidenceState, Outcome, ScriptedPosteriors};
use vbci_core::protocol::{self, PhaseTimings, QuestionItem, RunPlan, SessionPlan, TrialPhase};
use vbci_core::session::{
    self, EventBus, EventKind, LogHeader, SessionControl, SessionEvent, SessionOptions, SessionRecord, SyntheticSubject,
};
use vbci_core::signal::{self, Band, FilterCoefficients, FilterSpec, PhaseMode, StreamFilterState};
use vbci_core::synth::SubjectProfile;
use vbci_core::training::{self, svm, TrainingConfig};
use vbci_core::Class;

type Res<T> = Result<T, Box<dyn Error>>;

const BENCH_SEED: u64 = 11;
const NULL_SEED: u64 = 23;
const ORACLE_SEED: u64 = 7;
const FS: f64 = 512.0;

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

fn report(name: &str, result: Res<Verdict>) -> bool {
    let (pass, detail) = match result {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

struct SimSession {
    record: SessionRecord,
    header: LogHeader,
    events: Vec<SessionEvent>,
}

fn simulate(
    dir: &Path,
    plan: &SessionPlan,
    profile: SubjectProfile,
    decoder: Option<&TrainedDecoderFile>,
    seed: u64,
) -> Res<SimSession> {
    let mut subject = SyntheticSubject::new(profile)?;
    let bus = EventBus::new();
    let mut options = SessionOptions::new(dir);
    options.seed = seed;
    let log = session::open_session_log(&bus, dir, &plan.session_id, options.start_time)?;
    let result = session::run_session(
        plan,
        decoder,
        &mut subject,
        &mut VirtualClock::new(),
        &SessionControl::new(),
        &bus,
        &options,
    );
    bus.close_log();
    let record = result?;
    let (header, events) = session::read_event_log(&log)?;
    Ok(SimSession { record, header, events })
}

/// Three offline sessions of 3 x 16 trials, each with its own noise seed.
fn offline_runs(root: &Path, make: fn(u64) -> SubjectProfile, seed: u64) -> Res<Vec<LoadedRun>> {
    let mut runs = Vec::new();
    for s in 0..3u64 {
        let dir = root.join(format!("offline{s}"));
        let plan_runs = (0..3)
            .map(|r| RunPlan::offline(16, 0.5, training::derive_seed(seed, 20 + s, r)))
            .collect::<Result<Vec<_>, _>>()?;
        let plan = SessionPlan::new(format!("offline{s}"), plan_runs);
        let sim = simulate(&dir, &plan, make(training::derive_seed(seed, 10, s)), None, seed)?;
        for run in &sim.record.runs {
            runs.push(dataset::load_run(&dir.join(&run.manifest))?);
        }
    }
    Ok(runs)
}

fn online(
    root: &Path,
    name: &str,
    make: fn(u64) -> SubjectProfile,
    decoder: &TrainedDecoderFile,
    n_runs: u64,
    n_trials: usize,
    seed: u64,
) -> Res<SimSession> {
    let runs = (0..n_runs)
        .map(|r| RunPlan::standard(n_trials, 0.5, training::derive_seed(seed, 30, r)))
        .collect::<Result<Vec<_>, _>>()?;
    let plan = SessionPlan::new(name, runs);
    simulate(
        &root.join(name),
        &plan,
        make(training::derive_seed(seed, 40, 0)),
        Some(decoder),
        seed,
    )
}

struct Pooled {
    kappa: f64,
    chance_kappa: f64,
    bar_dynamics: f64,
    hits: f64,
    mean_latency_s: Option<f64>,
    n_trials: usize,
}

/// Session-level metrics over every scored online trial.
fn pooled_metrics(sim: &SimSession, seed: u64) -> Res<Pooled> {
    let rep = session::evaluate_log(&sim.header, &sim.events, metrics::CHANCE_PERMUTATIONS, seed)?;
    let mut bars = Vec::new();
    let mut latencies = Vec::new();
    let (mut hits, mut scored) = (0.0, 0usize);
    for run in &rep.runs {
        let m = run.metrics.as_ref().ok_or("online run without metrics")?;
        hits += m.hits_at_threshold * m.n_trials as f64;
        scored += m.n_trials;
        bars.extend(run.decisions.iter().map(|d| d.bar_dynamics));
        latencies.extend(run.decisions.iter().filter_map(|d| d.latency_s));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Pooled {
        kappa: rep.session_kappa.ok_or("no session kappa")?,
        chance_kappa: rep.session_chance_kappa.ok_or("no session chance kappa")?,
        bar_dynamics: mean(&bars),
        hits: hits / scored as f64,
        mean_latency_s: (!latencies.is_empty()).then(|| mean(&latencies)),
        n_trials: scored,
    })
}

struct Bench {
    decoder: TrainedDecoderFile,
    online: SimSession,
}

fn strong_benchmark(root: &Path) -> Res<(Verdict, Bench)> {
    let start = Instant::now();
    let runs = offline_runs(root, SubjectProfile::strong, BENCH_SEED)?;
    let trained = training::train_decoder(&runs, &TrainingConfig::standard(FS, BENCH_SEED))?;
    let sim = online(
        root,
        "bench_online",
        SubjectProfile::strong,
        &trained.decoder,
        2,
        10,
        BENCH_SEED,
    )?;
    let m = pooled_metrics(&sim, BENCH_SEED)?;
    let elapsed = start.elapsed().as_secs_f64();
    let latency = m.mean_latency_s.unwrap_or(f64::INFINITY);
    let pass = m.kappa >= 0.8 && m.bar_dynamics >= 80.0 && m.hits >= 90.0 && latency <= 6.0 && elapsed <= 120.0;
    let detail = format!(
        "{} trials, cv accuracy {:.3}, kappa {:.3} (>= 0.8), bar dynamics {:.1}% (>= 80), hits@0.6 {:.1}% (>= 90), \
         mean latency {:.2} s (<= 6), runtime {:.1} s (<= 120)",
        m.n_trials, trained.report.cv_accuracy, m.kappa, m.bar_dynamics, m.hits, latency, elapsed
    );
    Ok((
        Verdict::new(pass, detail),
        Bench {
            decoder: trained.decoder,
            online: sim,
        },
    ))
}

fn null_control(root: &Path) -> Res<(Verdict, Bench)> {
    let runs = offline_runs(root, SubjectProfile::null, NULL_SEED)?;

    // Channel tests per offline session, each band.
    let params = EpochParams::standard(FS).with_phase_mode(PhaseMode::ZeroPhase);
    let names = runs[0].recording.channel_names.clone();
    let mut worst = usize::MAX;
    let mut counts = Vec::new();
    for (s, session_runs) in runs.chunks(3).enumerate() {
        let data = dataset::epoch_runs(session_runs, &params)?;
        for band in [Band::Alpha, Band::Beta] {
            let blocks = TrialBlocks::new(&data, band, &names)?;
            let test = metrics::channel_test_by_trial(
                &blocks,
                1000,
                training::derive_seed(NULL_SEED, 50 + s as u64, band as u64),
            )?;
            let clean = test.p_adjusted.iter().filter(|&&p| p > 0.05).count();
            worst = worst.min(clean);
            counts.push(clean);
        }
    }

    let trained = training::train_decoder(&runs, &TrainingConfig::standard(FS, NULL_SEED))?;
    let sim = online(
        root,
        "null_online",
        SubjectProfile::null,
        &trained.decoder,
        12,
        10,
        NULL_SEED,
    )?;
    let m = pooled_metrics(&sim, NULL_SEED)?;
    let pass = m.kappa.abs() <= 0.15 && m.chance_kappa.abs() <= 0.02 && worst >= 29;
    let detail = format!(
        "{} trials, |kappa| {:.3} (<= 0.15), chance kappa {:+.4} (within 0.02), \
         channels with adjusted p > 0.05 per session and band {:?} of {} (>= 29)",
        m.n_trials,
        m.kappa.abs(),
        m.chance_kappa,
        counts,
        names.len()
    );
    Ok((
        Verdict::new(pass, detail),
        Bench {
            decoder: trained.decoder,
            online: sim,
        },
    ))
}

fn evidence_analytics() -> Res<Verdict> {
    let mut state = EvidenceState::default();
    let mut max_err = 0.0f64;
    let mut crossing = None;
    for i in 1..=60 {
        state = online::accumulate(&state, 1.0)?;
        let expected = 1.0 - 0.5 * 0.95f64.powi(i);
        max_err = max_err.max((state.prob_modulated - expected).abs());
        if crossing.is_none() && state.prob_modulated >= 0.6 {
            crossing = Some(i);
        }
    }

    let flag = AtomicBool::new(false);
    let decoded = online::run_trial_decoding(
        &mut ScriptedPosteriors::constant(1.0),
        &DecisionConfig::default(),
        2.0,
        &mut VirtualClock::new(),
        0.0,
        &flag,
        |_| {},
    )?;
    let first = metrics::first_crossing(&decoded.trace, 0.6);
    let pass = max_err <= 1e-12
        && crossing == Some(5)
        && decoded.decision.outcome == Outcome::Yes
        && decoded.decision.decision_time_s == 6.0
        && first == Some((Class::Modulated, 6.0));
    Ok(Verdict::new(
        pass,
        format!(
            "max error {max_err:.1e} over 60 steps, first crossing of 0.6 at step {}, \
             decision {:?} at {} s",
            crossing.map_or("none".to_string(), |i| i.to_string()),
            decoded.decision.outcome,
            decoded.decision.decision_time_s
        ),
    ))
}

/// Kappa from an explicit confusion matrix over category indices.
fn kappa_by_confusion(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let n = pred.len() as i128;
    let mut m = vec![vec![0i128; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        m[p][t] += 1;
    }
    let agree: i128 = (0..k).map(|i| m[i][i]).sum();
    let chance: i128 = (0..k)
        .map(|i| m[i].iter().sum::<i128>() * (0..k).map(|j| m[j][i]).sum::<i128>())
        .sum();
    if chance == n * n {
        0.0
    } else {
        (n * agree - chance) as f64 / (n * n - chance) as f64
    }
}

/// Step-up adjustment straight from its definition: the smallest
/// `m * p_j / rank_j` over every `p_j >= p_i`, capped at one.
fn bh_by_definition(p: &[f64]) -> Vec<f64> {
    let m = p.len() as f64;
    p.iter()
        .map(|&pi| {
            p.iter()
                .filter(|&&pj| pj >= pi)
                .map(|&pj| m * pj / p.iter().filter(|&&pk| pk <= pj).count() as f64)
                .fold(1.0f64, f64::min)
        })
        .collect()
}

fn objective(w: &[f64], b: f64, c: f64, rows: &[Vec<f64>], y: &[f64]) -> f64 {
    let mut loss = 0.0;
    for (x, &yi) in rows.iter().zip(y) {
        let f: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
        loss += (1.0 - yi * f).max(0.0);
    }
    0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b) + c * loss
}

/// Full-batch subgradient descent with step 1/t on the 1-strongly convex
/// objective, tracking the best of the iterates and their suffix averages.
fn subgradient_reference(rows: &[Vec<f64>], y: &[f64], c: f64, iterations: usize) -> f64 {
    let p = rows[0].len();
    let (mut w, mut b) = (vec![0.0; p], 0.0);
    let (mut avg_w, mut avg_b, mut n_avg) = (vec![0.0; p], 0.0, 0.0);
    let mut best = objective(&w, b, c, rows, y);
    for t in 1..=iterations {
        let mut gw = w.clone();
        let mut gb = b;
        for (x, &yi) in rows.iter().zip(y) {
            let f: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            if yi * f < 1.0 {
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g -= c * yi * xi;
                }
                gb -= c * yi;
            }
        }
        let eta = 1.0 / t as f64;
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= eta * g;
        }
        b -= eta * gb;
        if t > iterations / 2 {
            n_avg += 1.0;
            for (a, wj) in avg_w.iter_mut().zip(&w) {
                *a += (wj - *a) / n_avg;
            }
            avg_b += (b - avg_b) / n_avg;
        }
        if t % 500 == 0 {
            best = best.min(objective(&w, b, c, rows, y));
            if n_avg > 0.0 {
                best = best.min(objective(&avg_w, avg_b, c, rows, y));
            }
        }
    }
    best
}

fn oracle_equivalence() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(ORACLE_SEED);

    let mut kappa_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=40);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let label = |i: usize| [Some(Class::Modulated), Some(Class::Baseline), None][i];
        let lp: Vec<Option<Class>> = pred.iter().map(|&i| label(i)).collect();
        let lt: Vec<Option<Class>> = truth.iter().map(|&i| label(i)).collect();
        let got = metrics::cohen_kappa(&lp, &lt)?.kappa;
        if got.to_bits() != kappa_by_confusion(&pred, &truth, 3).to_bits() {
            kappa_mismatch += 1;
        }
    }

    let mut bh_err = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=60);
        let coarse = rng.random_bool(0.3);
        let p: Vec<f64> = (0..m)
            .map(|_| {
                let v: f64 = rng.random();
                if coarse {
                    (v * 20.0).round() / 20.0
                } else {
                    v
                }
            })
            .collect();
        let got = metrics::bh_correct(&p)?;
        for (a, b) in got.iter().zip(bh_by_definition(&p)) {
            bh_err = bh_err.max((a - b).abs());
        }
    }

    let mut svm_gap = 0.0f64;
    for (case, &c) in [0.05, 0.2, 1.0].iter().enumerate() {
        let (n, p) = (120, 8);
        let truth_w: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let noise: f64 = StandardNormal.sample(&mut rng);
            let s: f64 = x.iter().zip(&truth_w).map(|(a, b)| a * b).sum::<f64>() + 2.0 * noise;
            labels.push(if s > 0.0 { Class::Modulated } else { Class::Baseline });
            rows.push(x);
        }
        let model = svm::train_linear_svm(&rows, &labels, c)?;
        let z: Vec<Vec<f64>> = rows.iter().map(|r| model.standardizer.transform(r)).collect();
        let y: Vec<f64> = labels
            .iter()
            .map(|&l| if l == Class::Modulated { 1.0 } else { -1.0 })
            .collect();
        let ours = objective(&model.weights, model.bias, c, &z, &y);
        let reference = subgradient_reference(&z, &y, c, 200_000 + 100_000 * case);
        svm_gap = svm_gap.max((ours - reference).abs() / reference);
    }

    let pass = kappa_mismatch == 0 && bh_err <= 1e-12 && svm_gap <= 1e-3;
    Ok(Verdict::new(
        pass,
        format!(
            "kappa mismatches {kappa_mismatch}/1000, max adjusted-p error {bh_err:.1e} (<= 1e-12), \
             max relative objective gap {svm_gap:.2e} (<= 1e-3)"
        ),
    ))
}

/// |H(f)| in dB, evaluated directly from the coefficient polynomials.
fn gain_db(coeffs: &FilterCoefficients, f: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f / FS;
    let poly = |c: &[f64]| {
        let (re, im) = c.iter().enumerate().fold((0.0, 0.0), |(re, im), (k, &v)| {
            (re + v * (w * k as f64).cos(), im - v * (w * k as f64).sin())
        });
        (re * re + im * im).sqrt()
    };
    20.0 * (poly(&coeffs.feedforward) / poly(&coeffs.feedback)).log10()
}

fn filter_verification() -> Res<Verdict> {
    let wide = signal::design_bandpass(&FilterSpec::wide(FS))?;
    let low = gain_db(&wide, 7.0);
    let high = gain_db(&wide, 30.0);
    let edges_ok = (low + 3.0).abs() <= 0.5 && (high + 3.0).abs() <= 0.5;

    let mut rng = ChaCha8Rng::seed_from_u64(ORACLE_SEED + 1);
    let signal: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            (0..6000)
                .map(|_| 10.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>()
        })
        .collect();
    let mut mismatched = 0;
    for spec in [FilterSpec::wide(FS), FilterSpec::alpha(FS), FilterSpec::beta(FS)] {
        let coeffs = signal::design_bandpass(&spec)?;
        let whole = signal::filter_block(&coeffs, &mut StreamFilterState::new(&coeffs, 3), &signal)?;
        for sizes in [vec![1], vec![7, 256, 3], vec![1000, 17, 1]] {
            let mut state = StreamFilterState::new(&coeffs, 3);
            let mut out = vec![Vec::new(); 3];
            let (mut at, mut k) = (0, 0);
            while at < 6000 {
                let end = (at + sizes[k % sizes.len()]).min(6000);
                let block: Vec<&[f64]> = signal.iter().map(|ch| &ch[at..end]).collect();
                for (o, part) in out.iter_mut().zip(signal::filter_block(&coeffs, &mut state, &block)?) {
                    o.extend(part);
                }
                at = end;
                k += 1;
            }
            let same = out
                .iter()
                .flatten()
                .zip(whole.iter().flatten())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                mismatched += 1;
            }
        }
    }

    // Zero-phase lag: cross-correlation peak and fitted phase in the interior.
    let mut worst_lag = 0i64;
    let mut worst_phase = 0.0f64;
    for f in [8.0, 10.0, 15.0, 20.0, 25.0] {
        let n = 4096;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / FS).sin())
            .collect();
        let y = &signal::filter_zero_phase(&wide, &[&x])?[0];
        let interior = 512..n - 512;
        let xcorr = |lag: i64| -> f64 { interior.clone().map(|i| y[i] * x[(i as i64 + lag) as usize]).sum() };
        let lag = (-20..=20).max_by(|&a, &b| xcorr(a).total_cmp(&xcorr(b))).unwrap_or(0);
        worst_lag = worst_lag.max(lag.abs());
        let (mut s, mut c) = (0.0, 0.0);
        for i in interior {
            let arg = 2.0 * std::f64::consts::PI * f * i as f64 / FS;
            s += y[i] * arg.sin();
            c += y[i] * arg.cos();
        }
        worst_phase = worst_phase.max(c.atan2(s).abs());
    }

    let pass = edges_ok && mismatched == 0 && worst_lag == 0 && worst_phase < 1e-3;
    Ok(Verdict::new(
        pass,
        format!(
            "gain {low:.3} dB at 7 Hz, {high:.3} dB at 30 Hz (-3 +/- 0.5), {mismatched} block splits differ, \
             zero-phase lag {worst_lag} samples, max phase {worst_phase:.1e} rad"
        ),
    ))
}

/// Phase onsets relative to trial start, summed from the trial description:
/// 3 s pause, 8 s rest, 1 s trial number, 2 s gap, the question, 3 s to the
/// bell, a 0.5 s bell and 4 s until feedback starts.
fn expected_offsets(question_s: f64) -> [(TrialPhase, f64); 9] {
    [
        (TrialPhase::InterTrial, 0.0),
        (TrialPhase::Rest, 3.0),
        (TrialPhase::Announce, 11.0),
        (TrialPhase::PreCue, 12.0),
        (TrialPhase::Cue, 14.0),
        (TrialPhase::PostQuestion, 14.0 + question_s),
        (TrialPhase::Bell, 17.0 + question_s),
        (TrialPhase::PreFeedback, 17.5 + question_s),
        (TrialPhase::Decoding, 21.5 + question_s),
    ]
}

fn timing_conformance(sessions: &[&SimSession]) -> Res<Verdict> {
    let decision = DecisionConfig::default();
    let question = QuestionItem {
        id: "q".into(),
        text: "Is water wet?".into(),
        expected_answer: None,
        duration_s: 2.0,
    };
    let timeline = protocol::build_online_timeline(0, &question, &PhaseTimings::default(), &decision)?;
    let planned = timeline.onset(TrialPhase::Decoding);

    // Logged phase changes of every online trial against the summed offsets.
    let mut trials: BTreeMap<(usize, usize, usize), Vec<(TrialPhase, f64, f64)>> = BTreeMap::new();
    let mut decisions = Vec::new();
    for (s, sim) in sessions.iter().enumerate() {
        for e in &sim.events {
            match &e.event {
                EventKind::PhaseChange(p) => trials.entry((s, p.run_index, p.trial_index)).or_default().push((
                    p.phase,
                    e.timestamp_s,
                    p.duration_s,
                )),
                EventKind::Decision(d) => decisions.push((
                    s,
                    d.run_index,
                    d.trial_index,
                    d.outcome,
                    d.decision_time_s,
                    e.timestamp_s,
                )),
                _ => {}
            }
        }
    }
    let mut max_dev = 0.0f64;
    let mut missing = 0;
    let mut decode_onsets = BTreeMap::new();
    for (key, phases) in &trials {
        let find = |ph: TrialPhase| phases.iter().find(|p| p.0 == ph);
        let (Some(start), Some(cue)) = (find(TrialPhase::InterTrial), find(TrialPhase::Cue)) else {
            missing += 1;
            continue;
        };
        for (phase, offset) in expected_offsets(cue.2) {
            match find(phase) {
                Some(p) => max_dev = max_dev.max((p.1 - start.1 - offset).abs()),
                None => missing += 1,
            }
        }
        if let Some(d) = find(TrialPhase::Decoding) {
            decode_onsets.insert(*key, d.1 - start.1);
        }
    }

    // Timeouts: the decision lands exactly 20 s after decoding onset.
    let mut timeouts = 0;
    let mut bad_timeouts = 0;
    for &(s, r, t, outcome, time, stamp) in &decisions {
        if outcome != Outcome::Timeout {
            continue;
        }
        timeouts += 1;
        let onset = trials[&(s, r, t)]
            .iter()
            .find(|p| p.0 == TrialPhase::Decoding)
            .map(|p| p.1);
        if time != 20.0 || onset.map_or(true, |o| (stamp - o - 20.0).abs() > 1e-9) {
            bad_timeouts += 1;
        }
    }

    let flag = AtomicBool::new(false);
    let mut clock = VirtualClock::new();
    let onset = planned.unwrap_or(f64::NAN);
    let undecided = online::run_trial_decoding(
        &mut ScriptedPosteriors::constant(0.5),
        &decision,
        2.0,
        &mut clock,
        onset,
        &flag,
        |_| {},
    )?;
    let scripted_ok = undecided.decision.outcome == Outcome::Timeout
        && undecided.decision.decision_time_s == 20.0
        && undecided.trace.last().map(|p| p.t) == Some(20.0)
        && clock.now_s() == onset + 20.0;

    let at_23_5 = decode_onsets.values().filter(|&&o| o == 23.5).count();
    let pass = planned == Some(23.5)
        && at_23_5 == trials.len()
        && max_dev <= 1e-9
        && missing == 0
        && scripted_ok
        && bad_timeouts == 0;
    Ok(Verdict::new(
        pass,
        format!(
            "planned decoding onset {} s, {at_23_5}/{} logged trials decode from 23.5 s, \
             max onset deviation {max_dev:.1e} s, {missing} missing phases, scripted timeout at {} s, \
             {timeouts} logged timeouts with {bad_timeouts} off 20 s",
            planned.unwrap_or(f64::NAN),
            trials.len(),
            undecided.decision.decision_time_s
        ),
    ))
}

fn replay_determinism(root: &Path, cases: &[(&str, &Bench)]) -> Res<Verdict> {
    let mut lines = Vec::new();
    let mut pass = true;
    for (name, bench) in cases {
        let first = session::replay_session(&root.join(name), &bench.decoder)?;
        let second = session::replay_session(&root.join(name), &bench.decoder)?;
        let decided = bench.online.record.decisions().len();
        let ok = first.identical
            && first.comparisons.iter().all(|c| c.identical)
            && first.logged_decisions == decided
            && decided > 0
            && serde_json::to_vec(&first)? == serde_json::to_vec(&second)?;
        pass &= ok;
        lines.push(format!(
            "{name} {}/{} decisions identical",
            first.comparisons.iter().filter(|c| c.identical).count(),
            decided
        ));
    }
    Ok(Verdict::new(pass, lines.join(", ")))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let mut ok = true;

    ok &= report("evidence accumulation analytics", evidence_analytics());
    ok &= report("oracle equivalence", oracle_equivalence());
    ok &= report("filter verification", filter_verification());

    let bench = match strong_benchmark(root) {
        Ok((v, b)) => {
            ok &= report("closed-loop strong subject benchmark", Ok(v));
            Some(b)
        }
        Err(e) => {
            ok &= report("closed-loop strong subject benchmark", Err(e));
            None
        }
    };
    let null = match null_control(root) {
        Ok((v, b)) => {
            ok &= report("null subject control", Ok(v));
            Some(b)
        }
        Err(e) => {
            ok &= report("null subject control", Err(e));
            None
        }
    };

    let sessions: Vec<&SimSession> = bench.iter().chain(null.iter()).map(|b| &b.online).collect();
    let timing = if sessions.len() == 2 {
        timing_conformance(&sessions)
    } else {
        Err("benchmark sessions unavailable".into())
    };
    ok &= report("online timing conformance", timing);

    let replay = match (&bench, &null) {
        (Some(b), Some(n)) => replay_determinism(root, &[("bench_online", b), ("null_online", n)]),
        _ => Err("benchmark sessions unavailable".into()),
    };
    ok &= report("replay determinism", replay);

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
