//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the lines always print.
//! Pass criterion numbers to run a subset: `cargo test --test acceptance -- 4 5`.

use std::collections::BTreeSet;
use std::time::Instant;

use eos_core::evaluation::{auc, evaluate, EvalReport};
use eos_core::features::{FeatureFrame, DEFAULT_UTC_OFFSET_MINUTES, FRAME_DIM};
use eos_core::ingest::{ActionKind, RawAction, StudentLog};
use eos_core::neural::{
    backward, decode, encode, forward, init_params, load_checkpoint, loss_weighted_bce, save_checkpoint, Dims, Dropout,
    ModelParams, MAGIC,
};
use eos_core::sessionize::{label, segment, sessionize_all, HomeworkClass, LabeledSequence, DEFAULT_GAP_SECONDS};
use eos_core::synthgen::{generate, summarize, GenConfig};
use eos_core::training::{
    encode_all, format_history, split_students, student_weights, train, EncodedStudent, Level, TrainConfig,
};
use eos_core::EosError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

struct Instance {
    frames: Vec<FeatureFrame>,
    reset: Vec<bool>,
    labels: Vec<f64>,
    weights: Vec<f64>,
}

fn random_instance(rng: &mut ChaCha8Rng, steps: usize) -> Instance {
    Instance {
        frames: (0..steps)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect(),
        reset: (0..steps).map(|t| t > 0 && rng.random_bool(0.25)).collect(),
        labels: (0..steps).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect(),
        weights: (0..steps).map(|_| rng.random_range(0.5..5.0)).collect(),
    }
}

/// Weights in the responsive range of every unit; positive dense biases keep
/// the single-unit second dense layer of a hidden-4 model alive.
fn random_params(dims: Dims, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::zeros(dims);
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    p.dense1_b.mapv_inplace(|_| rng.random_range(0.3..0.9));
    p.dense2_b.mapv_inplace(|_| rng.random_range(0.3..0.9));
    p
}

fn instance_loss(p: &ModelParams, inst: &Instance, dropout: Dropout) -> f64 {
    let (probs, _) = forward(p, &inst.frames, &inst.reset, dropout.p, dropout.seed).unwrap();
    loss_weighted_bce(&probs, &inst.labels, &inst.weights).unwrap()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let dims = Dims::fan_in(FRAME_DIM, 4);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let (mut checked, mut redrawn) = (0, 0);
    while checked < 20 {
        let p = random_params(dims, &mut rng);
        let inst = random_instance(&mut rng, 10);
        let dropout = Dropout::new(rng.random_range(0.0..0.5), Some(rng.random()));
        let (_, grads) = backward(&p, &inst.frames, &inst.reset, &inst.labels, &inst.weights, dropout).unwrap();
        // A dead ReLU path zeroes every upstream gradient and would pass vacuously.
        if !grads.lstm_w.iter().any(|&g| g.abs() > 1e-8) {
            redrawn += 1;
            continue;
        }
        checked += 1;
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, tensor) in analytic.iter().enumerate() {
            for (k, &a) in tensor.iter().enumerate() {
                let mut plus = p.clone();
                plus.tensors_mut()[ti][k] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti][k] -= h;
                let numeric =
                    (instance_loss(&plus, &inst, dropout) - instance_loss(&minus, &inst, dropout)) / (2.0 * h);
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("20 instances ({redrawn} dead-path draws replaced): worst relative error {worst:.2e} (< 1e-4), {secs:.1}s (< 60s)"),
    )
}

// ---------------------------------------------------------------- 2

fn brute_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut mismatched = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        // Few distinct values force many ties.
        let levels = rng.random_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / 8.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        match (auc(&scores, &labels), brute_auc(&scores, &labels)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => mismatched += 1,
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && mismatched == 0 && secs < 10.0,
        format!(
            "max |auc - brute force| {worst:.1e} (<= 1e-12), {mismatched} definedness mismatches, {secs:.2}s (< 10s)"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn action(student: &str, timestamp: i64) -> RawAction {
    RawAction {
        student_id: student.to_string(),
        timestamp,
        kind: ActionKind::Material,
        lesson_id: "L1".into(),
        topic_id: "L1.T1".into(),
        correct: None,
        homework: false,
    }
}

fn log_from_gaps(gaps: &[i64]) -> StudentLog {
    let mut t = 1_600_000_000;
    let mut actions = vec![action("s", t)];
    for g in gaps {
        t += g;
        actions.push(action("s", t));
    }
    StudentLog {
        student_id: "s".into(),
        actions,
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(0..40);
        let gaps: Vec<i64> = (0..n)
            .map(|_| match rng.random_range(0..4) {
                0 => rng.random_range(899..=901),
                1 => rng.random_range(0..900),
                2 => rng.random_range(901..100_000),
                _ => rng.random_range(0..2_000),
            })
            .collect();
        // Oracle: the session index of action i counts the gaps > 900 before it.
        let oracle: Vec<usize> = std::iter::once(0)
            .chain(gaps.iter().scan(0, |s, &g| {
                *s += usize::from(g > 900);
                Some(*s)
            }))
            .collect();
        let sessions = segment(&log_from_gaps(&gaps), DEFAULT_GAP_SECONDS);
        let got: Vec<usize> = sessions
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.index, s.len()))
            .collect();
        let seq = label(sessions);
        let mut labels_ok = true;
        let mut at = 0;
        for s in &seq.sessions {
            let l = &seq.labels[at..at + s.len()];
            labels_ok &= l.iter().map(|&x| usize::from(x)).sum::<usize>() == 1 && l[s.len() - 1] == 1;
            at += s.len();
        }
        if got != oracle || !labels_ok || at != seq.labels.len() {
            failures += 1;
        }
    }
    let at_900 = segment(&log_from_gaps(&[900]), DEFAULT_GAP_SECONDS).len();
    let at_901 = segment(&log_from_gaps(&[901]), DEFAULT_GAP_SECONDS).len();
    outcome(
        failures == 0 && at_900 == 1 && at_901 == 2,
        format!("{failures}/10000 sequences disagree with the scan oracle; 900 s gap -> {at_900} session(s), 901 s -> {at_901}"),
    )
}

// ---------------------------------------------------------------- 4

fn student_with_lengths(lengths: &[usize]) -> LabeledSequence {
    let mut t = 1_600_000_000;
    let mut actions = Vec::new();
    for &len in lengths {
        for j in 0..len {
            t += if j == 0 { 5_000 } else { 30 };
            actions.push(action("s", t));
        }
    }
    label(segment(
        &StudentLog {
            student_id: "s".into(),
            actions,
        },
        DEFAULT_GAP_SECONDS,
    ))
}

fn criterion_4() -> Outcome {
    let example = student_with_lengths(&[25; 16]);
    let w = student_weights(&example);
    let eos: BTreeSet<u64> = w
        .iter()
        .zip(&example.labels)
        .filter(|(_, &l)| l == 1)
        .map(|(x, _)| x.to_bits())
        .collect();
    let example_ok = example.action_count() == 400
        && eos == BTreeSet::from([25.0f64.to_bits()])
        && w.iter().zip(&example.labels).all(|(&x, &l)| l == 1 || x == 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let lengths: Vec<usize> = (0..rng.random_range(1..30)).map(|_| rng.random_range(1..60)).collect();
        let seq = student_with_lengths(&lengths);
        let (a, s) = (seq.action_count() as f64, seq.session_count() as f64);
        let total: f64 = student_weights(&seq).iter().sum();
        worst = worst.max((total - (2.0 * a - s)).abs() / (2.0 * a - s));
    }
    outcome(
        example_ok && worst < 1e-12,
        format!("400 actions / 16 sessions -> EoS weight 25 exactly: {example_ok}; max relative |sum w - (2a - s)| {worst:.1e} over 1000 students"),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [10usize, 100, 85_780] {
        let ids: Vec<String> = (0..n).map(|i| format!("s{i:06}")).collect();
        let split = split_students(&ids, 1).unwrap();
        let test = (0.1 * n as f64).round() as usize;
        let val = (0.1 * (n - test) as f64).round() as usize;
        let all: BTreeSet<&String> = split.train.iter().chain(&split.validation).chain(&split.test).collect();
        let sizes = (split.train.len(), split.validation.len(), split.test.len());
        let ok = sizes == (n - test - val, val, test) && all.len() == n && all.iter().all(|id| ids.contains(id));
        pass &= ok;
        parts.push(format!("N={n}: {}/{}/{}", sizes.0, sizes.1, sizes.2));
    }
    outcome(pass, format!("{} (disjoint, exhaustive)", parts.join(", ")))
}

// ---------------------------------------------------------------- 6-9

struct LevelRun {
    history: String,
    report: EvalReport,
}

struct EndToEnd {
    student: LevelRun,
    session: LevelRun,
    actions: usize,
    seconds: f64,
}

fn end_to_end() -> EndToEnd {
    let started = Instant::now();
    let logs = generate(&GenConfig::default()).unwrap();
    let seqs = sessionize_all(&logs, DEFAULT_GAP_SECONDS);
    let actions = seqs.iter().map(LabeledSequence::action_count).sum();
    let ids: Vec<String> = seqs.iter().map(|s| s.student_id.clone()).collect();
    let defaults = TrainConfig::default();
    let split = split_students(&ids, defaults.split_seed).unwrap();
    let pick = |set: &[String]| -> Vec<LabeledSequence> {
        seqs.iter()
            .filter(|s| set.binary_search(&s.student_id).is_ok())
            .cloned()
            .collect()
    };
    let (train_seqs, val_seqs, test_seqs) = (pick(&split.train), pick(&split.validation), pick(&split.test));
    let encode = |s: &[LabeledSequence]| encode_all(s, DEFAULT_UTC_OFFSET_MINUTES);
    let (train_set, val_set, test_set) = (encode(&train_seqs), encode(&val_seqs), encode(&test_seqs));
    let run = |level: Level| {
        let config = TrainConfig {
            level,
            ..TrainConfig::default()
        };
        let out = train(&config, &train_set, &val_set).unwrap();
        let (report, _) = evaluate(&out.params, &test_seqs, &test_set, level).unwrap();
        LevelRun {
            history: format_history(&out.history),
            report,
        }
    };
    let student = run(Level::Student);
    let session = run(Level::Session);
    EndToEnd {
        student,
        session,
        actions,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn criterion_6(run: &EndToEnd) -> Outcome {
    let s = run.student.report.global_auc.unwrap_or(f64::NAN);
    let b = run.session.report.global_auc.unwrap_or(f64::NAN);
    outcome(
        s >= 0.75 && s - b >= 0.05,
        format!(
            "student AUC {s:.4} (>= 0.75), session AUC {b:.4}, gap {:.4} (>= 0.05); {} actions, {:.0}s for both levels",
            s - b,
            run.actions,
            run.seconds
        ),
    )
}

fn criterion_7(run: &EndToEnd) -> Outcome {
    let (div, rest) = run.student.report.div5_auc;
    let (div, rest) = (div.unwrap_or(f64::NAN), rest.unwrap_or(f64::NAN));
    outcome(
        div - rest >= 0.03,
        format!(
            "student-level AUC on length % 5 == 0 sessions {div:.4} vs others {rest:.4}, gap {:.4} (>= 0.03)",
            div - rest
        ),
    )
}

fn criterion_8(run: &EndToEnd) -> Outcome {
    let Some(t) = &run.student.report.trajectory else {
        return outcome(false, "no session reaches 20 actions");
    };
    let (eos, c10, c19, c20) = (t.eos_mean, t.chunks[9], t.chunks[18], t.chunks[19]);
    outcome(
        eos - c10 >= 0.1 && c20 > c19,
        format!(
            "mean prob at EoS {eos:.4} vs chunk 10 {c10:.4} (gap {:.4} >= 0.1); chunk 20 {c20:.4} > chunk 19 {c19:.4}",
            eos - c10
        ),
    )
}

/// History without the wallclock column.
fn history_without_seconds(history: &str) -> String {
    history
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn criterion_9(first: &EndToEnd) -> Outcome {
    let second = end_to_end();
    let same = |a: &LevelRun, b: &LevelRun| {
        history_without_seconds(&a.history) == history_without_seconds(&b.history)
            && a.report.to_text() == b.report.to_text()
    };
    let student = same(&first.student, &second.student);
    let session = same(&first.session, &second.session);
    outcome(
        student && session,
        format!("repeat run identical (history minus wallclock, full report): student {student}, session {session}"),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let logs = generate(&GenConfig {
        n_students: 5,
        ..GenConfig::default()
    })
    .unwrap();
    let students: Vec<EncodedStudent> =
        encode_all(&sessionize_all(&logs, DEFAULT_GAP_SECONDS), DEFAULT_UTC_OFFSET_MINUTES);
    let actions: usize = students.iter().map(EncodedStudent::len).sum();
    let config = TrainConfig {
        max_epochs: 200,
        patience: 0,
        dropout_p: 0.0,
        // One update per student per epoch; a single 5-student batch gives 200 updates in total.
        batch_size: 1,
        ..TrainConfig::default()
    };
    let out = train(&config, &students, &students).unwrap();
    let (epoch, loss) = out
        .history
        .iter()
        .map(|r| (r.epoch, r.train_loss))
        .find(|&(_, l)| l < 0.05)
        .unwrap_or((0, out.history.last().map_or(f64::NAN, |r| r.train_loss)));
    outcome(
        epoch > 0,
        if epoch > 0 {
            format!("5 students, {actions} actions: training loss {loss:.4} < 0.05 at epoch {epoch} (<= 200)")
        } else {
            format!("5 students, {actions} actions: training loss still {loss:.4} after 200 epochs")
        },
    )
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut round_trips = true;
    for (name, dims) in [("toy", Dims::fan_in(FRAME_DIM, 4)), ("full", Dims::standard())] {
        let mut p = init_params(dims, 11);
        p.out_b = -0.123_456_789_012_345_67;
        let path = dir.path().join(format!("{name}.ckpt"));
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        let bits =
            |m: &ModelParams| -> Vec<u64> { m.tensors().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect() };
        round_trips &= q.dims() == dims && bits(&p) == bits(&q);
    }

    let good = encode(&init_params(Dims::fan_in(FRAME_DIM, 4), 1));
    let mut corruptions: Vec<(&str, Vec<u8>)> = vec![
        ("empty", Vec::new()),
        ("truncated header", good[..10].to_vec()),
        ("truncated body", good[..good.len() - 8].to_vec()),
        ("trailing bytes", [good.as_slice(), &[0u8; 8]].concat()),
    ];
    let mut bad_magic = good.clone();
    bad_magic[..4].copy_from_slice(b"EOS2");
    corruptions.push(("bad magic", bad_magic));
    let mut bad_width = good.clone();
    bad_width[8..12].copy_from_slice(&5u32.to_le_bytes());
    corruptions.push(("hidden width changed", bad_width));
    let mut bad_count = good.clone();
    bad_count[20..24].copy_from_slice(&1u32.to_le_bytes());
    corruptions.push(("layer count changed", bad_count));
    let mut nan = good.clone();
    let at = nan.len() - 8;
    nan[at..].copy_from_slice(&f64::NAN.to_le_bytes());
    corruptions.push(("NaN weight", nan));
    assert_eq!(&good[..4], MAGIC);

    let mut rejected = 0;
    let mut leaks = Vec::new();
    for (name, bytes) in &corruptions {
        let path = dir.path().join("corrupt.ckpt");
        std::fs::write(&path, bytes).unwrap();
        match (decode(bytes, &path), load_checkpoint(&path)) {
            (Err(EosError::Checkpoint { .. }), Err(EosError::Checkpoint { .. })) => rejected += 1,
            _ => leaks.push(*name),
        }
    }
    outcome(
        round_trips && leaks.is_empty(),
        format!(
            "toy and full (400) round trips bit-identical: {round_trips}; {rejected}/{} corruptions rejected with checkpoint errors{}",
            corruptions.len(),
            if leaks.is_empty() { String::new() } else { format!(", accepted: {leaks:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 12

fn criterion_12() -> Outcome {
    let config = GenConfig {
        n_students: 10_000,
        ..GenConfig::default()
    };
    let summary = summarize(&generate(&config).unwrap(), DEFAULT_GAP_SECONDS);
    let targets = [
        (HomeworkClass::Only, 0.483),
        (HomeworkClass::Partly, 0.255),
        (HomeworkClass::None, 0.262),
    ];
    let mut fractions_ok = true;
    let mut parts = Vec::new();
    for (class, target) in targets {
        let f = summary.fraction(class);
        fractions_ok &= (f - target).abs() <= 0.02;
        parts.push(format!(
            "{} {:.1}% (target {:.1}%)",
            class.key(),
            100.0 * f,
            100.0 * target
        ));
    }
    let peaks = summary.length_peaks();
    let missing: Vec<usize> = config
        .homework_length_choices
        .iter()
        .copied()
        .filter(|c| !peaks.contains(c))
        .collect();
    outcome(
        fractions_ok && missing.is_empty(),
        format!(
            "{}; local maxima at lengths {:?} include every homework length {:?}{}",
            parts.join(", "),
            &peaks[..peaks.len().min(10)],
            config.homework_length_choices,
            if missing.is_empty() {
                String::new()
            } else {
                format!(", missing {missing:?}")
            }
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let runs = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut failed = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!(
            "criterion {n:>2}: {} - {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed.push(n);
        }
    };
    let simple: [(usize, fn() -> Outcome); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (10, criterion_10),
        (11, criterion_11),
        (12, criterion_12),
    ];
    for &(n, f) in simple.iter().filter(|(n, _)| runs(*n)) {
        report(n, f());
    }
    if (6..=9).any(runs) {
        let run = end_to_end();
        for (n, f) in [
            (6, criterion_6 as fn(&EndToEnd) -> Outcome),
            (7, criterion_7),
            (8, criterion_8),
            (9, criterion_9),
        ] {
            if runs(n) {
                report(n, f(&run));
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
