//! Pooled ROC AUC, stratified AUC tables, the within-session probability
//! trajectory, and scoring (batch and streaming).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use ndarray::Array1;

use crate::error::{EosError, Result};
use crate::features::{Featurizer, PrevAction, FRAME_DIM};
use crate::ingest::RawAction;
use crate::neural::{forward_from, predict_many, LstmState, ModelParams, SeqInput};
use crate::sessionize::{HomeworkClass, LabeledSequence};
use crate::training::{EncodedStudent, Level};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` unless both classes are present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of average ranks (1-based) over positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let positives = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg_rank * positives as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub const INTERVALS: [&str; 11] = [
    "1-5", "6-10", "11-20", "21-30", "31-40", "41-50", "51-60", "61-70", "71-80", "81-90", "91-max",
];

/// Interval key of a positive count, matching the rows of the length and usage tables.
pub fn interval_key(n: usize) -> &'static str {
    match n {
        0..=5 => INTERVALS[0],
        6..=10 => INTERVALS[1],
        11..=90 => INTERVALS[(n - 1) / 10 + 1],
        _ => INTERVALS[10],
    }
}

/// One student's predictions with the session metadata the strata need.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredStudent {
    pub student_id: String,
    pub session_lengths: Vec<usize>,
    pub homework: Vec<HomeworkClass>,
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredStudent {
    pub fn new(seq: &LabeledSequence, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), seq.action_count(), "one probability per action");
        ScoredStudent {
            student_id: seq.student_id.clone(),
            session_lengths: seq.sessions.iter().map(|s| s.len()).collect(),
            homework: seq.sessions.iter().map(|s| s.homework_class()).collect(),
            probs,
            labels: seq.labels.clone(),
        }
    }

    /// `(session index, offset of its first action, length)`.
    fn sessions(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.session_lengths
            .iter()
            .scan(0usize, |start, &len| {
                let s = *start;
                *start += len;
                Some((s, len))
            })
            .enumerate()
            .map(|(k, (s, len))| (k, s, len))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Mean probability in each 5% slice of a session.
    pub chunks: [f64; 20],
    /// Mean probability at the true last action.
    pub eos_mean: f64,
    pub sessions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub global_auc: Option<f64>,
    pub homework_auc: BTreeMap<HomeworkClass, Option<f64>>,
    pub length_auc: Vec<(&'static str, Option<f64>)>,
    /// (length divisible by 5, not divisible).
    pub div5_auc: (Option<f64>, Option<f64>),
    pub usage_auc: Vec<(&'static str, Option<f64>)>,
    pub trajectory: Option<Trajectory>,
}

#[derive(Default)]
struct Pool {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl Pool {
    fn extend(&mut self, scores: &[f64], labels: &[u8]) {
        self.scores.extend_from_slice(scores);
        self.labels.extend_from_slice(labels);
    }

    fn auc(&self) -> Option<f64> {
        auc(&self.scores, &self.labels)
    }
}

/// Stratified AUCs: each stratum pools all actions of its sessions (or, for
/// usage, of its students) and ranks them together.
pub fn stratified_aucs(scored: &[ScoredStudent]) -> EvalReport {
    let mut global = Pool::default();
    let mut homework: BTreeMap<HomeworkClass, Pool> = BTreeMap::new();
    let mut length: BTreeMap<&'static str, Pool> = BTreeMap::new();
    let mut usage: BTreeMap<&'static str, Pool> = BTreeMap::new();
    let (mut div5, mut not_div5) = (Pool::default(), Pool::default());

    for s in scored {
        global.extend(&s.probs, &s.labels);
        usage
            .entry(interval_key(s.session_lengths.len()))
            .or_default()
            .extend(&s.probs, &s.labels);
        for (k, start, len) in s.sessions() {
            let (p, l) = (&s.probs[start..start + len], &s.labels[start..start + len]);
            homework.entry(s.homework[k]).or_default().extend(p, l);
            length.entry(interval_key(len)).or_default().extend(p, l);
            if len % 5 == 0 { &mut div5 } else { &mut not_div5 }.extend(p, l);
        }
    }

    let table = |pools: &BTreeMap<&'static str, Pool>| {
        INTERVALS
            .iter()
            .map(|&key| (key, pools.get(key).and_then(Pool::auc)))
            .collect()
    };
    EvalReport {
        global_auc: global.auc(),
        homework_auc: HomeworkClass::ALL
            .iter()
            .map(|&c| (c, homework.get(&c).and_then(Pool::auc)))
            .collect(),
        length_auc: table(&length),
        div5_auc: (div5.auc(), not_div5.auc()),
        usage_auc: table(&usage),
        trajectory: trajectory(scored),
    }
}

pub const TRAJECTORY_MIN_LENGTH: usize = 20;

/// Profiles sessions of at least 20 actions: action `j` of a length-`L`
/// session falls in slice `⌊20j/L⌋`. Each session's slice means are averaged
/// across sessions.
pub fn trajectory(scored: &[ScoredStudent]) -> Option<Trajectory> {
    let mut sums = [0.0; 20];
    let mut eos = 0.0;
    let mut sessions = 0usize;
    for s in scored {
        for (_, start, len) in s.sessions() {
            if len < TRAJECTORY_MIN_LENGTH {
                continue;
            }
            let probs = &s.probs[start..start + len];
            let mut chunk_sum = [0.0; 20];
            let mut chunk_n = [0usize; 20];
            for (j, &p) in probs.iter().enumerate() {
                let c = 20 * j / len;
                chunk_sum[c] += p;
                chunk_n[c] += 1;
            }
            for c in 0..20 {
                sums[c] += chunk_sum[c] / chunk_n[c] as f64;
            }
            eos += probs[len - 1];
            sessions += 1;
        }
    }
    (sessions > 0).then(|| Trajectory {
        chunks: sums.map(|v| v / sessions as f64),
        eos_mean: eos / sessions as f64,
        sessions,
    })
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl EvalReport {
    /// `metric,stratum,value` lines; absent strata print `NA`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("metric,stratum,value\n");
        let mut line = |metric: &str, stratum: &str, v: Option<f64>| {
            let _ = writeln!(out, "{metric},{stratum},{}", fmt_value(v));
        };
        line("global_auc", "all", self.global_auc);
        for (class, v) in &self.homework_auc {
            line("homework_auc", class.key(), *v);
        }
        for (key, v) in &self.length_auc {
            line("length_auc", key, *v);
        }
        line("div5_auc", "divisible", self.div5_auc.0);
        line("div5_auc", "not_divisible", self.div5_auc.1);
        for (key, v) in &self.usage_auc {
            line("usage_auc", key, *v);
        }
        for c in 0..20 {
            line(
                "trajectory",
                &(c + 1).to_string(),
                self.trajectory.as_ref().map(|t| t.chunks[c]),
            );
        }
        line("trajectory", "eos", self.trajectory.as_ref().map(|t| t.eos_mean));
        out
    }

    /// Plot data: `chunk,mean_probability` for chunks 1 to 20.
    pub fn trajectory_text(&self) -> String {
        let mut out = String::from("chunk,mean_probability\n");
        for c in 0..20 {
            let _ = writeln!(
                out,
                "{},{}",
                c + 1,
                fmt_value(self.trajectory.as_ref().map(|t| t.chunks[c]))
            );
        }
        out
    }
}

/// Inference-mode probabilities for every action, in action order.
pub fn score(params: &ModelParams, students: &[EncodedStudent], level: Level) -> Result<Vec<Vec<f64>>> {
    check_dims(params)?;
    let masks: Vec<Vec<bool>> = students.iter().map(|s| s.reset_mask(level)).collect();
    let inputs: Vec<SeqInput<'_>> = students
        .iter()
        .zip(&masks)
        .map(|(s, m)| SeqInput::unlabeled(&s.frames, m))
        .collect();
    predict_many(params, &inputs, 64, 200)
}

fn check_dims(params: &ModelParams) -> Result<()> {
    let input = params.dims().input;
    if input != FRAME_DIM {
        return Err(EosError::Invalid(format!(
            "checkpoint expects {input} input features, frames have {FRAME_DIM}"
        )));
    }
    Ok(())
}

/// Scores and evaluates aligned sequences and encodings.
pub fn evaluate(
    params: &ModelParams,
    seqs: &[LabeledSequence],
    encoded: &[EncodedStudent],
    level: Level,
) -> Result<(EvalReport, Vec<ScoredStudent>)> {
    let probs = score(params, encoded, level)?;
    let scored: Vec<ScoredStudent> = seqs.iter().zip(probs).map(|(s, p)| ScoredStudent::new(s, p)).collect();
    Ok((stratified_aucs(&scored), scored))
}

/// Per-action dump `student_id,index,label,prob`.
pub fn format_scores(scored: &[ScoredStudent]) -> String {
    let mut out = String::from("student_id,index,label,prob\n");
    for s in scored {
        for (i, (&l, &p)) in s.labels.iter().zip(&s.probs).enumerate() {
            let _ = writeln!(out, "{},{i},{l},{p}", s.student_id);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct StreamState {
    features: Featurizer,
    lstm: LstmState,
}

/// Scores actions as they arrive, one student stream at a time. State can
/// be persisted so a later run continues where this one stopped.
#[derive(Debug, Clone)]
pub struct StreamScorer<'a> {
    params: &'a ModelParams,
    level: Level,
    gap_seconds: i64,
    utc_offset_minutes: i32,
    students: BTreeMap<String, StreamState>,
}

impl<'a> StreamScorer<'a> {
    pub fn new(params: &'a ModelParams, level: Level, gap_seconds: i64, utc_offset_minutes: i32) -> Result<Self> {
        check_dims(params)?;
        Ok(StreamScorer {
            params,
            level,
            gap_seconds,
            utc_offset_minutes,
            students: BTreeMap::new(),
        })
    }

    /// Scores a chronological run of one student's actions.
    pub fn push_many(&mut self, actions: &[RawAction]) -> Result<Vec<f64>> {
        let Some(first) = actions.first() else {
            return Ok(Vec::new());
        };
        let hidden = self.params.dims().hidden;
        let offset = self.utc_offset_minutes;
        let state = self
            .students
            .entry(first.student_id.clone())
            .or_insert_with(|| StreamState {
                features: Featurizer::new(offset),
                lstm: LstmState::zeros(hidden),
            });
        let mut frames = Vec::with_capacity(actions.len());
        let mut resets = Vec::with_capacity(actions.len());
        let mut scratch = state.features.clone();
        for a in actions {
            if a.student_id != first.student_id {
                return Err(EosError::Invalid("push_many takes one student at a time".into()));
            }
            let starts = match scratch.previous() {
                None => true,
                Some(prev) if a.timestamp < prev.timestamp => {
                    return Err(EosError::Invalid(format!(
                        "student {}: timestamp {} precedes {}",
                        a.student_id, a.timestamp, prev.timestamp
                    )))
                }
                Some(prev) => a.timestamp - prev.timestamp > self.gap_seconds,
            };
            frames.push(scratch.push(a, starts));
            resets.push(self.level == Level::Session && starts);
        }
        let (probs, lstm) = forward_from(self.params, &frames, &resets, &state.lstm)?;
        state.features = scratch;
        state.lstm = lstm;
        Ok(probs)
    }

    pub fn push(&mut self, action: &RawAction) -> Result<f64> {
        Ok(self.push_many(std::slice::from_ref(action))?[0])
    }

    /// One line per student: id, last timestamp, lesson, topic, session gap
    /// feature, hidden state, cell state (tab separated; vectors space separated).
    pub fn save_state<W: Write>(&self, mut w: W) -> Result<()> {
        for (id, s) in &self.students {
            let Some(prev) = s.features.previous() else { continue };
            let join = |v: &Array1<f64>| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
            writeln!(
                w,
                "{id}\t{}\t{}\t{}\t{}\t{}\t{}",
                prev.timestamp,
                prev.lesson_id,
                prev.topic_id,
                s.features.session_gap(),
                join(&s.lstm.h),
                join(&s.lstm.c)
            )?;
        }
        Ok(())
    }

    pub fn load_state<R: BufRead>(&mut self, r: R) -> Result<()> {
        let hidden = self.params.dims().hidden;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| EosError::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad("expected 7 tab-separated fields"));
            }
            let vector = |s: &str| -> Result<Array1<f64>> {
                let v: Vec<f64> = s
                    .split(' ')
                    .map(|x| x.parse::<f64>().map_err(|_| bad("bad state value")))
                    .collect::<Result<_>>()?;
                if v.len() != hidden {
                    return Err(bad("state width does not match the checkpoint"));
                }
                Ok(Array1::from(v))
            };
            let prev = PrevAction {
                timestamp: f[1].parse().map_err(|_| bad("bad timestamp"))?,
                lesson_id: f[2].to_string(),
                topic_id: f[3].to_string(),
            };
            let gap: f64 = f[4].parse().map_err(|_| bad("bad session gap"))?;
            self.students.insert(
                f[0].to_string(),
                StreamState {
                    features: Featurizer::restore(self.utc_offset_minutes, Some(prev), gap),
                    lstm: LstmState {
                        h: vector(f[5])?,
                        c: vector(f[6])?,
                    },
                },
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_aucs() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]), Some(1.0));
        assert_eq!(auc(&[0.3; 6], &[1, 0, 0, 1, 0, 0]), Some(0.5));
        assert_eq!(auc(&[0.8, 0.6, 0.4, 0.2], &[1, 0, 1, 0]), Some(0.75));
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), None);
        assert_eq!(auc(&[], &[]), None);
    }

    #[test]
    fn interval_keys() {
        assert_eq!(interval_key(1), "1-5");
        assert_eq!(interval_key(5), "1-5");
        assert_eq!(interval_key(7), "6-10");
        assert_eq!(interval_key(11), "11-20");
        assert_eq!(interval_key(20), "11-20");
        assert_eq!(interval_key(21), "21-30");
        assert_eq!(interval_key(90), "81-90");
        assert_eq!(interval_key(91), "91-max");
        assert_eq!(interval_key(5000), "91-max");
    }

    fn scored(lengths: &[usize], probs: Vec<f64>) -> ScoredStudent {
        let labels = lengths
            .iter()
            .flat_map(|&n| (0..n).map(move |j| u8::from(j + 1 == n)))
            .collect();
        ScoredStudent {
            student_id: "s".into(),
            session_lengths: lengths.to_vec(),
            homework: vec![HomeworkClass::None; lengths.len()],
            probs,
            labels,
        }
    }

    #[test]
    fn trajectory_chunking() {
        let probs: Vec<f64> = (0..20).map(|j| j as f64).collect();
        let t = trajectory(&[scored(&[20], probs)]).unwrap();
        for c in 0..20 {
            assert_eq!(t.chunks[c], c as f64);
        }
        assert_eq!(t.eos_mean, 19.0);

        let probs: Vec<f64> = (0..100).map(|j| (j / 5) as f64).collect();
        let t = trajectory(&[scored(&[100], probs)]).unwrap();
        assert_eq!(t.chunks[7], 7.0);

        let t = trajectory(&[scored(&[25, 3, 40], vec![0.3; 68])]).unwrap();
        assert!(t.chunks.iter().all(|&c| (c - 0.3).abs() < 1e-15));
        assert_eq!(t.sessions, 2);

        assert!(trajectory(&[scored(&[19], vec![0.5; 19])]).is_none());
    }

    #[test]
    fn uniform_length_strata_are_degenerate() {
        let s = scored(
            &[5, 5, 5],
            (0..15).map(|i| (i % 5) as f64 / 4.0 + 0.01 * i as f64).collect(),
        );
        let r = stratified_aucs(&[s]);
        let present: Vec<_> = r.length_auc.iter().filter(|(_, v)| v.is_some()).collect();
        assert_eq!(present.len(), 1);
        assert_eq!(present[0].0, "1-5");
        assert_eq!(r.div5_auc.0, r.global_auc);
        assert_eq!(r.div5_auc.1, None);
        assert_eq!(r.usage_auc[0].1, r.global_auc);
    }

    #[test]
    fn report_lists_every_stratum() {
        let r = stratified_aucs(&[scored(&[2, 3], vec![0.1, 0.9, 0.2, 0.3, 0.8])]);
        let text = r.to_text();
        assert_eq!(text.lines().count(), 1 + 1 + 3 + 11 + 2 + 11 + 21);
        assert!(text.contains("homework_auc,only,NA"));
        assert!(text.contains("global_auc,all,1\n"));
        assert_eq!(r.trajectory_text().lines().count(), 21);
    }
}
