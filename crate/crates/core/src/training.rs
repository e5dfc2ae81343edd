//! Re-weighting, student splits, truncated-BPTT batching and the training
//! loop with validation-AUC early stopping.

use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EosError, Result};
use crate::evaluation::auc;
use crate::features::{featurize, FeatureFrame, FRAME_DIM};
use crate::kv::KvMap;
use crate::neural::{
    backward_window, forward_window, init_params, rmsprop_update, BatchState, Dims, Dropout, ModelParams, OptState,
    PackedWindow,
};
use crate::sessionize::LabeledSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Level {
    /// State persists across a student's sessions.
    #[default]
    Student,
    /// State resets at every session start.
    Session,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Student => "student",
            Level::Session => "session",
        }
    }
}

impl std::str::FromStr for Level {
    type Err = EosError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(Level::Student),
            "session" => Ok(Level::Session),
            other => Err(EosError::Config(format!("unknown level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout_p: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub tbptt_window: usize,
    pub max_epochs: usize,
    pub level: Level,
    /// Seeds initialization, shuffling and dropout.
    pub seed: u64,
    /// Seeds the train/validation/test split.
    pub split_seed: u64,
    pub hidden_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            dropout_p: 0.4,
            batch_size: 64,
            patience: 3,
            tbptt_window: 200,
            max_epochs: 50,
            level: Level::Student,
            seed: 1,
            split_seed: 1,
            hidden_size: 400,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(EosError::Config("dropout_p must be in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.tbptt_window == 0 || self.hidden_size == 0 {
            return Err(EosError::Config(
                "batch_size, tbptt_window and hidden_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EosError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims::fan_in(FRAME_DIM, self.hidden_size)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("learning_rate", self.learning_rate);
        kv.insert("dropout_p", self.dropout_p);
        kv.insert("batch_size", self.batch_size);
        kv.insert("patience", self.patience);
        kv.insert("tbptt_window", self.tbptt_window);
        kv.insert("max_epochs", self.max_epochs);
        kv.insert("level", self.level.as_str());
        kv.insert("seed", self.seed);
        kv.insert("split_seed", self.split_seed);
        kv.insert("hidden_size", self.hidden_size);
        kv
    }

    /// Reads the keys this config knows, leaving others in `kv` untouched.
    pub fn read_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.read("learning_rate", &mut self.learning_rate)?;
        kv.read("dropout_p", &mut self.dropout_p)?;
        kv.read("batch_size", &mut self.batch_size)?;
        kv.read("patience", &mut self.patience)?;
        kv.read("tbptt_window", &mut self.tbptt_window)?;
        kv.read("max_epochs", &mut self.max_epochs)?;
        kv.read("level", &mut self.level)?;
        kv.read("seed", &mut self.seed)?;
        kv.read("split_seed", &mut self.split_seed)?;
        kv.read("hidden_size", &mut self.hidden_size)?;
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let mut config = TrainConfig::default();
        config.read_kv(&mut kv)?;
        kv.finish()?;
        config.validate()?;
        Ok(config)
    }
}

/// Weight `actions / sessions` on every End-of-Session action, 1 elsewhere.
pub fn student_weights(seq: &LabeledSequence) -> Vec<f64> {
    let sessions = seq.session_count();
    if sessions == 0 {
        return Vec::new();
    }
    let eos = seq.action_count() as f64 / sessions as f64;
    seq.labels.iter().map(|&l| if l == 1 { eos } else { 1.0 }).collect()
}

/// Weight equal to the session's own length on its End-of-Session action.
pub fn session_weights(seq: &LabeledSequence) -> Vec<f64> {
    seq.sessions
        .iter()
        .flat_map(|s| {
            let n = s.len();
            (0..n).map(move |j| if j + 1 == n { n as f64 } else { 1.0 })
        })
        .collect()
}

/// One student's encoded history.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedStudent {
    pub student_id: String,
    pub frames: Vec<FeatureFrame>,
    pub labels: Vec<f64>,
    pub session_starts: Vec<bool>,
    pub student_weights: Vec<f64>,
    pub session_weights: Vec<f64>,
}

impl EncodedStudent {
    pub fn new(seq: &LabeledSequence, utc_offset_minutes: i32) -> Self {
        let frames = featurize(seq, utc_offset_minutes);
        let session_starts = seq.sessions.iter().flat_map(|s| (0..s.len()).map(|j| j == 0)).collect();
        EncodedStudent {
            student_id: seq.student_id.clone(),
            frames,
            labels: seq.labels.iter().map(|&l| f64::from(l)).collect(),
            session_starts,
            student_weights: student_weights(seq),
            session_weights: session_weights(seq),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn reset_mask(&self, level: Level) -> Vec<bool> {
        match level {
            Level::Student => vec![false; self.len()],
            Level::Session => self.session_starts.clone(),
        }
    }

    pub fn weights(&self, level: Level) -> &[f64] {
        match level {
            Level::Student => &self.student_weights,
            Level::Session => &self.session_weights,
        }
    }
}

pub fn encode_all(seqs: &[LabeledSequence], utc_offset_minutes: i32) -> Vec<EncodedStudent> {
    crate::par::map(seqs, |s| EncodedStudent::new(s, utc_offset_minutes))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Holds out ⌊0.1·N⌉ students for test and ⌊0.1·(N − test)⌉ of the rest for
/// validation. Each part is returned sorted.
pub fn split_students(student_ids: &[String], seed: u64) -> Result<Split> {
    let mut ids = student_ids.to_vec();
    ids.sort();
    ids.dedup();
    let n = ids.len();
    if n < 10 {
        return Err(EosError::Invalid(format!(
            "need at least 10 students to split, found {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test_n = (0.1 * n as f64).round() as usize;
    let val_n = (0.1 * (n - test_n) as f64).round() as usize;
    let mut test = ids[..test_n].to_vec();
    let mut validation = ids[test_n..test_n + val_n].to_vec();
    let mut train = ids[test_n + val_n..].to_vec();
    test.sort();
    validation.sort();
    train.sort();
    Ok(Split {
        train,
        validation,
        test,
    })
}

/// A window of a batch, padded to its longest member.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedWindow {
    /// steps × members × features; padded steps are all-zero frames.
    pub frames: Array3<f64>,
    pub valid: Array2<bool>,
    pub reset: Array2<bool>,
    pub labels: Array2<f64>,
    pub weights: Array2<f64>,
}

impl PaddedWindow {
    pub fn steps(&self) -> usize {
        self.frames.dim().0
    }

    /// Members with at least one valid step, which are always a prefix.
    pub fn live_rows(&self) -> usize {
        if self.steps() == 0 {
            0
        } else {
            self.valid.row(0).iter().filter(|&&v| v).count()
        }
    }

    pub fn valid_steps(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Drops padding. Members must be ordered longest first.
    pub fn pack(&self) -> PackedWindow {
        let (steps, _, feat) = self.frames.dim();
        let step_rows: Vec<usize> = (0..steps)
            .map(|t| self.valid.row(t).iter().take_while(|&&v| v).count())
            .collect();
        let n: usize = step_rows.iter().sum();
        let mut x = Array2::zeros((n, feat));
        let mut reset = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut p = 0;
        for (t, &k) in step_rows.iter().enumerate() {
            for r in 0..k {
                x.row_mut(p).assign(&self.frames.slice(ndarray::s![t, r, ..]));
                reset.push(self.reset[[t, r]]);
                labels.push(self.labels[[t, r]]);
                weights.push(self.weights[[t, r]]);
                p += 1;
            }
        }
        PackedWindow::from_parts(step_rows, x, reset, labels, weights)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Indices into the sequence list, longest first.
    pub members: Vec<usize>,
    /// Consecutive truncation windows; state carries from one to the next.
    pub windows: Vec<PaddedWindow>,
}

impl Batch {
    pub fn weight_sum(&self) -> f64 {
        self.windows.iter().map(|w| w.weights.sum()).sum()
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined inputs.
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pools of this many batches are length-sorted before being cut into batches.
const BUCKET_POOL: usize = 4;

/// Builds one epoch of batches: students shuffled by `(seed, epoch)`,
/// length-bucketed, cut into batches of at most `batch_size`, each member's
/// sequence cut into windows of at most `window` steps.
pub fn make_batches(
    seqs: &[EncodedStudent],
    level: Level,
    batch_size: usize,
    window: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let window = window.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, 0x5eed));
    let mut order: Vec<usize> = (0..seqs.len()).filter(|&i| !seqs[i].is_empty()).collect();
    order.shuffle(&mut rng);

    let mut groups: Vec<Vec<usize>> = Vec::new();
    for pool in order.chunks(batch_size * BUCKET_POOL) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| std::cmp::Reverse(seqs[i].len()));
        groups.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    groups.shuffle(&mut rng);

    groups
        .into_iter()
        .map(|members| {
            let resets: Vec<Vec<bool>> = members.iter().map(|&i| seqs[i].reset_mask(level)).collect();
            let longest = seqs[members[0]].len();
            let windows = (0..longest)
                .step_by(window)
                .map(|start| {
                    let steps = window.min(longest - start);
                    let b = members.len();
                    let mut w = PaddedWindow {
                        frames: Array3::zeros((steps, b, FRAME_DIM)),
                        valid: Array2::from_elem((steps, b), false),
                        reset: Array2::from_elem((steps, b), false),
                        labels: Array2::zeros((steps, b)),
                        weights: Array2::zeros((steps, b)),
                    };
                    for (r, &i) in members.iter().enumerate() {
                        let s = &seqs[i];
                        let weights = s.weights(level);
                        for t in 0..steps {
                            let at = start + t;
                            if at >= s.len() {
                                break;
                            }
                            for (k, &v) in s.frames[at].iter().enumerate() {
                                w.frames[[t, r, k]] = v;
                            }
                            w.valid[[t, r]] = true;
                            w.reset[[t, r]] = resets[r][at];
                            w.labels[[t, r]] = s.labels[at];
                            w.weights[[t, r]] = weights[at];
                        }
                    }
                    w
                })
                .collect();
            Batch { members, windows }
        })
        .collect()
}

/// Forward and backward over every window of a batch with state carried
/// across windows. Returns the batch loss (weighted mean over valid steps)
/// and its truncated gradient.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &Batch,
    dropout_p: f64,
    dropout_seed: Option<u64>,
) -> Result<(f64, ModelParams)> {
    let dims = params.dims();
    let mut grads = ModelParams::zeros(dims);
    let norm = batch.weight_sum();
    let mut state = BatchState::zeros(batch.members.len(), dims.hidden);
    let mut loss = 0.0;
    for (wi, window) in batch.windows.iter().enumerate() {
        let packed = window.pack();
        let dropout = Dropout::new(dropout_p, dropout_seed.map(|s| mix_seed(s, wi as u64, 1)));
        let trace = forward_window(params, &packed, &mut state, dropout)?;
        loss += backward_window(params, &packed, &trace, norm, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Pooled AUC of inference-mode predictions at the given level.
pub fn validation_auc(params: &ModelParams, seqs: &[EncodedStudent], level: Level) -> Result<Option<f64>> {
    let probs = crate::evaluation::score(params, seqs, level)?;
    let scores: Vec<f64> = probs.into_iter().flatten().collect();
    let labels: Vec<u8> = seqs.iter().flat_map(|s| s.labels.iter().map(|&l| l as u8)).collect();
    Ok(auc(&scores, &labels))
}

/// Patience-based stopping on a metric where larger is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: Option<usize>,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    /// `patience == 0` never stops.
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience: (patience > 0).then_some(patience),
            best: None,
            since_best: 0,
        }
    }

    /// Records the metric for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some((_, best)) => metric > best,
        };
        if improved {
            self.best = Some((epoch, metric));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.patience.is_some_and(|p| self.since_best >= p)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// History as delimited text: `epoch,train_loss,val_auc,seconds`.
pub fn format_history(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_auc,seconds\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{:.3}\n",
            r.epoch, r.train_loss, r.val_auc, r.seconds
        ));
    }
    out
}

pub fn train(
    config: &TrainConfig,
    train_set: &[EncodedStudent],
    validation_set: &[EncodedStudent],
) -> Result<TrainOutcome> {
    train_with(config, train_set, validation_set, |_| {})
}

/// Trains from a fresh initialization; `on_epoch` sees each record as it is produced.
pub fn train_with(
    config: &TrainConfig,
    train_set: &[EncodedStudent],
    validation_set: &[EncodedStudent],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.iter().all(EncodedStudent::is_empty) || validation_set.is_empty() {
        return Err(EosError::Invalid(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let dims = config.dims();
    let mut params = init_params(dims, config.seed);
    let mut opt = OptState::new(dims);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_params = params.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let batches = make_batches(
            train_set,
            config.level,
            config.batch_size,
            config.tbptt_window,
            config.seed,
            epoch,
        );
        let mut loss_sum = 0.0;
        let mut weight_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let seed = mix_seed(config.seed, epoch as u64, bi as u64 + 1);
            let (loss, grads) = batch_gradient(&params, batch, config.dropout_p, Some(seed)).map_err(|e| match e {
                EosError::NonFinite { .. } => EosError::Diverged {
                    epoch,
                    batch: bi,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(EosError::Diverged { epoch, batch: bi, loss });
            }
            rmsprop_update(&mut params, &grads, &mut opt, config.learning_rate);
            let w = batch.weight_sum();
            loss_sum += loss * w;
            weight_sum += w;
        }
        let val_auc = validation_auc(&params, validation_set, config.level)?
            .ok_or_else(|| EosError::Invalid("validation set needs both session ends and other actions".into()))?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / weight_sum,
            val_auc,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
        if stopper.observe(epoch, val_auc) {
            best_params.clone_from(&params);
        }
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }

    let best_epoch = stopper.best().map_or(0, |(e, _)| e);
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{ActionKind, RawAction, StudentLog};
    use crate::sessionize::{label, segment};

    fn sequence(session_lengths: &[usize]) -> LabeledSequence {
        let mut actions = Vec::new();
        let mut t = 1_600_000_000;
        for &len in session_lengths {
            for _ in 0..len {
                actions.push(RawAction {
                    student_id: "s".into(),
                    timestamp: t,
                    kind: ActionKind::Material,
                    lesson_id: "L".into(),
                    topic_id: "T".into(),
                    correct: None,
                    homework: false,
                });
                t += 30;
            }
            t += 4000;
        }
        label(segment(
            &StudentLog {
                student_id: "s".into(),
                actions,
            },
            900,
        ))
    }

    #[test]
    fn four_hundred_actions_in_sixteen_sessions() {
        let w = student_weights(&sequence(&[25; 16]));
        assert_eq!(w.len(), 400);
        assert_eq!(w.iter().filter(|&&x| x == 25.0).count(), 16);
        assert_eq!(w.iter().filter(|&&x| x == 1.0).count(), 384);
        assert_eq!(student_weights(&sequence(&[1])), vec![1.0]);
        let w = student_weights(&sequence(&[5, 20, 5]));
        assert_eq!(w.iter().filter(|&&x| x == 10.0).count(), 3);
    }

    #[test]
    fn session_weights_use_own_length() {
        let w = session_weights(&sequence(&[3, 1, 2]));
        assert_eq!(w, vec![1.0, 1.0, 3.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn split_sizes() {
        let ids: Vec<String> = (0..100).map(|i| format!("s{i:03}")).collect();
        let s = split_students(&ids, 4).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (81, 9, 10));
        let again = split_students(&ids, 4).unwrap();
        assert_eq!(s, again);
        let other = split_students(&ids, 5).unwrap();
        assert_ne!(s, other);
        assert_eq!(other.test.len(), 10);
        assert!(split_students(&ids[..9], 1).is_err());
    }

    #[test]
    fn early_stopping_follows_patience() {
        let mut es = EarlyStopping::new(3);
        let aucs = [0.6, 0.7, 0.69, 0.68, 0.67, 0.9];
        let mut stopped_at = None;
        for (i, &a) in aucs.iter().enumerate() {
            es.observe(i + 1, a);
            if es.should_stop() {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(5));
        assert_eq!(es.best(), Some((2, 0.7)));

        let mut never = EarlyStopping::new(0);
        for e in 1..20 {
            never.observe(e, 0.5);
            assert!(!never.should_stop());
        }
    }

    #[test]
    fn config_text_round_trip() {
        let config = TrainConfig {
            level: Level::Session,
            learning_rate: 0.003,
            patience: 0,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv_text(&config.to_kv().to_text()).unwrap(), config);
        assert_eq!(TrainConfig::from_kv_text("").unwrap(), TrainConfig::default());
        assert!(TrainConfig::from_kv_text("dropout_p = 1\n").is_err());
        assert!(TrainConfig::from_kv_text("level = course\n").is_err());
    }

    #[test]
    fn level_parses() {
        assert_eq!("session".parse::<Level>().unwrap(), Level::Session);
        assert!("global".parse::<Level>().is_err());
    }
}
