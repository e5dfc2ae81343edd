//! Per-action feature encoding.
//!
//! Frame layout (13 values):
//!
//! | index | meaning                                            |
//! |-------|----------------------------------------------------|
//! | 0..=2 | time of day one-hot: [08,12), [12,15), [15,08)     |
//! | 3     | compressed time since previous action              |
//! | 4     | compressed gap before the current session          |
//! | 5..=7 | action kind one-hot: fill-out, multi-choice, material |
//! | 8     | lesson changed vs previous action                  |
//! | 9     | topic changed vs previous action                   |
//! | 10    | answered correctly                                 |
//! | 11    | homework                                           |
//! | 12    | first action of a session                          |

use crate::ingest::{ActionKind, RawAction};
use crate::sessionize::LabeledSequence;

pub const FRAME_DIM: usize = 13;
pub const ACTION_GAP_CAP: i64 = 900;
pub const SESSION_GAP_CAP: i64 = 30 * 24 * 3600;
/// Denmark, without daylight saving.
pub const DEFAULT_UTC_OFFSET_MINUTES: i32 = 60;
pub const SESSION_START: usize = 12;

pub type FeatureFrame = [f64; FRAME_DIM];

pub fn time_of_day_bucket(timestamp: i64, utc_offset_minutes: i32) -> [f64; 3] {
    let local = (timestamp + 60 * i64::from(utc_offset_minutes)).rem_euclid(86_400);
    let hour = local / 3600;
    match hour {
        8..=11 => [1.0, 0.0, 0.0],
        12..=14 => [0.0, 1.0, 0.0],
        _ => [0.0, 0.0, 1.0],
    }
}

/// Log-compresses a non-negative gap onto [0, 1], saturating at `cap_seconds`.
pub fn transform_gap(delta_seconds: i64, cap_seconds: i64) -> f64 {
    debug_assert!(cap_seconds > 0);
    let delta = delta_seconds.max(0) as f64;
    ((delta.ln_1p()) / (cap_seconds as f64).ln_1p()).min(1.0)
}

/// Incremental encoder for one student's action stream. Frame `i` only
/// depends on actions `0..=i`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Featurizer {
    utc_offset_minutes: i32,
    prev: Option<PrevAction>,
    session_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrevAction {
    pub timestamp: i64,
    pub lesson_id: String,
    pub topic_id: String,
}

impl Featurizer {
    pub fn new(utc_offset_minutes: i32) -> Self {
        Featurizer {
            utc_offset_minutes,
            prev: None,
            session_gap: 1.0,
        }
    }

    /// Rebuilds an encoder from persisted state.
    pub fn restore(utc_offset_minutes: i32, prev: Option<PrevAction>, session_gap: f64) -> Self {
        Featurizer {
            utc_offset_minutes,
            prev,
            session_gap,
        }
    }

    pub fn previous(&self) -> Option<&PrevAction> {
        self.prev.as_ref()
    }

    pub fn session_gap(&self) -> f64 {
        self.session_gap
    }

    pub fn push(&mut self, action: &RawAction, starts_session: bool) -> FeatureFrame {
        let mut f = [0.0; FRAME_DIM];
        f[0..3].copy_from_slice(&time_of_day_bucket(action.timestamp, self.utc_offset_minutes));

        match &self.prev {
            None => {
                f[3] = 1.0;
                self.session_gap = 1.0;
            }
            Some(prev) => {
                let gap = action.timestamp - prev.timestamp;
                f[3] = transform_gap(gap, ACTION_GAP_CAP);
                if starts_session {
                    self.session_gap = transform_gap(gap, SESSION_GAP_CAP);
                }
                f[8] = f64::from(u8::from(prev.lesson_id != action.lesson_id));
                f[9] = f64::from(u8::from(prev.topic_id != action.topic_id));
            }
        }
        f[4] = self.session_gap;

        let kind_slot = match action.kind {
            ActionKind::FillOutQuestion => 5,
            ActionKind::MultipleChoiceQuestion => 6,
            ActionKind::Material => 7,
        };
        f[kind_slot] = 1.0;
        f[10] = f64::from(u8::from(action.correct == Some(true)));
        f[11] = f64::from(u8::from(action.homework));
        f[SESSION_START] = f64::from(u8::from(starts_session || self.prev.is_none()));

        self.prev = Some(PrevAction {
            timestamp: action.timestamp,
            lesson_id: action.lesson_id.clone(),
            topic_id: action.topic_id.clone(),
        });
        f
    }
}

pub fn featurize(seq: &LabeledSequence, utc_offset_minutes: i32) -> Vec<FeatureFrame> {
    let mut enc = Featurizer::new(utc_offset_minutes);
    let mut out = Vec::with_capacity(seq.action_count());
    for session in &seq.sessions {
        for (j, action) in session.actions.iter().enumerate() {
            out.push(enc.push(action, j == 0));
        }
    }
    out
}

pub fn is_session_start(frame: &FeatureFrame) -> bool {
    frame[SESSION_START] == 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::StudentLog;
    use crate::sessionize::{label, segment};

    fn at_local_hour(hour: i64) -> i64 {
        // 2020-09-13 00:00 UTC is a day boundary; offset 60 shifts local time by one hour.
        1_599_955_200 + (hour - 1) * 3600
    }

    #[test]
    fn time_buckets() {
        assert_eq!(time_of_day_bucket(at_local_hour(9), 60), [1.0, 0.0, 0.0]);
        assert_eq!(time_of_day_bucket(at_local_hour(12), 60), [0.0, 1.0, 0.0]);
        assert_eq!(time_of_day_bucket(at_local_hour(3), 60), [0.0, 0.0, 1.0]);
        assert_eq!(time_of_day_bucket(at_local_hour(15), 60), [0.0, 0.0, 1.0]);
        assert_eq!(time_of_day_bucket(at_local_hour(8), 60), [1.0, 0.0, 0.0]);
        assert_eq!(time_of_day_bucket(at_local_hour(0), 60), [0.0, 0.0, 1.0]);
        // 09:00 UTC with no offset.
        assert_eq!(time_of_day_bucket(9 * 3600, 0), [1.0, 0.0, 0.0]);
        // Offsets that move before the epoch still wrap correctly.
        assert_eq!(time_of_day_bucket(0, -120), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn gap_transform_endpoints() {
        assert_eq!(transform_gap(0, 900), 0.0);
        assert_eq!(transform_gap(900, 900), 1.0);
        assert_eq!(transform_gap(10_000, 900), 1.0);
    }

    #[test]
    fn gap_transform_matches_high_precision() {
        // ln(61)/ln(901), ln(31)/ln(901), ln(3601)/ln(2592001) evaluated at 50 digits.
        let cases = [
            (60, 900, 0.604_228_806_845_726_2_f64),
            (30, 900, 0.504_737_936_469_576_4),
            (3600, 2_592_000, 0.554_509_732_782_670_2),
        ];
        for (delta, cap, expected) in cases {
            let got = transform_gap(delta, cap);
            assert!((got - expected).abs() < 1e-15, "{delta}/{cap}: {got} vs {expected}");
        }
    }

    fn action(ts: i64, kind: ActionKind, lesson: &str, topic: &str, homework: bool) -> RawAction {
        RawAction {
            student_id: "s".into(),
            timestamp: ts,
            kind,
            lesson_id: lesson.into(),
            topic_id: topic.into(),
            correct: kind.is_question().then_some(true),
            homework,
        }
    }

    fn frames_for(actions: Vec<RawAction>) -> Vec<FeatureFrame> {
        let log = StudentLog {
            student_id: "s".into(),
            actions,
        };
        featurize(&label(segment(&log, 900)), 60)
    }

    #[test]
    fn first_action_conventions() {
        let t = at_local_hour(16);
        let f = frames_for(vec![action(t, ActionKind::Material, "L", "T", true)]);
        assert_eq!(f[0], [0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn lesson_and_topic_changes() {
        let t = at_local_hour(10);
        let f = frames_for(vec![
            action(t, ActionKind::Material, "L1", "T1", false),
            action(t + 60, ActionKind::Material, "L2", "T1", false),
            action(t + 120, ActionKind::Material, "L3", "T2", false),
            action(t + 180, ActionKind::FillOutQuestion, "L3", "T2", false),
        ]);
        assert_eq!((f[0][8], f[0][9]), (0.0, 0.0));
        assert_eq!((f[1][8], f[1][9]), (1.0, 0.0));
        assert_eq!((f[2][8], f[2][9]), (1.0, 1.0));
        assert_eq!((f[3][8], f[3][9]), (0.0, 0.0));
        assert_eq!(f[3][10], 1.0);
    }

    #[test]
    fn hand_traced_three_action_fixture() {
        let t = at_local_hour(10);
        let f = frames_for(vec![
            action(t, ActionKind::Material, "L1", "T1", false),
            action(t + 5000, ActionKind::FillOutQuestion, "L1", "T1", false),
            action(t + 5030, ActionKind::MultipleChoiceQuestion, "L1", "T1", false),
        ]);
        // Action 1 opens a second session after a 5000 s break.
        let between = (5001f64).ln() / (2_592_001f64).ln();
        assert_eq!(f[1][3], 1.0);
        assert!((f[1][4] - between).abs() < 1e-15);
        assert_eq!(f[1][12], 1.0);
        // Action 2 is 30 s later in the same session.
        assert!((f[2][3] - (31f64).ln() / (901f64).ln()).abs() < 1e-15);
        assert_eq!(f[2][4], f[1][4]);
        assert_eq!((f[2][8], f[2][9], f[2][12]), (0.0, 0.0, 0.0));
        assert_eq!(&f[2][5..8], &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn one_hot_groups_sum_to_one() {
        let t = at_local_hour(13);
        let f = frames_for(vec![
            action(t, ActionKind::Material, "L1", "T1", false),
            action(t + 20, ActionKind::FillOutQuestion, "L1", "T1", true),
            action(t + 2000, ActionKind::MultipleChoiceQuestion, "L1", "T1", true),
        ]);
        for frame in &f {
            assert_eq!(frame[0..3].iter().sum::<f64>(), 1.0);
            assert_eq!(frame[5..8].iter().sum::<f64>(), 1.0);
        }
        assert_eq!(f.iter().filter(|fr| is_session_start(fr)).count(), 2);
    }
}
