//! Gap-based session segmentation and End-of-Session labelling.

use crate::ingest::{RawAction, StudentLog};

/// Inter-action gap above which a new session starts (15 minutes).
pub const DEFAULT_GAP_SECONDS: i64 = 900;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub student_id: String,
    pub actions: Vec<RawAction>,
    /// 0-based position of this session in the student's history.
    pub index: usize,
}

impl Session {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn homework_class(&self) -> HomeworkClass {
        session_homework_class(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    pub student_id: String,
    pub sessions: Vec<Session>,
    /// One label per action over the concatenated sessions; 1 marks a session's last action.
    pub labels: Vec<u8>,
}

impl LabeledSequence {
    pub fn action_count(&self) -> usize {
        self.labels.len()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn actions(&self) -> impl Iterator<Item = &RawAction> {
        self.sessions.iter().flat_map(|s| s.actions.iter())
    }
}

/// Splits a chronological log wherever consecutive actions are more than
/// `gap_seconds` apart. A gap of exactly `gap_seconds` stays in the session.
pub fn segment(log: &StudentLog, gap_seconds: i64) -> Vec<Session> {
    debug_assert!(gap_seconds > 0);
    let mut sessions: Vec<Session> = Vec::new();
    let mut current: Vec<RawAction> = Vec::new();
    let mut prev_ts: Option<i64> = None;
    for action in &log.actions {
        if let Some(prev) = prev_ts {
            if action.timestamp - prev > gap_seconds {
                sessions.push(Session {
                    student_id: log.student_id.clone(),
                    actions: std::mem::take(&mut current),
                    index: sessions.len(),
                });
            }
        }
        prev_ts = Some(action.timestamp);
        current.push(action.clone());
    }
    if !current.is_empty() {
        sessions.push(Session {
            student_id: log.student_id.clone(),
            actions: current,
            index: sessions.len(),
        });
    }
    sessions
}

pub fn label(sessions: Vec<Session>) -> LabeledSequence {
    let student_id = sessions.first().map(|s| s.student_id.clone()).unwrap_or_default();
    let mut labels = Vec::with_capacity(sessions.iter().map(Session::len).sum());
    for s in &sessions {
        labels.extend(std::iter::repeat_n(0u8, s.len().saturating_sub(1)));
        if !s.is_empty() {
            labels.push(1);
        }
    }
    LabeledSequence {
        student_id,
        sessions,
        labels,
    }
}

/// Segments and labels every student log with the given gap.
pub fn sessionize_all(logs: &[StudentLog], gap_seconds: i64) -> Vec<LabeledSequence> {
    crate::par::map(logs, |log| {
        let mut seq = label(segment(log, gap_seconds));
        seq.student_id.clone_from(&log.student_id);
        seq
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HomeworkClass {
    Only,
    Partly,
    None,
}

impl HomeworkClass {
    pub const ALL: [HomeworkClass; 3] = [HomeworkClass::Only, HomeworkClass::Partly, HomeworkClass::None];

    pub fn key(self) -> &'static str {
        match self {
            HomeworkClass::Only => "only",
            HomeworkClass::Partly => "partly",
            HomeworkClass::None => "none",
        }
    }
}

pub fn session_homework_class(session: &Session) -> HomeworkClass {
    let homework = session.actions.iter().filter(|a| a.homework).count();
    if homework == session.len() {
        HomeworkClass::Only
    } else if homework == 0 {
        HomeworkClass::None
    } else {
        HomeworkClass::Partly
    }
}
