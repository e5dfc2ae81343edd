//! Line-delimited action logs.
//!
//! One action per line:
//! `student_id,timestamp,action_kind,lesson_id,topic_id,correct,homework`
//! where `action_kind` is `fillout`, `multichoice` or `material`, `correct`
//! is empty exactly for material actions, and `homework` is `0` or `1`.
//! A leading header line is accepted and skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{EosError, Result};

pub const HEADER: &str = "student_id,timestamp,action_kind,lesson_id,topic_id,correct,homework";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionKind {
    FillOutQuestion,
    MultipleChoiceQuestion,
    Material,
}

impl ActionKind {
    pub fn is_question(self) -> bool {
        !matches!(self, ActionKind::Material)
    }

    pub fn token(self) -> &'static str {
        match self {
            ActionKind::FillOutQuestion => "fillout",
            ActionKind::MultipleChoiceQuestion => "multichoice",
            ActionKind::Material => "material",
        }
    }
}

impl FromStr for ActionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fillout" => Ok(ActionKind::FillOutQuestion),
            "multichoice" => Ok(ActionKind::MultipleChoiceQuestion),
            "material" => Ok(ActionKind::Material),
            other => Err(format!("unknown action kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawAction {
    pub student_id: String,
    /// UTC seconds.
    pub timestamp: i64,
    pub kind: ActionKind,
    pub lesson_id: String,
    pub topic_id: String,
    /// Present exactly for question actions.
    pub correct: Option<bool>,
    pub homework: bool,
}

impl RawAction {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.timestamp < 0 {
            return Err(format!("negative timestamp {}", self.timestamp));
        }
        if self.kind.is_question() != self.correct.is_some() {
            return Err(match self.kind {
                ActionKind::Material => "correct flag present on a material action".into(),
                _ => "correct flag missing on a question action".into(),
            });
        }
        for (name, field) in [
            ("student_id", &self.student_id),
            ("lesson_id", &self.lesson_id),
            ("topic_id", &self.topic_id),
        ] {
            if field.is_empty() || field.contains([',', '\n', '\r']) {
                return Err(format!("{name} must be non-empty and free of separators"));
            }
        }
        Ok(())
    }

    pub fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(format!("expected 7 fields, found {}", fields.len()));
        }
        let timestamp = fields[1]
            .trim()
            .parse::<i64>()
            .map_err(|e| format!("bad timestamp `{}`: {e}", fields[1]))?;
        let kind: ActionKind = fields[2].trim().parse()?;
        let correct = match fields[5].trim() {
            "" => None,
            "0" => Some(false),
            "1" => Some(true),
            other => return Err(format!("bad correct flag `{other}`")),
        };
        let homework = match fields[6].trim() {
            "0" => false,
            "1" => true,
            other => return Err(format!("bad homework flag `{other}`")),
        };
        let action = RawAction {
            student_id: fields[0].trim().to_string(),
            timestamp,
            kind,
            lesson_id: fields[3].trim().to_string(),
            topic_id: fields[4].trim().to_string(),
            correct,
            homework,
        };
        action.validate()?;
        Ok(action)
    }
}

impl fmt::Display for RawAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let correct = match self.correct {
            None => "",
            Some(true) => "1",
            Some(false) => "0",
        };
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.student_id,
            self.timestamp,
            self.kind.token(),
            self.lesson_id,
            self.topic_id,
            correct,
            u8::from(self.homework)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLine {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedLog {
    pub actions: Vec<RawAction>,
    /// Only populated in lenient mode.
    pub skipped: Vec<SkippedLine>,
}

/// Parses a log stream. Line numbers in errors are 1-based.
pub fn parse_log<R: BufRead>(reader: R, mode: ParseMode) -> Result<ParsedLog> {
    let mut out = ParsedLog::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || (line_no == 1 && trimmed.starts_with("student_id,")) {
            continue;
        }
        match RawAction::parse_line(trimmed) {
            Ok(action) => out.actions.push(action),
            Err(message) => match mode {
                ParseMode::Strict => return Err(EosError::Parse { line: line_no, message }),
                ParseMode::Lenient => out.skipped.push(SkippedLine { line: line_no, message }),
            },
        }
    }
    Ok(out)
}

pub fn write_log<W: Write>(mut writer: W, actions: &[RawAction]) -> std::io::Result<()> {
    writeln!(writer, "{HEADER}")?;
    for a in actions {
        writeln!(writer, "{a}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudentLog {
    pub student_id: String,
    pub actions: Vec<RawAction>,
}

impl StudentLog {
    pub fn is_chronological(&self) -> bool {
        self.actions.windows(2).all(|w| w[0].timestamp <= w[1].timestamp)
    }
}

/// Groups actions per student (ordered by student id) and stably sorts each
/// student's actions by timestamp.
pub fn group_by_student(actions: Vec<RawAction>) -> Vec<StudentLog> {
    let mut by_student: BTreeMap<String, Vec<RawAction>> = BTreeMap::new();
    for a in actions {
        by_student.entry(a.student_id.clone()).or_default().push(a);
    }
    by_student
        .into_iter()
        .map(|(student_id, mut actions)| {
            actions.sort_by_key(|a| a.timestamp);
            StudentLog { student_id, actions }
        })
        .collect()
}

/// Flattens student logs back into one action list, students in order.
pub fn flatten(logs: &[StudentLog]) -> Vec<RawAction> {
    logs.iter().flat_map(|l| l.actions.iter().cloned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_one(line: &str) -> std::result::Result<RawAction, String> {
        RawAction::parse_line(line)
    }

    #[test]
    fn parses_question_line() {
        let a = parse_one("s1,1600000000,fillout,L3,T1,1,1").unwrap();
        assert_eq!(
            a,
            RawAction {
                student_id: "s1".into(),
                timestamp: 1_600_000_000,
                kind: ActionKind::FillOutQuestion,
                lesson_id: "L3".into(),
                topic_id: "T1".into(),
                correct: Some(true),
                homework: true,
            }
        );
    }

    #[test]
    fn material_has_no_correct_flag() {
        let a = parse_one("s1,1600000000,material,L3,T1,,0").unwrap();
        assert_eq!(a.kind, ActionKind::Material);
        assert_eq!(a.correct, None);
        assert!(!a.homework);
        assert!(parse_one("s1,1600000000,material,L3,T1,1,0").is_err());
        assert!(parse_one("s1,1600000000,multichoice,L3,T1,,0").is_err());
    }

    #[test]
    fn rejects_bad_tokens() {
        assert!(parse_one("s1,1600000000,video,L3,T1,,0").is_err());
        assert!(parse_one("s1,-5,material,L3,T1,,0").is_err());
        assert!(parse_one("s1,abc,material,L3,T1,,0").is_err());
        assert!(parse_one("s1,1,material,L3,T1,,2").is_err());
        assert!(parse_one("s1,1,material,L3,T1,").is_err());
    }

    #[test]
    fn strict_mode_reports_line_number() {
        let text = "student_id,timestamp,action_kind,lesson_id,topic_id,correct,homework\n\
                    s1,10,material,L1,T1,,0\n\
                    s1,11,bogus,L1,T1,,0\n";
        let err = parse_log(text.as_bytes(), ParseMode::Strict).unwrap_err();
        match err {
            EosError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lenient_mode_skips_and_counts() {
        let text = "s1,10,material,L1,T1,,0\ns1,11,bogus,L1,T1,,0\n\ns2,12,fillout,L1,T1,0,1\n";
        let parsed = parse_log(text.as_bytes(), ParseMode::Lenient).unwrap();
        assert_eq!(parsed.actions.len(), 2);
        assert_eq!(parsed.skipped.len(), 1);
        assert_eq!(parsed.skipped[0].line, 2);
    }

    fn action(student: &str, ts: i64, lesson: &str) -> RawAction {
        RawAction {
            student_id: student.into(),
            timestamp: ts,
            kind: ActionKind::Material,
            lesson_id: lesson.into(),
            topic_id: "T".into(),
            correct: None,
            homework: false,
        }
    }

    #[test]
    fn groups_interleaved_students() {
        let logs = group_by_student(vec![
            action("b", 30, "x"),
            action("a", 20, "x"),
            action("b", 10, "x"),
            action("a", 5, "x"),
        ]);
        assert_eq!(logs.len(), 2);
        assert_eq!(logs[0].student_id, "a");
        assert!(logs.iter().all(StudentLog::is_chronological));
        assert_eq!(logs[1].actions[0].timestamp, 10);
    }

    #[test]
    fn empty_input_groups_to_nothing() {
        assert!(group_by_student(Vec::new()).is_empty());
    }

    #[test]
    fn equal_timestamps_keep_file_order() {
        let input = vec![
            action("a", 7, "first"),
            action("a", 3, "early"),
            action("a", 7, "second"),
            action("a", 7, "third"),
        ];
        // Oracle: insertion sort, which is stable by construction.
        let mut oracle = input.clone();
        for i in 1..oracle.len() {
            let mut j = i;
            while j > 0 && oracle[j - 1].timestamp > oracle[j].timestamp {
                oracle.swap(j - 1, j);
                j -= 1;
            }
        }
        let logs = group_by_student(input);
        assert_eq!(logs[0].actions, oracle);
        let lessons: Vec<_> = logs[0].actions.iter().map(|a| a.lesson_id.as_str()).collect();
        assert_eq!(lessons, ["early", "first", "second", "third"]);
    }
}
