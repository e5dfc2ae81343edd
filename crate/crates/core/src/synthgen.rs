//! Synthetic student logs with persistent per-student behavior.
//!
//! Each student gets a profile that fixes how their sessions end:
//!
//! * homework parts are assignments of five-item blocks (one topic per
//!   block), and a student mostly sticks to one assignment length;
//! * free parts last `offset + Geometric(p)` actions, where the offset is a
//!   per-student log-normal multiple of `free_session_base`;
//! * with probability `session_type_persistence` all of a student's sessions
//!   share one type (pure homework, partly homework, or free), otherwise each
//!   session draws its type independently.
//!
//! None of these traits show up inside a single session, so a model that
//! remembers earlier sessions can predict session ends better than one that
//! only sees the current session. Session boundaries follow the 900 s rule
//! exactly: gaps inside a session are at most 899 s, gaps between sessions
//! are more than 900 s.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Geometric, LogNormal};

use crate::error::{EosError, Result};
use crate::ingest::{ActionKind, RawAction, StudentLog};
use crate::kv::{join_list, KvMap};
use crate::sessionize::{segment, session_homework_class, HomeworkClass};

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_students: usize,
    /// Log-normal session count per student: median and log-space sigma.
    pub sessions_median: f64,
    pub sessions_sigma: f64,
    pub homework_session_fraction: f64,
    pub partly_fraction: f64,
    /// Share of students whose sessions all have one type.
    pub session_type_persistence: f64,
    pub homework_length_choices: Vec<usize>,
    pub homework_choice_weights: Vec<f64>,
    /// Chance a homework part uses the student's own assignment length.
    pub homework_length_loyalty: f64,
    pub free_session_base: f64,
    /// Log-normal sigma of the per-student free-length multiplier.
    pub length_multiplier_sigma: f64,
    /// Success probability of the geometric tail of free parts.
    pub free_session_geometric_p: f64,
    /// Weights of morning [08,12), midday [12,15) and evening [15,23) starts.
    pub time_of_day_weights: Vec<f64>,
    /// Chance a session starts in the student's preferred part of the day.
    pub time_of_day_loyalty: f64,
    pub gap_median_hours: f64,
    pub gap_sigma: f64,
    pub action_gap_median_seconds: f64,
    pub action_gap_sigma: f64,
    pub utc_offset_minutes: i32,
    pub start_timestamp: i64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_students: 2000,
            sessions_median: 4.0,
            sessions_sigma: 0.5,
            homework_session_fraction: 0.483,
            partly_fraction: 0.255,
            session_type_persistence: 0.8,
            homework_length_choices: vec![5, 10, 15, 20, 25],
            homework_choice_weights: vec![0.35, 0.25, 0.2, 0.1, 0.1],
            homework_length_loyalty: 0.95,
            free_session_base: 4.0,
            length_multiplier_sigma: 0.8,
            free_session_geometric_p: 0.6,
            time_of_day_weights: vec![0.35, 0.25, 0.4],
            time_of_day_loyalty: 0.8,
            gap_median_hours: 30.0,
            gap_sigma: 1.0,
            action_gap_median_seconds: 45.0,
            action_gap_sigma: 0.9,
            utc_offset_minutes: 60,
            // 2020-09-01T00:00:00Z
            start_timestamp: 1_598_918_400,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EosError::Config(m));
        let unit = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(EosError::Config(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        if self.n_students == 0 {
            return bad("n_students must be at least 1".into());
        }
        unit("homework_session_fraction", self.homework_session_fraction)?;
        unit("partly_fraction", self.partly_fraction)?;
        unit("session_type_persistence", self.session_type_persistence)?;
        unit("homework_length_loyalty", self.homework_length_loyalty)?;
        unit("time_of_day_loyalty", self.time_of_day_loyalty)?;
        if self.homework_session_fraction + self.partly_fraction > 1.0 + 1e-12 {
            return bad("homework_session_fraction + partly_fraction exceeds 1".into());
        }
        if self.homework_length_choices.is_empty()
            || self
                .homework_length_choices
                .iter()
                .any(|&c| c == 0 || c % HOMEWORK_BLOCK != 0)
        {
            return bad("homework_length_choices must be positive multiples of 5".into());
        }
        if self.homework_choice_weights.len() != self.homework_length_choices.len() {
            return bad("homework_choice_weights needs one weight per length choice".into());
        }
        if self.time_of_day_weights.len() != 3 {
            return bad("time_of_day_weights needs three weights".into());
        }
        for (name, w) in [
            ("homework_choice_weights", &self.homework_choice_weights),
            ("time_of_day_weights", &self.time_of_day_weights),
        ] {
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return bad(format!("{name} must be non-negative with a positive sum"));
            }
        }
        if !(self.free_session_geometric_p > 0.0 && self.free_session_geometric_p <= 1.0) {
            return bad("free_session_geometric_p must be in (0, 1]".into());
        }
        for (name, v) in [
            ("sessions_median", self.sessions_median),
            ("free_session_base", self.free_session_base),
            ("gap_median_hours", self.gap_median_hours),
            ("action_gap_median_seconds", self.action_gap_median_seconds),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("sessions_sigma", self.sessions_sigma),
            ("length_multiplier_sigma", self.length_multiplier_sigma),
            ("gap_sigma", self.gap_sigma),
            ("action_gap_sigma", self.action_gap_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("n_students", self.n_students);
        kv.insert("sessions_median", self.sessions_median);
        kv.insert("sessions_sigma", self.sessions_sigma);
        kv.insert("homework_session_fraction", self.homework_session_fraction);
        kv.insert("partly_fraction", self.partly_fraction);
        kv.insert("session_type_persistence", self.session_type_persistence);
        kv.insert("homework_length_choices", join_list(&self.homework_length_choices));
        kv.insert("homework_choice_weights", join_list(&self.homework_choice_weights));
        kv.insert("homework_length_loyalty", self.homework_length_loyalty);
        kv.insert("free_session_base", self.free_session_base);
        kv.insert("length_multiplier_sigma", self.length_multiplier_sigma);
        kv.insert("free_session_geometric_p", self.free_session_geometric_p);
        kv.insert("time_of_day_weights", join_list(&self.time_of_day_weights));
        kv.insert("time_of_day_loyalty", self.time_of_day_loyalty);
        kv.insert("gap_median_hours", self.gap_median_hours);
        kv.insert("gap_sigma", self.gap_sigma);
        kv.insert("action_gap_median_seconds", self.action_gap_median_seconds);
        kv.insert("action_gap_sigma", self.action_gap_sigma);
        kv.insert("utc_offset_minutes", self.utc_offset_minutes);
        kv.insert("start_timestamp", self.start_timestamp);
        kv.insert("seed", self.seed);
        kv
    }

    /// Reads the keys this config knows, leaving others in `kv` untouched.
    pub fn read_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.read("n_students", &mut self.n_students)?;
        kv.read("sessions_median", &mut self.sessions_median)?;
        kv.read("sessions_sigma", &mut self.sessions_sigma)?;
        kv.read("homework_session_fraction", &mut self.homework_session_fraction)?;
        kv.read("partly_fraction", &mut self.partly_fraction)?;
        kv.read("session_type_persistence", &mut self.session_type_persistence)?;
        kv.read_list("homework_length_choices", &mut self.homework_length_choices)?;
        kv.read_list("homework_choice_weights", &mut self.homework_choice_weights)?;
        kv.read("homework_length_loyalty", &mut self.homework_length_loyalty)?;
        kv.read("free_session_base", &mut self.free_session_base)?;
        kv.read("length_multiplier_sigma", &mut self.length_multiplier_sigma)?;
        kv.read("free_session_geometric_p", &mut self.free_session_geometric_p)?;
        kv.read_list("time_of_day_weights", &mut self.time_of_day_weights)?;
        kv.read("time_of_day_loyalty", &mut self.time_of_day_loyalty)?;
        kv.read("gap_median_hours", &mut self.gap_median_hours)?;
        kv.read("gap_sigma", &mut self.gap_sigma)?;
        kv.read("action_gap_median_seconds", &mut self.action_gap_median_seconds)?;
        kv.read("action_gap_sigma", &mut self.action_gap_sigma)?;
        kv.read("utc_offset_minutes", &mut self.utc_offset_minutes)?;
        kv.read("start_timestamp", &mut self.start_timestamp)?;
        kv.read("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let mut config = GenConfig::default();
        config.read_kv(&mut kv)?;
        kv.finish()?;
        config.validate()?;
        Ok(config)
    }
}

/// The hidden traits behind one student's sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentProfile {
    /// Set when every session of the student has this type.
    pub fixed_type: Option<HomeworkClass>,
    pub homework_length: usize,
    pub free_offset: usize,
    pub preferred_bucket: usize,
    pub gap_median_hours: f64,
    pub ability: f64,
}

impl StudentProfile {
    /// Expected session length implied by the profile.
    pub fn expected_session_length(&self, config: &GenConfig) -> f64 {
        let [only, partly, none] = match self.fixed_type {
            Some(HomeworkClass::Only) => [1.0, 0.0, 0.0],
            Some(HomeworkClass::Partly) => [0.0, 1.0, 0.0],
            Some(HomeworkClass::None) => [0.0, 0.0, 1.0],
            None => type_probs(config),
        };
        let total: f64 = config.homework_choice_weights.iter().sum();
        let population_hw: f64 = config
            .homework_length_choices
            .iter()
            .zip(&config.homework_choice_weights)
            .map(|(&c, &w)| c as f64 * w / total)
            .sum();
        let loyalty = config.homework_length_loyalty;
        let hw = loyalty * self.homework_length as f64 + (1.0 - loyalty) * population_hw;
        let free = self.free_offset as f64 + 1.0 / config.free_session_geometric_p;
        only * hw + partly * (hw + free) + none * free
    }
}

fn type_probs(config: &GenConfig) -> [f64; 3] {
    let (h, p) = (config.homework_session_fraction, config.partly_fraction);
    [h, p, (1.0 - h - p).max(0.0)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedStudent {
    pub log: StudentLog,
    pub profile: StudentProfile,
    pub session_lengths: Vec<usize>,
    pub session_types: Vec<HomeworkClass>,
}

/// Items per homework exercise block.
pub const HOMEWORK_BLOCK: usize = 5;

const LOCAL_HOURS: [(i64, i64); 3] = [(8, 12), (12, 15), (15, 23)];

struct Sampler<'c> {
    config: &'c GenConfig,
    types: WeightedIndex<f64>,
    choices: WeightedIndex<f64>,
    buckets: WeightedIndex<f64>,
    tail: Geometric,
    action_gap: LogNormal<f64>,
}

impl<'c> Sampler<'c> {
    fn new(config: &'c GenConfig) -> Result<Self> {
        config.validate()?;
        let err = |e: &dyn std::fmt::Display| EosError::Config(e.to_string());
        let probs = type_probs(config);
        Ok(Sampler {
            config,
            types: WeightedIndex::new(probs).map_err(|e| err(&e))?,
            choices: WeightedIndex::new(&config.homework_choice_weights).map_err(|e| err(&e))?,
            buckets: WeightedIndex::new(&config.time_of_day_weights).map_err(|e| err(&e))?,
            tail: Geometric::new(config.free_session_geometric_p).map_err(|e| err(&e))?,
            action_gap: LogNormal::new(config.action_gap_median_seconds.ln(), config.action_gap_sigma)
                .map_err(|e| err(&e))?,
        })
    }

    fn session_type(&self, rng: &mut ChaCha8Rng) -> HomeworkClass {
        HomeworkClass::ALL[self.types.sample(rng)]
    }

    fn profile(&self, rng: &mut ChaCha8Rng) -> StudentProfile {
        let c = self.config;
        let fixed_type = rng
            .random_bool(c.session_type_persistence)
            .then(|| self.session_type(rng));
        let homework_length = c.homework_length_choices[self.choices.sample(rng)];
        let multiplier = LogNormal::new(0.0, c.length_multiplier_sigma)
            .expect("validated sigma")
            .sample(rng);
        let free_offset = ((c.free_session_base * multiplier).round() as usize).max(1) - 1;
        let preferred_bucket = self.buckets.sample(rng);
        let gap_median_hours = c.gap_median_hours * LogNormal::new(0.0, 0.5).expect("constant").sample(rng);
        let ability = Beta::new(4.0, 2.0).expect("constant").sample(rng);
        StudentProfile {
            fixed_type,
            homework_length,
            free_offset,
            preferred_bucket,
            gap_median_hours,
            ability,
        }
    }

    /// (homework actions, free actions) of one session.
    fn session_shape(&self, p: &StudentProfile, kind: HomeworkClass, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let c = self.config;
        let mut homework = || {
            if rng.random_bool(c.homework_length_loyalty) {
                p.homework_length
            } else {
                c.homework_length_choices[self.choices.sample(rng)]
            }
        };
        let hw = match kind {
            HomeworkClass::None => 0,
            _ => homework(),
        };
        let free = match kind {
            HomeworkClass::Only => 0,
            _ => p.free_offset + 1 + self.tail.sample(rng) as usize,
        };
        (hw, free)
    }

    /// First timestamp of a session starting no earlier than `earliest`.
    fn session_start(&self, p: &StudentProfile, earliest: i64, rng: &mut ChaCha8Rng) -> i64 {
        let offset = 60 * i64::from(self.config.utc_offset_minutes);
        let bucket = if rng.random_bool(self.config.time_of_day_loyalty) {
            p.preferred_bucket
        } else {
            self.buckets.sample(rng)
        };
        let (lo, hi) = LOCAL_HOURS[bucket];
        let second_of_day = rng.random_range(lo * 3600..hi * 3600);
        let mut day = (earliest + offset).div_euclid(86_400);
        loop {
            let t = day * 86_400 + second_of_day - offset;
            if t >= earliest {
                return t;
            }
            day += 1;
        }
    }

    fn student(&self, index: usize, id: String) -> GeneratedStudent {
        let c = self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(index as u64);
        let profile = self.profile(&mut rng);
        let sessions = LogNormal::new(c.sessions_median.ln(), c.sessions_sigma)
            .expect("validated")
            .sample(&mut rng)
            .round()
            .max(1.0) as usize;
        let gap = LogNormal::new((profile.gap_median_hours * 3600.0).ln(), c.gap_sigma).expect("validated");

        let mut actions = Vec::new();
        let mut session_lengths = Vec::with_capacity(sessions);
        let mut session_types = Vec::with_capacity(sessions);
        let mut lesson = rng.random_range(0..50u32);
        let mut topic = 0u32;
        let mut earliest = c.start_timestamp + rng.random_range(0..14 * 86_400);
        for _ in 0..sessions {
            let kind = profile.fixed_type.unwrap_or_else(|| self.session_type(&mut rng));
            let (hw, free) = self.session_shape(&profile, kind, &mut rng);
            let mut t = self.session_start(&profile, earliest, &mut rng);
            if rng.random_bool(0.5) {
                lesson += 1;
                topic = 0;
            }
            for j in 0..hw + free {
                let homework = j < hw;
                if j > 0 {
                    let g = self.action_gap.sample(&mut rng).round() as i64;
                    t += g.clamp(1, 899);
                }
                if homework {
                    // An assignment is one lesson of five-item blocks, one topic per block.
                    if j == 0 {
                        lesson += 1;
                        topic = 0;
                    } else if j % HOMEWORK_BLOCK == 0 {
                        topic += 1;
                    }
                } else if j > 0 {
                    if rng.random_bool(0.08) {
                        lesson += 1;
                        topic = 0;
                    } else if rng.random_bool(0.2) {
                        topic += 1;
                    }
                }
                let kind = {
                    let u: f64 = rng.random();
                    let (fill, multi) = if homework { (0.45, 0.9) } else { (0.3, 0.6) };
                    if u < fill {
                        ActionKind::FillOutQuestion
                    } else if u < multi {
                        ActionKind::MultipleChoiceQuestion
                    } else {
                        ActionKind::Material
                    }
                };
                let correct = kind.is_question().then(|| rng.random_bool(profile.ability));
                actions.push(RawAction {
                    student_id: id.clone(),
                    timestamp: t,
                    kind,
                    lesson_id: format!("L{lesson:03}"),
                    topic_id: format!("L{lesson:03}.T{topic}"),
                    correct,
                    homework,
                });
            }
            session_lengths.push(hw + free);
            session_types.push(kind);
            earliest = t + 901 + gap.sample(&mut rng).round() as i64;
        }
        GeneratedStudent {
            log: StudentLog {
                student_id: id,
                actions,
            },
            profile,
            session_lengths,
            session_types,
        }
    }
}

fn student_ids(n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len().max(5);
    (0..n).map(|i| format!("s{i:0width$}")).collect()
}

/// Students with their hidden profiles and true session boundaries.
pub fn generate_detailed(config: &GenConfig) -> Result<Vec<GeneratedStudent>> {
    let sampler = Sampler::new(config)?;
    let ids: Vec<(usize, String)> = student_ids(config.n_students).into_iter().enumerate().collect();
    Ok(crate::par::map(&ids, |(i, id)| sampler.student(*i, id.clone())))
}

pub fn generate(config: &GenConfig) -> Result<Vec<StudentLog>> {
    Ok(generate_detailed(config)?.into_iter().map(|s| s.log).collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub students: usize,
    pub sessions: usize,
    pub actions: usize,
    pub homework_sessions: BTreeMap<HomeworkClass, usize>,
    pub session_lengths: BTreeMap<usize, usize>,
    pub sessions_per_student: BTreeMap<usize, usize>,
}

impl Summary {
    pub fn fraction(&self, class: HomeworkClass) -> f64 {
        if self.sessions == 0 {
            0.0
        } else {
            self.homework_sessions.get(&class).copied().unwrap_or(0) as f64 / self.sessions as f64
        }
    }

    /// Session lengths whose count beats both neighbors.
    pub fn length_peaks(&self) -> Vec<usize> {
        let count = |l: usize| self.session_lengths.get(&l).copied().unwrap_or(0);
        self.session_lengths
            .keys()
            .copied()
            .filter(|&l| count(l) > count(l + 1) && (l == 1 || count(l) > count(l - 1)))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "students = {}", self.students);
        let _ = writeln!(out, "sessions = {}", self.sessions);
        let _ = writeln!(out, "actions = {}", self.actions);
        for class in HomeworkClass::ALL {
            let _ = writeln!(out, "fraction_{} = {:.4}", class.key(), self.fraction(class));
        }
        out.push_str("\n[session_length]\nlength,count\n");
        for (l, n) in &self.session_lengths {
            let _ = writeln!(out, "{l},{n}");
        }
        out.push_str("\n[sessions_per_student]\nsessions,students\n");
        for (s, n) in &self.sessions_per_student {
            let _ = writeln!(out, "{s},{n}");
        }
        out
    }
}

/// Counts and histograms after segmenting with `gap_seconds`.
pub fn summarize(logs: &[StudentLog], gap_seconds: i64) -> Summary {
    let mut s = Summary {
        students: logs.len(),
        ..Summary::default()
    };
    for log in logs {
        let sessions = segment(log, gap_seconds);
        s.actions += log.actions.len();
        s.sessions += sessions.len();
        *s.sessions_per_student.entry(sessions.len()).or_default() += 1;
        for session in &sessions {
            *s.homework_sessions.entry(session_homework_class(session)).or_default() += 1;
            *s.session_lengths.entry(session.len()).or_default() += 1;
        }
    }
    s
}
