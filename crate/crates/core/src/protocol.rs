//! Trial timelines, session plans, assistive question trees and caretaker
//! ratings.
//!
//! Offline trial (times from trial start):
//!
//! ```text
//! 0    inter-trial   3 s
//! 3    rest          8 s   ("Rest" spoken during the first 0.5 s)
//! 11   announce      1 s   ("Trial N")
//! 12   pre-cue gap   2 s
//! 14   cue           1 s   ("Make it noisy" / "Make it clean")
//! 15   feedback     10 s   (class tone, volume ramping 0 -> 1)
//! 25   end
//! ```
//!
//! Online trial: inter-trial 3, rest 8, announce 1, gap 2, question (1-4 s),
//! gap 3, bell 0.5, gap 4, then decoding for at most the timeout.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, RunType};
use crate::online::{DecisionConfig, Outcome};
use crate::{Class, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("question lasts {duration_s} s, outside [{min_s}, {max_s}] s")]
    QuestionTooLong { duration_s: f64, min_s: f64, max_s: f64 },
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("rating {0} outside 1..=5")]
    InvalidRating(u8),
    #[error("cannot arrange {modulated} Modulated and {baseline} Baseline trials with at most {max_run} in a row")]
    InfeasibleSequence {
        modulated: usize,
        baseline: usize,
        max_run: usize,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialPhase {
    InterTrial,
    Rest,
    Announce,
    PreCue,
    /// Instruction cue offline, question online.
    Cue,
    PostQuestion,
    Bell,
    PreFeedback,
    /// Offline open-loop tone.
    Feedback,
    /// Online closed-loop decoding.
    Decoding,
    Ended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub inter_trial_s: f64,
    pub rest_s: f64,
    pub rest_cue_s: f64,
    pub announce_s: f64,
    pub pre_cue_s: f64,
    pub instruction_s: f64,
    pub post_question_s: f64,
    pub bell_s: f64,
    pub pre_feedback_s: f64,
    pub offline_feedback_s: f64,
    pub min_question_s: f64,
    pub max_question_s: f64,
    /// Length of the spoken "You selected ..." message.
    pub result_message_s: f64,
    pub timeout_message_s: f64,
}

impl Default for PhaseTimings {
    fn default() -> Self {
        Self {
            inter_trial_s: 3.0,
            rest_s: 8.0,
            rest_cue_s: 0.5,
            announce_s: 1.0,
            pre_cue_s: 2.0,
            instruction_s: 1.0,
            post_question_s: 3.0,
            bell_s: 0.5,
            pre_feedback_s: 4.0,
            offline_feedback_s: 10.0,
            min_question_s: 1.0,
            max_question_s: 4.0,
            result_message_s: 1.0,
            timeout_message_s: 0.5,
        }
    }
}

impl PhaseTimings {
    pub fn outcome_message_s(&self, outcome: Outcome) -> f64 {
        match outcome {
            Outcome::Timeout => self.timeout_message_s,
            _ => self.result_message_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub phase: TrialPhase,
    /// Seconds from trial start.
    pub onset_s: f64,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tone_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub entries: Vec<PhaseEntry>,
}

impl Timeline {
    fn push(&mut self, phase: TrialPhase, duration_s: f64, text: Option<String>, tone_hz: Option<f64>) {
        let onset_s = self.entries.last().map_or(0.0, |e| e.onset_s + e.duration_s);
        self.entries.push(PhaseEntry {
            phase,
            onset_s,
            duration_s,
            text,
            tone_hz,
        });
    }

    pub fn entry(&self, phase: TrialPhase) -> Option<&PhaseEntry> {
        self.entries.iter().find(|e| e.phase == phase)
    }

    pub fn onset(&self, phase: TrialPhase) -> Option<f64> {
        self.entry(phase).map(|e| e.onset_s)
    }

    /// Start of the offline feedback or the online decoding.
    pub fn feedback_onset_s(&self) -> f64 {
        self.onset(TrialPhase::Feedback)
            .or_else(|| self.onset(TrialPhase::Decoding))
            .expect("every timeline has a feedback phase")
    }

    /// End of the last scheduled phase (the decoding phase counts at its
    /// maximum length).
    pub fn end_s(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.onset_s + e.duration_s)
    }
}

pub fn instruction_text(class: Class) -> &'static str {
    match class {
        Class::Modulated => "Make it noisy",
        Class::Baseline => "Make it clean",
    }
}

pub fn build_offline_timeline(trial_index: usize, class: Class, timings: &PhaseTimings) -> Timeline {
    let mut t = Timeline { entries: Vec::new() };
    t.push(TrialPhase::InterTrial, timings.inter_trial_s, None, None);
    t.push(TrialPhase::Rest, timings.rest_s, Some("Rest".into()), None);
    t.push(
        TrialPhase::Announce,
        timings.announce_s,
        Some(format!("Trial {}", trial_index + 1)),
        None,
    );
    t.push(TrialPhase::PreCue, timings.pre_cue_s, None, None);
    t.push(
        TrialPhase::Cue,
        timings.instruction_s,
        Some(instruction_text(class).into()),
        None,
    );
    t.push(
        TrialPhase::Feedback,
        timings.offline_feedback_s,
        None,
        Some(class.tone_hz()),
    );
    t.push(TrialPhase::Ended, 0.0, None, None);
    t
}

/// Volume of the offline feedback tone `elapsed_s` into the feedback phase.
pub fn offline_feedback_volume(elapsed_s: f64, timings: &PhaseTimings) -> f64 {
    (elapsed_s / timings.offline_feedback_s).clamp(0.0, 1.0)
}

/// Standard or assistive Yes/No question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionItem {
    pub id: String,
    pub text: String,
    /// Known answer of a general-knowledge question; absent for assistive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_answer: Option<Answer>,
    /// Length of the spoken question.
    #[serde(default = "default_question_s")]
    pub duration_s: f64,
}

fn default_question_s() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn class(self) -> Class {
        match self {
            Answer::Yes => Class::Modulated,
            Answer::No => Class::Baseline,
        }
    }

    pub fn from_class(class: Class) -> Self {
        match class {
            Class::Modulated => Answer::Yes,
            Class::Baseline => Answer::No,
        }
    }

    pub fn from_outcome(outcome: Outcome) -> Option<Self> {
        outcome.class().map(Self::from_class)
    }
}

pub fn build_online_timeline(
    trial_index: usize,
    question: &QuestionItem,
    timings: &PhaseTimings,
    decision: &DecisionConfig,
) -> Result<Timeline, ProtocolError> {
    let d = question.duration_s;
    if !(d >= timings.min_question_s && d <= timings.max_question_s) {
        return Err(ProtocolError::QuestionTooLong {
            duration_s: d,
            min_s: timings.min_question_s,
            max_s: timings.max_question_s,
        });
    }
    let mut t = Timeline { entries: Vec::new() };
    t.push(TrialPhase::InterTrial, timings.inter_trial_s, None, None);
    t.push(TrialPhase::Rest, timings.rest_s, Some("Rest".into()), None);
    t.push(
        TrialPhase::Announce,
        timings.announce_s,
        Some(format!("Question {}", trial_index + 1)),
        None,
    );
    t.push(TrialPhase::PreCue, timings.pre_cue_s, None, None);
    t.push(TrialPhase::Cue, d, Some(question.text.clone()), None);
    t.push(TrialPhase::PostQuestion, timings.post_question_s, None, None);
    t.push(TrialPhase::Bell, timings.bell_s, None, None);
    t.push(TrialPhase::PreFeedback, timings.pre_feedback_s, None, None);
    t.push(TrialPhase::Decoding, decision.timeout_s, None, None);
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistiveNode {
    pub id: String,
    pub question: String,
    #[serde(default = "default_question_s")]
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yes_child: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_child: Option<String>,
}

impl AssistiveNode {
    pub fn is_leaf(&self) -> bool {
        self.yes_child.is_none() && self.no_child.is_none()
    }

    pub fn as_question(&self) -> QuestionItem {
        QuestionItem {
            id: self.id.clone(),
            text: self.question.clone(),
            expected_answer: None,
            duration_s: self.duration_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistiveTree {
    pub root: String,
    pub nodes: Vec<AssistiveNode>,
}

impl AssistiveTree {
    pub fn node(&self, id: &str) -> Result<&AssistiveNode, ProtocolError> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| ProtocolError::UnknownNode(id.to_string()))
    }

    /// Every node reachable from the root exactly once, no dangling children,
    /// no unreachable nodes.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(ProtocolError::InvalidTree(format!("duplicate node {:?}", n.id)));
            }
        }
        self.node(&self.root)?;
        let mut seen = BTreeSet::new();
        let mut stack = vec![self.root.as_str()];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                return Err(ProtocolError::InvalidTree(format!(
                    "node {id:?} is reachable twice (cycle or shared child)"
                )));
            }
            let n = self.node(id)?;
            stack.extend(n.yes_child.as_deref());
            stack.extend(n.no_child.as_deref());
        }
        if seen.len() != self.nodes.len() {
            return Err(ProtocolError::InvalidTree("unreachable nodes".into()));
        }
        Ok(())
    }

    /// Number of questions on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(tree: &AssistiveTree, id: &str) -> usize {
            let Ok(n) = tree.node(id) else { return 0 };
            1 + [&n.yes_child, &n.no_child]
                .into_iter()
                .flatten()
                .map(|c| walk(tree, c))
                .max()
                .unwrap_or(0)
        }
        walk(self, &self.root)
    }

    pub fn load(path: &Path) -> Result<Self, ProtocolError> {
        let tree: Self = dataset::read_json(path)?;
        tree.validate()?;
        Ok(tree)
    }

    /// Nodes visited when answering with `answers` in order.
    pub fn walk(&self, answers: &[Answer]) -> Result<Vec<String>, ProtocolError> {
        let mut path = vec![self.root.clone()];
        for &a in answers {
            let last = path.last().expect("path starts at root");
            match assistive_next(self, last, a)? {
                Some(next) => path.push(next.id.clone()),
                None => break,
            }
        }
        Ok(path)
    }

    /// A comfort and needs tree, four or five questions deep.
    pub fn example() -> Self {
        let leaf = |id: &str, q: &str| AssistiveNode {
            id: id.into(),
            question: q.into(),
            duration_s: 2.0,
            yes_child: None,
            no_child: None,
        };
        let inner = |id: &str, q: &str, yes: &str, no: &str| AssistiveNode {
            id: id.into(),
            question: q.into(),
            duration_s: 2.0,
            yes_child: Some(yes.into()),
            no_child: Some(no.into()),
        };
        Self {
            root: "comfortable".into(),
            nodes: vec![
                inner("comfortable", "Are you comfortable?", "company", "back_pain"),
                inner("company", "Would you like some company?", "family", "music"),
                inner("family", "Should we call your family?", "family_now", "family_later"),
                leaf("family_now", "Would you like them to come today?"),
                leaf("family_later", "Should we call them this weekend?"),
                inner("music", "Would you like to listen to music?", "music_calm", "rest"),
                leaf("music_calm", "Would you like calm music?"),
                leaf("rest", "Would you like to sleep now?"),
                inner("back_pain", "Do you have pain in your back?", "reposition", "breathing"),
                inner(
                    "reposition",
                    "Should we change your position?",
                    "left_side",
                    "painkiller",
                ),
                leaf("left_side", "Would you like to lie on your left side?"),
                leaf("painkiller", "Do you want pain medication?"),
                inner("breathing", "Is breathing difficult?", "suction", "temperature"),
                leaf("suction", "Do you need suctioning?"),
                inner("temperature", "Are you too warm?", "blanket_off", "blanket_on"),
                leaf("blanket_off", "Should we remove the blanket?"),
                leaf("blanket_on", "Should we add a blanket?"),
            ],
        }
    }
}

/// Follows the Yes or No branch; `None` at a leaf.
pub fn assistive_next<'a>(
    tree: &'a AssistiveTree,
    node_id: &str,
    answer: Answer,
) -> Result<Option<&'a AssistiveNode>, ProtocolError> {
    let node = tree.node(node_id)?;
    let child = match answer {
        Answer::Yes => &node.yes_child,
        Answer::No => &node.no_child,
    };
    child.as_deref().map(|c| tree.node(c)).transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRating {
    pub trial_id: usize,
    pub score: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ConfidenceRating {
    pub fn new(trial_id: usize, score: u8, note: Option<String>) -> Result<Self, ProtocolError> {
        if !(1..=5).contains(&score) {
            return Err(ProtocolError::InvalidRating(score));
        }
        Ok(Self { trial_id, score, note })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingVerdict {
    Correct,
    Incorrect,
}

/// Scores above 3 count as correct.
pub fn score_confidence(rating: &ConfidenceRating) -> RatingVerdict {
    if rating.score > 3 {
        RatingVerdict::Correct
    } else {
        RatingVerdict::Incorrect
    }
}

/// Seeded class order with exact counts and no more than `max_run`
/// identical classes in a row.
pub fn class_sequence(
    modulated: usize,
    baseline: usize,
    max_run: usize,
    seed: u64,
) -> Result<Vec<Class>, ProtocolError> {
    let (big, small) = (modulated.max(baseline), modulated.min(baseline));
    if max_run == 0 || big > max_run * (small + 1) {
        return Err(ProtocolError::InfeasibleSequence {
            modulated,
            baseline,
            max_run,
        });
    }
    let mut seq: Vec<Class> = std::iter::repeat_n(Class::Modulated, modulated)
        .chain(std::iter::repeat_n(Class::Baseline, baseline))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ok = |s: &[Class]| s.windows(max_run + 1).all(|w| w.iter().any(|&c| c != w[0]));
    loop {
        seq.shuffle(&mut rng);
        if ok(&seq) {
            return Ok(seq);
        }
    }
}

/// Modulated count for `n` trials at the given fraction, rounded half up.
pub fn modulated_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction + 0.5).floor() as usize).min(n)
}

/// General-knowledge questions with known answers.
pub fn question_bank() -> Vec<QuestionItem> {
    let q = |id: &str, text: &str, a: Answer| QuestionItem {
        id: id.into(),
        text: text.into(),
        expected_answer: Some(a),
        duration_s: 2.0,
    };
    vec![
        q("heart", "Do human hearts beat?", Answer::Yes),
        q("year", "Does a year have 1000 days?", Answer::No),
        q("water", "Is water wet?", Answer::Yes),
        q("fish_fly", "Can fish fly to the moon?", Answer::No),
        q("sun", "Is the sun hot?", Answer::Yes),
        q("ice", "Is ice warmer than boiling water?", Answer::No),
        q("bread", "Is bread made from flour?", Answer::Yes),
        q("cats", "Do cats have six legs?", Answer::No),
        q("phone", "Can a telephone carry a voice?", Answer::Yes),
        q("lemon", "Are lemons sweet like sugar?", Answer::No),
        q("trees", "Do trees have leaves?", Answer::Yes),
        q("snow", "Is snow usually black?", Answer::No),
        q("milk", "Do cows give milk?", Answer::Yes),
        q("week", "Does a week have ten days?", Answer::No),
        q("birds", "Can most birds fly?", Answer::Yes),
        q("stone", "Do stones float on water?", Answer::No),
        q("apple", "Is an apple a fruit?", Answer::Yes),
        q("computer", "Do computers need food?", Answer::No),
        q("rain", "Does rain fall from clouds?", Answer::Yes),
        q("salt", "Is salt a metal?", Answer::No),
    ]
}

/// Picks `n` bank questions whose answers follow a seeded balanced order.
pub fn standard_questions(n: usize, yes_fraction: f64, seed: u64) -> Result<Vec<QuestionItem>, ProtocolError> {
    let yes = modulated_count(n, yes_fraction);
    let order = class_sequence(yes, n - yes, 3, seed)?;
    let bank = question_bank();
    let (mut yes_q, mut no_q): (Vec<_>, Vec<_>) =
        bank.into_iter().partition(|q| q.expected_answer == Some(Answer::Yes));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    yes_q.shuffle(&mut rng);
    no_q.shuffle(&mut rng);
    if yes > yes_q.len() || n - yes > no_q.len() {
        return Err(ProtocolError::InvalidPlan(format!(
            "question bank holds {} Yes and {} No questions",
            yes_q.len(),
            no_q.len()
        )));
    }
    let (mut yi, mut ni) = (yes_q.into_iter(), no_q.into_iter());
    Ok(order
        .into_iter()
        .map(|c| match c {
            Class::Modulated => yi.next().expect("counted"),
            Class::Baseline => ni.next().expect("counted"),
        })
        .collect())
}

/// One run of a session plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunPlan {
    Offline {
        /// Class order; see [`class_sequence`].
        classes: Vec<Class>,
    },
    StandardOnline {
        questions: Vec<QuestionItem>,
    },
    AssistiveOnline {
        tree: AssistiveTree,
        /// Answers a synthetic subject intends, layer by layer.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        intended_answers: Vec<Answer>,
    },
}

impl RunPlan {
    pub fn run_type(&self) -> RunType {
        match self {
            RunPlan::Offline { .. } => RunType::Offline,
            RunPlan::StandardOnline { .. } => RunType::StandardOnline,
            RunPlan::AssistiveOnline { .. } => RunType::AssistiveOnline,
        }
    }

    pub fn offline(n_trials: usize, modulated_fraction: f64, seed: u64) -> Result<Self, ProtocolError> {
        let m = modulated_count(n_trials, modulated_fraction);
        Ok(RunPlan::Offline {
            classes: class_sequence(m, n_trials - m, 3, seed)?,
        })
    }

    pub fn standard(n_trials: usize, yes_fraction: f64, seed: u64) -> Result<Self, ProtocolError> {
        Ok(RunPlan::StandardOnline {
            questions: standard_questions(n_trials, yes_fraction, seed)?,
        })
    }

    pub fn validate(&self, timings: &PhaseTimings) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidPlan(m));
        match self {
            RunPlan::Offline { classes } => {
                let n = classes.len();
                if !(dataset::MIN_TRIALS_PER_RUN..=dataset::MAX_TRIALS_PER_RUN).contains(&n) {
                    return bad(format!("offline run with {n} trials"));
                }
            }
            RunPlan::StandardOnline { questions } => {
                if !(6..=10).contains(&questions.len()) {
                    return bad(format!("standard run with {} trials (6-10)", questions.len()));
                }
                for (i, q) in questions.iter().enumerate() {
                    if q.expected_answer.is_none() {
                        return bad(format!("question {i} has no expected answer"));
                    }
                    build_online_timeline(i, q, timings, &DecisionConfig::default())?;
                }
            }
            RunPlan::AssistiveOnline { tree, intended_answers } => {
                tree.validate()?;
                let depth = tree.depth();
                if !(4..=5).contains(&depth) {
                    return bad(format!("assistive tree depth {depth} (4-5)"));
                }
                if intended_answers.len() > depth {
                    return bad("more intended answers than tree layers".into());
                }
                for n in &tree.nodes {
                    build_online_timeline(0, &n.as_question(), timings, &DecisionConfig::default())?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub schema_version: u32,
    pub session_id: String,
    pub runs: Vec<RunPlan>,
    #[serde(default)]
    pub timings: PhaseTimings,
    #[serde(default)]
    pub decision: DecisionConfig,
}

impl SessionPlan {
    pub fn new(session_id: impl Into<String>, runs: Vec<RunPlan>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            session_id: session_id.into(),
            runs,
            timings: PhaseTimings::default(),
            decision: DecisionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::VersionMismatch {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            }
            .into());
        }
        if self.runs.is_empty() {
            return Err(ProtocolError::InvalidPlan("no runs".into()));
        }
        self.decision
            .validate()
            .map_err(|e| ProtocolError::InvalidPlan(e.to_string()))?;
        self.runs.iter().try_for_each(|r| r.validate(&self.timings))
    }

    pub fn needs_decoder(&self) -> bool {
        self.runs.iter().any(|r| r.run_type() != RunType::Offline)
    }

    pub fn load(path: &Path) -> Result<Self, ProtocolError> {
        let plan: Self = dataset::read_json(path)?;
        plan.validate()?;
        Ok(plan)
    }

    /// `n_runs` offline runs of `n_trials`, balanced.
    pub fn offline_session(
        session_id: impl Into<String>,
        n_runs: usize,
        n_trials: usize,
        seed: u64,
    ) -> Result<Self, ProtocolError> {
        let runs = (0..n_runs)
            .map(|r| RunPlan::offline(n_trials, 0.5, seed.wrapping_add(r as u64)))
            .collect::<Result<_, _>>()?;
        Ok(Self::new(session_id, runs))
    }

    /// `n_runs` standard online runs of `n_trials`, balanced.
    pub fn online_session(
        session_id: impl Into<String>,
        n_runs: usize,
        n_trials: usize,
        seed: u64,
    ) -> Result<Self, ProtocolError> {
        let runs = (0..n_runs)
            .map(|r| RunPlan::standard(n_trials, 0.5, seed.wrapping_add(r as u64)))
            .collect::<Result<_, _>>()?;
        Ok(Self::new(session_id, runs))
    }
}
