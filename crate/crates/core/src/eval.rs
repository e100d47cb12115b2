//! Multiple-choice benchmark runner over an evolved tree.
//!
//! Case files are JSON lines:
//!
//! ```json
//! {"id": "c01", "history": "fixture", "question": "...",
//!  "options": {"A": "...", "B": "...", "C": "...", "D": "..."},
//!  "answer": "B", "skill": "Recall-Facts"}
//! ```
//!
//! `id` and `history` are optional. Option labels must run from `A` without
//! gaps (2 to 4 options).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatClient, ChatRequest, ClientError};
use crate::listener::estimate_tokens;
use crate::recall::{render_options, AnswerMode, Recall, OPTION_LETTERS, QUERY_DELIMITER};
use crate::tree::PersonaTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Skill {
    #[serde(rename = "Recall-Facts")]
    RecallFacts,
    #[serde(rename = "Pref-Rec")]
    PrefRec,
    #[serde(rename = "New-Ideas")]
    NewIdeas,
    #[serde(rename = "Recall-Reason")]
    RecallReason,
    #[serde(rename = "Pref-Evol")]
    PrefEvol,
    #[serde(rename = "Gen-New")]
    GenNew,
    #[serde(rename = "Recall-User")]
    RecallUser,
}

impl Skill {
    pub const ALL: [Skill; 7] = [
        Skill::RecallFacts,
        Skill::PrefRec,
        Skill::NewIdeas,
        Skill::RecallReason,
        Skill::PrefEvol,
        Skill::GenNew,
        Skill::RecallUser,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Skill::RecallFacts => "Recall-Facts",
            Skill::PrefRec => "Pref-Rec",
            Skill::NewIdeas => "New-Ideas",
            Skill::RecallReason => "Recall-Reason",
            Skill::PrefEvol => "Pref-Evol",
            Skill::GenNew => "Gen-New",
            Skill::RecallUser => "Recall-User",
        }
    }

    pub fn parse(label: &str) -> Option<Skill> {
        Skill::ALL.into_iter().find(|s| s.label() == label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub id: String,
    pub history: Option<String>,
    pub question: String,
    /// Option texts in label order (A, B, ...).
    pub options: Vec<String>,
    pub answer: char,
    pub skill: Skill,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCase {
    id: Option<String>,
    history: Option<String>,
    question: String,
    options: BTreeMap<String, String>,
    answer: String,
    skill: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("line {line}: malformed case: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown skill tag {tag:?}")]
    UnknownSkill { line: usize, tag: String },
    #[error("line {line}: answer {answer:?} is not one of the option labels")]
    BadAnswer { line: usize, answer: String },
}

/// Parses a case file; the error names the offending line.
pub fn load_cases(text: &str) -> Result<Vec<EvalCase>, EvalError> {
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| EvalError::Malformed {
            line: line_no,
            message,
        };
        let raw: RawCase = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let skill = Skill::parse(&raw.skill).ok_or_else(|| EvalError::UnknownSkill {
            line: line_no,
            tag: raw.skill.clone(),
        })?;
        if raw.options.len() < 2 || raw.options.len() > OPTION_LETTERS.len() {
            return Err(malformed(format!(
                "expected 2 to 4 options, got {}",
                raw.options.len()
            )));
        }
        let expected: Vec<String> = OPTION_LETTERS[..raw.options.len()]
            .iter()
            .map(char::to_string)
            .collect();
        if raw.options.keys().cloned().collect::<Vec<_>>() != expected {
            return Err(malformed(format!(
                "option labels must be {}",
                expected.join(", ")
            )));
        }
        let answer = raw.answer.trim();
        let key = match answer.chars().collect::<Vec<_>>()[..] {
            [c] if raw.options.contains_key(answer) => c,
            _ => {
                return Err(EvalError::BadAnswer {
                    line: line_no,
                    answer: raw.answer.clone(),
                })
            }
        };
        cases.push(EvalCase {
            id: raw.id.unwrap_or_else(|| format!("line{line_no}")),
            history: raw.history,
            question: raw.question,
            options: raw.options.into_values().collect(),
            answer: key,
            skill,
        });
    }
    Ok(cases)
}

/// First option letter A–D not adjacent to another letter or digit.
pub fn parse_option_letter(text: &str) -> Option<char> {
    let chars: Vec<char> = text.chars().collect();
    chars.iter().enumerate().find_map(|(i, &c)| {
        let standalone = OPTION_LETTERS.contains(&c)
            && (i == 0 || !chars[i - 1].is_alphanumeric())
            && chars.get(i + 1).is_none_or(|n| !n.is_alphanumeric());
        standalone.then_some(c)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureTag {
    Transport,
    Parse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub skill: Skill,
    pub key: char,
    pub predicted: Option<char>,
    pub correct: bool,
    pub mode: AnswerMode,
    pub route_reason: String,
    pub context_chars: usize,
    pub context_tokens: usize,
    pub failure: Option<FailureTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillScore {
    pub skill: Skill,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Skills with at least one case, in the fixed skill order.
    pub per_skill: Vec<SkillScore>,
    pub mean_context_chars: f64,
    pub mean_context_tokens: f64,
    pub cases: Vec<CaseRecord>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl EvalReport {
    /// Aggregates purely from per-case records.
    pub fn from_records(cases: Vec<CaseRecord>) -> Self {
        let total = cases.len();
        let correct = cases.iter().filter(|c| c.correct).count();
        let per_skill = Skill::ALL
            .into_iter()
            .filter_map(|skill| {
                let of: Vec<_> = cases.iter().filter(|c| c.skill == skill).collect();
                (!of.is_empty()).then(|| {
                    let ok = of.iter().filter(|c| c.correct).count();
                    SkillScore {
                        skill,
                        correct: ok,
                        total: of.len(),
                        accuracy: ratio(ok, of.len()),
                    }
                })
            })
            .collect();
        let mean = |f: fn(&CaseRecord) -> usize| {
            if total == 0 {
                0.0
            } else {
                cases.iter().map(f).sum::<usize>() as f64 / total as f64
            }
        };
        Self {
            total,
            correct,
            accuracy: ratio(correct, total),
            per_skill,
            mean_context_chars: mean(|c| c.context_chars),
            mean_context_tokens: mean(|c| c.context_tokens),
            cases,
        }
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>7} {:>5} {:>8}",
            "skill", "correct", "total", "accuracy"
        );
        for s in &self.per_skill {
            let _ = writeln!(
                out,
                "{:<14} {:>7} {:>5} {:>8.4}",
                s.skill.label(),
                s.correct,
                s.total,
                s.accuracy
            );
        }
        let _ = writeln!(
            out,
            "{:<14} {:>7} {:>5} {:>8.4}",
            "Overall", self.correct, self.total, self.accuracy
        );
        let _ = writeln!(
            out,
            "mean context: {:.1} chars, {:.1} tokens (est.)",
            self.mean_context_chars, self.mean_context_tokens
        );
        out
    }

    /// One row per case.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "id,skill,key,predicted,correct,mode,context_chars,context_tokens,failure\n",
        );
        for c in &self.cases {
            let failure = match c.failure {
                Some(FailureTag::Transport) => "transport",
                Some(FailureTag::Parse) => "parse",
                None => "",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                csv_field(&c.id),
                c.skill.label(),
                c.key,
                c.predicted.map(String::from).unwrap_or_default(),
                c.correct,
                c.mode,
                c.context_chars,
                c.context_tokens,
                failure
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs every case through `pipeline`. Client failures count as wrong and
/// never stop the run.
pub fn run_eval(cases: &[EvalCase], pipeline: &Recall<'_>, tree: &PersonaTree) -> EvalReport {
    let records = cases
        .iter()
        .map(|case| {
            let (route, _, fused) = pipeline.gather(&case.question, tree);
            let context = crate::recall::answer_context(&case.question, tree, fused.as_ref());
            let reply = crate::recall::answer(
                pipeline.answerer,
                &case.question,
                tree,
                fused.as_ref(),
                Some(&case.options),
            );
            let (predicted, failure) = match reply {
                Ok(text) => match parse_option_letter(&text) {
                    Some(c) => (Some(c), None),
                    None => (None, Some(FailureTag::Parse)),
                },
                Err(e) => {
                    log::warn!("case {}: answer call failed: {e}", case.id);
                    (None, Some(FailureTag::Transport))
                }
            };
            CaseRecord {
                id: case.id.clone(),
                skill: case.skill,
                key: case.answer,
                predicted,
                correct: predicted == Some(case.answer),
                mode: route.mode,
                route_reason: route.reason,
                context_chars: context.chars().count(),
                context_tokens: estimate_tokens(&context),
                failure,
            }
        })
        .collect();
    EvalReport::from_records(records)
}

/// Test double that answers every case with its key, recognising the case
/// by its query and option block in the prompt.
pub struct OracleClient {
    cases: Vec<(String, String, char)>,
}

impl OracleClient {
    pub fn new(cases: &[EvalCase]) -> Self {
        Self {
            cases: cases
                .iter()
                .map(|c| {
                    (
                        format!("{QUERY_DELIMITER}{}", c.question),
                        render_options(&c.options),
                        c.answer,
                    )
                })
                .collect(),
        }
    }
}

impl ChatClient for OracleClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        self.cases
            .iter()
            .find(|(q, opts, _)| {
                request.prompt.contains(q.as_str()) && request.prompt.contains(opts.as_str())
            })
            .map(|(_, _, key)| key.to_string())
            .ok_or_else(|| ClientError::MockMiss("prompt matches no case".into()))
    }
}
