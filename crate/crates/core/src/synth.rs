//! Synthetic patient queries: prompt construction, response parsing, plan
//! generation and the eval/train overlap filter.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::CorpusRecord;
use crate::gateway::{self, ChatEndpoint, ChatMessage, DecodeParams, GatewayError, RetryPolicy};
use crate::parallel::Execution;
use crate::prompts;
use crate::template::{self, TemplateError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryType {
    Basic,
    Hypochondriac,
    Downplay,
}

impl QueryType {
    pub const ALL: [QueryType; 3] = [QueryType::Basic, QueryType::Hypochondriac, QueryType::Downplay];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryType::Basic => "basic",
            QueryType::Hypochondriac => "hypochondriac",
            QueryType::Downplay => "downplay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().trim_matches('"').to_lowercase();
        Self::ALL.into_iter().find(|q| q.as_str() == s)
    }
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the patient should be sent, in increasing order of severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    #[serde(alias = "Self-care")]
    SelfCare,
    #[serde(alias = "Urgent Primary Care")]
    UrgentPrimaryCare,
    #[serde(alias = "A&E")]
    AAndE,
}

impl Disposition {
    pub const ALL: [Disposition; 3] = [
        Disposition::SelfCare,
        Disposition::UrgentPrimaryCare,
        Disposition::AAndE,
    ];

    /// The string used in prompts and model answers.
    pub fn display(self) -> &'static str {
        match self {
            Disposition::SelfCare => "Self-care",
            Disposition::UrgentPrimaryCare => "Urgent Primary Care",
            Disposition::AAndE => "A&E",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Disposition::SelfCare => "self_care",
            Disposition::UrgentPrimaryCare => "urgent_primary_care",
            Disposition::AAndE => "a_and_e",
        }
    }

    /// Accepts the display strings, the enum names and common spacing or
    /// punctuation variants of both, ignoring case.
    pub fn parse(s: &str) -> Option<Self> {
        let key: String = s
            .trim()
            .trim_matches(|c| c == '"' || c == '\'')
            .to_lowercase()
            .chars()
            .filter(|c| c.is_alphanumeric() || *c == '&')
            .collect();
        match key.as_str() {
            "selfcare" => Some(Disposition::SelfCare),
            "urgentprimarycare" => Some(Disposition::UrgentPrimaryCare),
            "a&e" | "aande" | "ae" => Some(Disposition::AAndE),
            _ => None,
        }
    }
}

impl fmt::Display for Disposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    /// Free text: a number or "above 80".
    #[serde(deserialize_with = "string_or_number")]
    pub age: String,
    pub sex: String,
    pub occupation: String,
    pub social_support: String,
    pub medical_history: String,
}

fn string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    match Value::deserialize(d)? {
        Value::String(s) => Ok(s),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!(
            "expected a string or number, found {other}"
        ))),
    }
}

impl Demographics {
    /// One `Field: value` line per field, as shown to models.
    pub fn render(&self) -> String {
        format!(
            "Age: {}\nSex: {}\nOccupation: {}\nSocial support: {}\nMedical history: {}",
            self.age, self.sex, self.occupation, self.social_support, self.medical_history
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub condition_title: String,
    pub query_type: QueryType,
    pub disposition: Disposition,
    pub general_demographics: Demographics,
    pub symptoms_description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRefusal {
    pub condition_title: String,
    pub disposition: Disposition,
    pub reason: String,
}

/// One requested generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRow {
    pub condition: String,
    pub query_type: QueryType,
    pub disposition: Disposition,
    pub sex: String,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("response holds no JSON object")]
    NotJson,
    #[error("invalid JSON: {0}")]
    InvalidJson(String),
    #[error("missing or invalid field {0:?}")]
    MissingField(&'static str),
    #[error("unknown {kind} {value:?}")]
    UnknownValue { kind: &'static str, value: String },
    #[error("condition {0:?} is not in the corpus")]
    UnknownCondition(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedGeneration {
    Query(SyntheticQuery),
    Refusal(GenerationRefusal),
}

pub fn build_generation_prompt(
    record: &CorpusRecord,
    query_type: QueryType,
    disposition: Disposition,
    sex: &str,
) -> Result<String, SynthError> {
    let prompt = template::fill(
        prompts::QUERY_GENERATION_PROMPT,
        &[
            ("query_type", query_type.as_str()),
            ("severity_level", disposition.display()),
            ("sex", sex),
            ("conditions_content", &record.full_content),
        ],
    )?;
    Ok(prompt)
}

/// Pulls the JSON object out of a reply: a fenced block when present, else
/// the span from the first `{` to the last `}`.
pub fn extract_json(raw: &str) -> Option<&str> {
    if let Some(start) = raw.find("```") {
        let body = &raw[start + 3..];
        let body = body.strip_prefix("json").unwrap_or(body);
        if let Some(end) = body.find("```") {
            let inner = body[..end].trim();
            if inner.starts_with('{') {
                return Some(inner);
            }
        }
    }
    let open = raw.find('{')?;
    let close = raw.rfind('}')?;
    (close > open).then(|| &raw[open..=close])
}

/// Parses a teacher reply. Fields missing from the JSON (condition, query
/// type, disposition) are taken from `plan` when given; JSON values win.
pub fn parse_generation_response(
    raw: &str,
    plan: Option<&PlanRow>,
) -> Result<ParsedGeneration, SynthError> {
    let json = extract_json(raw).ok_or(SynthError::NotJson)?;
    let value: Value =
        serde_json::from_str(json).map_err(|e| SynthError::InvalidJson(e.to_string()))?;
    let obj = value.as_object().ok_or(SynthError::NotJson)?;

    let condition = match obj.get("condition_title").and_then(Value::as_str) {
        Some(c) => c.to_string(),
        None => plan
            .map(|p| p.condition.clone())
            .ok_or(SynthError::MissingField("condition_title"))?,
    };
    let disposition = match obj.get("disposition").and_then(Value::as_str) {
        Some(d) => Disposition::parse(d).ok_or_else(|| SynthError::UnknownValue {
            kind: "disposition",
            value: d.to_string(),
        })?,
        None => plan
            .map(|p| p.disposition)
            .ok_or(SynthError::MissingField("disposition"))?,
    };

    if let Some(err) = obj.get("error") {
        let reason = err.as_str().map(str::to_string).unwrap_or_else(|| err.to_string());
        if reason != prompts::INSUFFICIENT_INFO_ERROR {
            log::warn!("refusal for {condition:?} uses a non-standard reason: {reason}");
        }
        return Ok(ParsedGeneration::Refusal(GenerationRefusal {
            condition_title: condition,
            disposition,
            reason,
        }));
    }

    let query_type = match obj.get("query_type").and_then(Value::as_str) {
        Some(q) => QueryType::parse(q).ok_or_else(|| SynthError::UnknownValue {
            kind: "query type",
            value: q.to_string(),
        })?,
        None => plan
            .map(|p| p.query_type)
            .ok_or(SynthError::MissingField("query_type"))?,
    };
    let demographics: Demographics = obj
        .get("general_demographics")
        .cloned()
        .ok_or(SynthError::MissingField("general_demographics"))
        .and_then(|v| {
            serde_json::from_value(v).map_err(|_| SynthError::MissingField("general_demographics"))
        })?;
    let symptoms = obj
        .get("symptoms_description")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .ok_or(SynthError::MissingField("symptoms_description"))?;
    Ok(ParsedGeneration::Query(SyntheticQuery {
        condition_title: condition,
        query_type,
        disposition,
        general_demographics: demographics,
        symptoms_description: symptoms.to_string(),
    }))
}

/// Result of one plan row.
#[derive(Debug, Clone, PartialEq)]
pub enum GenerationOutcome {
    Query(SyntheticQuery),
    Refusal(GenerationRefusal),
    Failure { row: PlanRow, error: String },
}

#[derive(Debug, Clone)]
pub struct GenerationOptions {
    pub execution: Execution,
    pub params: DecodeParams,
    pub retry: RetryPolicy,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            execution: Execution::with_width(8),
            params: DecodeParams::default(),
            retry: RetryPolicy::default(),
        }
    }
}

/// One teacher call per plan row; outcomes follow plan order.
pub fn generate_query_set(
    records: &[CorpusRecord],
    llm: &dyn ChatEndpoint,
    plan: &[PlanRow],
    options: &GenerationOptions,
) -> Result<Vec<GenerationOutcome>, SynthError> {
    let by_title: HashMap<&str, &CorpusRecord> =
        records.iter().map(|r| (r.title.as_str(), r)).collect();
    if let Some(row) = plan.iter().find(|r| !by_title.contains_key(r.condition.as_str())) {
        return Err(SynthError::UnknownCondition(row.condition.clone()));
    }
    let outcomes = options.execution.map(plan, |row| {
        let record = by_title[row.condition.as_str()];
        let attempt = || -> Result<ParsedGeneration, SynthError> {
            let prompt = build_generation_prompt(record, row.query_type, row.disposition, &row.sex)?;
            let out = options.retry.run(
                |_| {
                    gateway::complete(
                        llm,
                        vec![ChatMessage::user(prompt.clone())],
                        None,
                        options.params.clone(),
                    )
                },
                GatewayError::is_transient,
            )?;
            let mut parsed = parse_generation_response(&out.answer, Some(row))?;
            // the plan is authoritative for what was requested
            match &mut parsed {
                ParsedGeneration::Query(q) => {
                    q.condition_title = row.condition.clone();
                    q.disposition = row.disposition;
                    q.query_type = row.query_type;
                }
                ParsedGeneration::Refusal(r) => {
                    r.condition_title = row.condition.clone();
                    r.disposition = row.disposition;
                }
            }
            Ok(parsed)
        };
        match attempt() {
            Ok(ParsedGeneration::Query(q)) => GenerationOutcome::Query(q),
            Ok(ParsedGeneration::Refusal(r)) => GenerationOutcome::Refusal(r),
            Err(e) => GenerationOutcome::Failure {
                row: row.clone(),
                error: e.to_string(),
            },
        }
    });
    Ok(outcomes)
}

/// Splits outcomes into (queries, refusals, failures).
pub fn partition_outcomes(
    outcomes: Vec<GenerationOutcome>,
) -> (Vec<SyntheticQuery>, Vec<GenerationRefusal>, Vec<(PlanRow, String)>) {
    let mut q = Vec::new();
    let mut r = Vec::new();
    let mut f = Vec::new();
    for o in outcomes {
        match o {
            GenerationOutcome::Query(x) => q.push(x),
            GenerationOutcome::Refusal(x) => r.push(x),
            GenerationOutcome::Failure { row, error } => f.push((row, error)),
        }
    }
    (q, r, f)
}

/// Sex alternates by row index.
pub fn sex_for_row(i: usize) -> &'static str {
    if i.is_multiple_of(2) {
        "Female"
    } else {
        "Male"
    }
}

/// `n` rows cycling through every (query type, disposition) cell, with
/// conditions drawn by a seeded RNG and sex alternating. Pairs in `banned`
/// are never drawn.
pub fn build_plan(
    titles: &[String],
    n: usize,
    seed: u64,
    banned: &HashSet<(String, Disposition)>,
) -> Vec<PlanRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<(QueryType, Disposition)> = QueryType::ALL
        .iter()
        .flat_map(|q| Disposition::ALL.iter().map(move |d| (*q, *d)))
        .collect();
    cells.shuffle(&mut rng);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let (query_type, disposition) = cells[i % cells.len()];
        let allowed: Vec<&String> = titles
            .iter()
            .filter(|t| !banned.contains(&((*t).clone(), disposition)))
            .collect();
        if allowed.is_empty() {
            continue;
        }
        let condition = allowed[rng.random_range(0..allowed.len())].clone();
        rows.push(PlanRow {
            condition,
            query_type,
            disposition,
            sex: sex_for_row(i).to_string(),
        });
    }
    rows
}

#[derive(Debug, Clone, Default)]
pub struct TargetedSet {
    pub queries: Vec<SyntheticQuery>,
    pub refusals: Vec<GenerationRefusal>,
    pub failures: Vec<(PlanRow, String)>,
    pub attempts: usize,
}

/// Generates until `target` queries exist or `5 * target` calls were made.
/// Refused or failed rows are re-drawn; a refused (condition, disposition)
/// pair is not requested again.
pub fn generate_to_target(
    records: &[CorpusRecord],
    llm: &dyn ChatEndpoint,
    target: usize,
    seed: u64,
    banned: &HashSet<(String, Disposition)>,
    options: &GenerationOptions,
) -> Result<TargetedSet, SynthError> {
    let titles: Vec<String> = records.iter().map(|r| r.title.clone()).collect();
    let max_attempts = target * 5;
    let mut banned = banned.clone();
    let mut set = TargetedSet::default();
    let mut round = 0u64;
    while set.queries.len() < target && set.attempts < max_attempts {
        let want = (target - set.queries.len()).min(max_attempts - set.attempts);
        let plan = build_plan(&titles, want, seed.wrapping_add(round), &banned);
        if plan.is_empty() {
            log::warn!("no admissible (condition, disposition) pairs left");
            break;
        }
        round += 1;
        set.attempts += plan.len();
        let (q, r, f) = partition_outcomes(generate_query_set(records, llm, &plan, options)?);
        for refusal in &r {
            banned.insert((refusal.condition_title.clone(), refusal.disposition));
        }
        set.queries.extend(q);
        set.refusals.extend(r);
        set.failures.extend(f);
    }
    if set.queries.len() < target {
        log::warn!(
            "generated {} of {target} queries within {} attempts",
            set.queries.len(),
            set.attempts
        );
    }
    Ok(set)
}

/// The (condition, disposition) pairs present in a query set.
pub fn overlap_keys(queries: &[SyntheticQuery]) -> HashSet<(String, Disposition)> {
    queries
        .iter()
        .map(|q| (q.condition_title.clone(), q.disposition))
        .collect()
}

/// Removes training queries whose (condition, disposition) pair occurs in the
/// eval set. Returns (kept, removed), both in input order.
pub fn dedup_split(
    eval_set: &[SyntheticQuery],
    train_set: &[SyntheticQuery],
) -> (Vec<SyntheticQuery>, Vec<SyntheticQuery>) {
    let keys = overlap_keys(eval_set);
    train_set
        .iter()
        .cloned()
        .partition(|q| !keys.contains(&(q.condition_title.clone(), q.disposition)))
}

pub fn load_query_set(path: &Path) -> Result<Vec<SyntheticQuery>, SynthError> {
    let err = |message: String| SynthError::File {
        path: path.display().to_string(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: SyntheticQuery =
            serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        if q.symptoms_description.trim().is_empty() {
            return Err(err(format!("line {}: empty symptoms_description", i + 1)));
        }
        out.push(q);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::scripted::ScriptedChat;
    use crate::gateway::ChatResponse;

    const EXAMPLE_OUTPUT: &str = r#"```json
{
  "general_demographics": {
    "age": 35,
    "sex": "Female",
    "occupation": "Teacher",
    "social_support": "No support network",
    "medical_history": "No known chronic conditions"
  },
  "symptoms_description": "I've had a severe headache for the past three days."
}
```"#;

    fn row(condition: &str, d: Disposition) -> PlanRow {
        PlanRow {
            condition: condition.into(),
            query_type: QueryType::Basic,
            disposition: d,
            sex: "Female".into(),
        }
    }

    fn query(condition: &str, d: Disposition) -> SyntheticQuery {
        SyntheticQuery {
            condition_title: condition.into(),
            query_type: QueryType::Basic,
            disposition: d,
            general_demographics: Demographics {
                age: "40".into(),
                sex: "Male".into(),
                occupation: "Chef".into(),
                social_support: "No support network.".into(),
                medical_history: "None relevant".into(),
            },
            symptoms_description: "I feel unwell".into(),
        }
    }

    #[test]
    fn disposition_strings() {
        for d in Disposition::ALL {
            assert_eq!(Disposition::parse(d.display()), Some(d));
            assert_eq!(Disposition::parse(d.name()), Some(d));
        }
        assert_eq!(Disposition::parse(" a & e "), Some(Disposition::AAndE));
        assert_eq!(Disposition::parse("self care"), Some(Disposition::SelfCare));
        assert_eq!(Disposition::parse("hospital"), None);
        assert!(Disposition::SelfCare < Disposition::AAndE);
    }

    #[test]
    fn prompt_substitution() {
        let r = CorpusRecord::new("Flu", "Flu content {not a slot}");
        let p = build_generation_prompt(&r, QueryType::Basic, Disposition::SelfCare, "Female")
            .unwrap();
        assert!(p.contains("Query Type: basic"));
        assert!(p.contains("Severity Level: Self-care"));
        assert!(p.contains("Flu content {not a slot}"));
        assert!(p.contains(r#""sex": "Female""#));
        assert!(template::unresolved(&p, prompts::QUERY_GENERATION_KEYS).is_empty());
    }

    #[test]
    fn parses_the_example_output() {
        let plan = row("Headache", Disposition::UrgentPrimaryCare);
        let ParsedGeneration::Query(q) = parse_generation_response(EXAMPLE_OUTPUT, Some(&plan)).unwrap()
        else {
            panic!("expected a query");
        };
        assert_eq!(q.general_demographics.age, "35");
        assert_eq!(q.general_demographics.occupation, "Teacher");
        assert_eq!(q.condition_title, "Headache");
    }

    #[test]
    fn parses_a_refusal() {
        let raw = format!(r#"{{"error": "{}"}}"#, prompts::INSUFFICIENT_INFO_ERROR);
        let plan = row("Flu", Disposition::AAndE);
        match parse_generation_response(&raw, Some(&plan)).unwrap() {
            ParsedGeneration::Refusal(r) => {
                assert_eq!(r.reason, prompts::INSUFFICIENT_INFO_ERROR);
                assert_eq!(r.disposition, Disposition::AAndE);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_json_and_missing_fields() {
        let plan = row("Flu", Disposition::AAndE);
        assert!(matches!(
            parse_generation_response("not json", Some(&plan)),
            Err(SynthError::NotJson)
        ));
        assert!(matches!(
            parse_generation_response(r#"{"symptoms_description": "x"}"#, Some(&plan)),
            Err(SynthError::MissingField("general_demographics"))
        ));
        assert!(parse_generation_response(EXAMPLE_OUTPUT, None).is_err());
    }

    #[test]
    fn serialised_query_round_trips() {
        let q = query("Flu", Disposition::UrgentPrimaryCare);
        let raw = serde_json::to_string(&q).unwrap();
        assert_eq!(
            parse_generation_response(&raw, None).unwrap(),
            ParsedGeneration::Query(q)
        );
    }

    #[test]
    fn query_set_file_accepts_display_dispositions() {
        let line = serde_json::to_string(&query("Flu", Disposition::AAndE))
            .unwrap()
            .replace("a_and_e", "A&E");
        let q: SyntheticQuery = serde_json::from_str(&line).unwrap();
        assert_eq!(q.disposition, Disposition::AAndE);
    }

    #[test]
    fn dedup_examples() {
        let eval = vec![query("flu", Disposition::SelfCare)];
        let train = vec![
            query("flu", Disposition::SelfCare),
            query("flu", Disposition::AAndE),
        ];
        let (kept, removed) = dedup_split(&eval, &train);
        assert_eq!(removed, vec![train[0].clone()]);
        assert_eq!(kept, vec![train[1].clone()]);
        let (kept, removed) = dedup_split(&train, &train);
        assert!(kept.is_empty());
        assert_eq!(removed.len(), 2);
    }

    #[test]
    fn plan_is_balanced_and_seeded() {
        let titles: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let plan = build_plan(&titles, 18, 7, &HashSet::new());
        assert_eq!(plan, build_plan(&titles, 18, 7, &HashSet::new()));
        let mut cells: HashMap<(QueryType, Disposition), usize> = HashMap::new();
        for r in &plan {
            *cells.entry((r.query_type, r.disposition)).or_default() += 1;
        }
        assert_eq!(cells.len(), 9);
        assert!(cells.values().all(|&c| c == 2));
        assert_eq!(plan.iter().filter(|r| r.sex == "Female").count(), 9);
    }

    #[test]
    fn plan_avoids_banned_pairs() {
        let titles = vec!["a".to_string(), "b".to_string()];
        let banned: HashSet<_> = Disposition::ALL.iter().map(|d| ("a".to_string(), *d)).collect();
        assert!(build_plan(&titles, 30, 1, &banned)
            .iter()
            .all(|r| r.condition == "b"));
    }

    fn records() -> Vec<CorpusRecord> {
        (0..4)
            .map(|i| CorpusRecord::new(format!("c{i}"), format!("content {i}")))
            .collect()
    }

    #[test]
    fn one_outcome_per_row() {
        let llm = ScriptedChat::always_text(EXAMPLE_OUTPUT);
        let plan: Vec<PlanRow> = (0..4).map(|i| row(&format!("c{i}"), Disposition::SelfCare)).collect();
        let out = generate_query_set(&records(), &llm, &plan, &GenerationOptions::default()).unwrap();
        let (q, r, f) = partition_outcomes(out);
        assert_eq!((q.len(), r.len(), f.len()), (4, 0, 0));
        assert_eq!(q[2].condition_title, "c2");
    }

    #[test]
    fn refusing_endpoint_gives_only_refusals() {
        let raw = format!(r#"{{"error": "{}"}}"#, prompts::INSUFFICIENT_INFO_ERROR);
        let llm = ScriptedChat::always_text(raw);
        let plan: Vec<PlanRow> = (0..3).map(|i| row(&format!("c{i}"), Disposition::AAndE)).collect();
        let (q, r, _) = partition_outcomes(
            generate_query_set(&records(), &llm, &plan, &GenerationOptions::default()).unwrap(),
        );
        assert_eq!((q.len(), r.len()), (0, 3));
    }

    #[test]
    fn garbage_is_recorded_as_failure() {
        let llm = ScriptedChat::always_text("no");
        let plan = vec![row("c0", Disposition::AAndE)];
        let (_, _, f) = partition_outcomes(
            generate_query_set(&records(), &llm, &plan, &GenerationOptions::default()).unwrap(),
        );
        assert_eq!(f.len(), 1);
    }

    #[test]
    fn unknown_plan_condition_is_an_error() {
        let llm = ScriptedChat::always_text(EXAMPLE_OUTPUT);
        let plan = vec![row("ghost", Disposition::AAndE)];
        assert!(generate_query_set(&records(), &llm, &plan, &GenerationOptions::default()).is_err());
    }

    #[test]
    fn target_loop_redraws_refusals_and_stops_at_bound() {
        // refuse anything asking for A&E
        let llm = ScriptedChat::new(|req| {
            let prompt = req.last_content(crate::gateway::Role::User).unwrap_or("");
            if prompt.contains("Severity Level: A&E") {
                Ok(ChatResponse::text(format!(
                    r#"{{"error": "{}"}}"#,
                    prompts::INSUFFICIENT_INFO_ERROR
                )))
            } else {
                Ok(ChatResponse::text(EXAMPLE_OUTPUT))
            }
        });
        let set = generate_to_target(&records(), &llm, 9, 3, &HashSet::new(), &GenerationOptions::default())
            .unwrap();
        assert_eq!(set.queries.len(), 9);
        assert!(set.queries.iter().all(|q| q.disposition != Disposition::AAndE));
        assert!(set.attempts <= 45);

        let never = ScriptedChat::always_text("nope");
        let set = generate_to_target(&records(), &never, 4, 3, &HashSet::new(), &GenerationOptions::default())
            .unwrap();
        assert!(set.queries.is_empty());
        assert_eq!(set.attempts, 20);
    }

    #[test]
    fn query_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        let qs = vec![query("a", Disposition::SelfCare), query("b", Disposition::AAndE)];
        crate::corpus::write_jsonl(&path, &qs).unwrap();
        assert_eq!(load_query_set(&path).unwrap(), qs);
    }
}
