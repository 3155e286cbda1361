//! Training-data synthesis: staged answer generation, format filtering and a
//! judge pass against the reference answer. Output is append-only JSONL and
//! can be resumed.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatModel};
use crate::stages::{parse_staged, ParseError, StageKind, StagedResponse, TagSchema};

pub const GENERATION_INSTRUCTION: &str = "I have an image and a question that I want you to answer. I need you to strictly follow the format with four specific sections: SUMMARY, CAPTION, REASONING, and CONCLUSION. It is crucial that you adhere to this structure exactly as outlined and that the final answer in the CONCLUSION matches the standard correct answer precisely.

To explain further:
In SUMMARY, briefly explain what steps you'll take to solve the problem.
In CAPTION, describe the contents of the image, specifically focusing on details relevant to the question.
In REASONING, outline a step-by-step thought process you would use to solve the problem based on the image.
In CONCLUSION, give the final answer in a direct format, and it must match the correct answer exactly.
If it's a multiple choice question, the conclusion should only include the option without repeating what the option is.

Here's how the format should look:

<SUMMARY> [Summarize how you will approach the problem and explain the steps you will take to reach the answer.] </SUMMARY>

<CAPTION> [Provide a detailed description of the image, particularly emphasizing the aspects related to the question.] </CAPTION>

<REASONING> [Provide a chain-of-thought, logical explanation of the problem. This should outline step-by-step reasoning.] </REASONING>

<CONCLUSION> [State the final answer in a clear and direct format. It must match the correct answer exactly.] </CONCLUSION>
(Do not forget </CONCLUSION>!)

Please apply this format meticulously to analyze the given image and answer the related question, ensuring that the answer matches the standard one perfectly.";

pub const VERIFICATION_TEMPLATE: &str = "Evaluate whether the assistant's response is valid. Respond with 'valid' if the assistant's response is not a refusal and it aligns with the standard answer in meaning. Respond with 'invalid' if the response is a refusal or differs from the standard answer in a meaningful way.

A refusal means the assistant states it cannot recognize a specific person/object or refuses to answer the question. Do not consider a response to be a refusal just because it includes the word 'no' or other negative terms.

Standard answer: {standard_answer}

Assistant's response: {assistant_response}";

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("format invalid: {0}")]
    FormatInvalid(#[from] ParseError),
    #[error("judge verdict is neither valid nor invalid: {0:?}")]
    UnparseableVerdict(String),
    #[error("source record {id:?}: {reason}")]
    InvalidSource { id: String, reason: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("output line {line}: {source}")]
    Corrupt {
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub gold_answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRecord {
    pub id: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub question: String,
    pub gold_answer: String,
    /// Follow-up turns on the same image, each becoming its own record.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub multi_turn: Vec<Turn>,
}

/// One unit of generation work: a source turn with a derived id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkItem {
    pub id: String,
    pub image_ref: Option<String>,
    pub question: String,
    pub gold_answer: String,
    /// Earlier turns of the same conversation.
    pub context: Vec<Turn>,
}

impl SourceRecord {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |reason: &str| DatagenError::InvalidSource {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(bad("empty id"));
        }
        if self.question.trim().is_empty() || self.multi_turn.iter().any(|t| t.question.trim().is_empty()) {
            return Err(bad("empty question"));
        }
        Ok(())
    }

    /// The first turn keeps the record id; follow-ups become `{id}#{n}` with n from 1.
    pub fn work_items(&self) -> Vec<WorkItem> {
        let first = WorkItem {
            id: self.id.clone(),
            image_ref: self.image_ref.clone(),
            question: self.question.clone(),
            gold_answer: self.gold_answer.clone(),
            context: Vec::new(),
        };
        let mut turns = vec![Turn {
            question: self.question.clone(),
            gold_answer: self.gold_answer.clone(),
        }];
        turns.extend(self.multi_turn.iter().cloned());
        let rest = self.multi_turn.iter().enumerate().map(|(i, t)| WorkItem {
            id: format!("{}#{}", self.id, i + 1),
            image_ref: self.image_ref.clone(),
            question: t.question.clone(),
            gold_answer: t.gold_answer.clone(),
            context: turns[..=i].to_vec(),
        });
        std::iter::once(first).chain(rest).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RecordStatus {
    FormatInvalid,
    JudgedInvalid,
    Valid,
    /// A backend call failed; the item is attempted again on the next run.
    Retryable,
}

impl RecordStatus {
    pub fn is_terminal(self) -> bool {
        self != RecordStatus::Retryable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub id: String,
    pub raw_response: String,
    #[serde(default)]
    pub parsed: Option<StagedResponse>,
    pub status: RecordStatus,
    #[serde(default)]
    pub judge_verdict_raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationPrompt {
    pub instruction: String,
    pub user: String,
}

pub fn build_generation_prompt(item: &WorkItem) -> GenerationPrompt {
    let mut user = String::new();
    if let Some(image) = &item.image_ref {
        user.push_str(&format!("Image: {image}\n"));
    }
    for t in &item.context {
        user.push_str(&format!(
            "Previous question: {}\nPrevious answer: {}\n",
            t.question, t.gold_answer
        ));
    }
    user.push_str(&format!(
        "Question: {}\nStandard correct answer: {}",
        item.question, item.gold_answer
    ));
    GenerationPrompt {
        instruction: GENERATION_INSTRUCTION.to_string(),
        user,
    }
}

pub fn validate_and_extract(
    raw: &str,
    schema: &TagSchema,
) -> Result<(StagedResponse, String), DatagenError> {
    let parsed = parse_staged(raw, schema, true)?;
    let conclusion = parsed
        .get(StageKind::Conclusion)
        .expect("complete response has a conclusion")
        .text
        .clone();
    Ok((parsed, conclusion))
}

/// Fills both placeholders in one left-to-right pass; substituted text is never rescanned.
pub fn build_verification_prompt(standard_answer: &str, assistant_response: &str) -> String {
    const SA: &str = "{standard_answer}";
    const AR: &str = "{assistant_response}";
    let mut out = String::with_capacity(VERIFICATION_TEMPLATE.len() + standard_answer.len() + assistant_response.len());
    let mut rest = VERIFICATION_TEMPLATE;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix(SA) {
            out.push_str(standard_answer);
            rest = after;
        } else if let Some(after) = tail.strip_prefix(AR) {
            out.push_str(assistant_response);
            rest = after;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Valid,
    Invalid,
}

/// First alphabetic token of the lowercased reply decides.
pub fn parse_verdict(reply: &str) -> Result<Verdict, DatagenError> {
    let lower = reply.trim().to_lowercase();
    let token = lower
        .split(|c: char| !c.is_alphabetic())
        .find(|t| !t.is_empty())
        .unwrap_or("");
    match token {
        "valid" => Ok(Verdict::Valid),
        "invalid" => Ok(Verdict::Invalid),
        _ => Err(DatagenError::UnparseableVerdict(reply.to_string())),
    }
}

/// Returns the verdict and the raw judge reply.
pub fn judge_validity(
    judge: &dyn ChatModel,
    standard_answer: &str,
    conclusion: &str,
) -> Result<(Result<Verdict, DatagenError>, String), BackendError> {
    let prompt = build_verification_prompt(standard_answer, conclusion);
    let reply = judge.complete("", &prompt)?;
    Ok((parse_verdict(&reply), reply))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PipelineSummary {
    pub counts: BTreeMap<RecordStatus, usize>,
    /// Items skipped because the output already held a terminal record.
    pub resumed: usize,
    pub generator_calls: usize,
    pub judge_calls: usize,
}

impl PipelineSummary {
    pub fn count(&self, status: RecordStatus) -> usize {
        self.counts.get(&status).copied().unwrap_or(0)
    }
}

fn read_records(path: &Path) -> Result<Vec<GeneratedRecord>, DatagenError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            // Unterminated last line from an interrupted run.
            Err(_) if !complete && i + 1 == lines.len() => break,
            Err(source) => return Err(DatagenError::Corrupt { line: i + 1, source }),
        }
    }
    Ok(out)
}

/// Cuts an unterminated last line left by an interrupted run.
fn drop_torn_tail(path: &Path) -> Result<(), std::io::Error> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    if bytes.last().is_some_and(|b| *b != b'\n') {
        let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    }
    Ok(())
}

fn process(
    item: &WorkItem,
    generator: &dyn ChatModel,
    judge: &dyn ChatModel,
    schema: &TagSchema,
    summary: &mut PipelineSummary,
) -> GeneratedRecord {
    let prompt = build_generation_prompt(item);
    summary.generator_calls += 1;
    let mut record = GeneratedRecord {
        id: item.id.clone(),
        raw_response: String::new(),
        parsed: None,
        status: RecordStatus::Retryable,
        judge_verdict_raw: None,
        error: None,
    };
    match generator.complete(&prompt.instruction, &prompt.user) {
        Ok(raw) => record.raw_response = raw,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    }
    let (parsed, conclusion) = match validate_and_extract(&record.raw_response, schema) {
        Ok(x) => x,
        Err(e) => {
            record.status = RecordStatus::FormatInvalid;
            record.error = Some(e.to_string());
            return record;
        }
    };
    record.parsed = Some(parsed);
    summary.judge_calls += 1;
    match judge_validity(judge, &item.gold_answer, &conclusion) {
        Ok((verdict, raw)) => {
            record.judge_verdict_raw = Some(raw);
            record.status = match verdict {
                Ok(Verdict::Valid) => RecordStatus::Valid,
                Ok(Verdict::Invalid) => RecordStatus::JudgedInvalid,
                Err(e) => {
                    record.error = Some(e.to_string());
                    RecordStatus::JudgedInvalid
                }
            };
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

/// Runs every source turn not already finished in `output`. Each record is
/// appended and flushed as soon as it is produced; at the end the file is
/// rewritten with one line per id (the latest record wins).
pub fn run_pipeline(
    sources: &[SourceRecord],
    generator: &dyn ChatModel,
    judge: &dyn ChatModel,
    schema: &TagSchema,
    output: &Path,
) -> Result<PipelineSummary, DatagenError> {
    for s in sources {
        s.validate()?;
    }
    let items: Vec<WorkItem> = sources.iter().flat_map(SourceRecord::work_items).collect();
    let mut seen = std::collections::HashSet::new();
    for it in &items {
        if !seen.insert(it.id.as_str()) {
            return Err(DatagenError::InvalidSource {
                id: it.id.clone(),
                reason: "duplicate id".into(),
            });
        }
    }

    let existing = read_records(output)?;
    let done: HashMap<&str, RecordStatus> = existing
        .iter()
        .filter(|r| r.status.is_terminal())
        .map(|r| (r.id.as_str(), r.status))
        .collect();

    let mut summary = PipelineSummary::default();
    {
        drop_torn_tail(output)?;
        let mut out = BufWriter::new(OpenOptions::new().create(true).append(true).open(output)?);
        for item in &items {
            if let Some(status) = done.get(item.id.as_str()) {
                summary.resumed += 1;
                *summary.counts.entry(*status).or_default() += 1;
                continue;
            }
            let record = process(item, generator, judge, schema, &mut summary);
            tracing::debug!(id = %record.id, status = ?record.status, "datagen record");
            *summary.counts.entry(record.status).or_default() += 1;
            serde_json::to_writer(&mut out, &record).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
    }
    compact(output)?;
    Ok(summary)
}

/// Rewrites the output keeping the last record per id, in first-seen order.
pub fn compact(path: &Path) -> Result<(), DatagenError> {
    let records = read_records(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut latest: HashMap<String, GeneratedRecord> = HashMap::new();
    for r in records {
        if !latest.contains_key(&r.id) {
            order.push(r.id.clone());
        }
        latest.insert(r.id.clone(), r);
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        for id in &order {
            serde_json::to_writer(&mut out, &latest[id]).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_sources(path: &Path) -> Result<Vec<SourceRecord>, DatagenError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DatagenError::Corrupt { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn read_output(path: &Path) -> Result<Vec<GeneratedRecord>, DatagenError> {
    read_records(path)
}
