//! Search audit log, serialized as one JSON object per line.
//!
//! The first line is a `start` record carrying the full search config, so a
//! trace file is self-describing and can be replayed.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SearchConfig, Strategy};
use crate::stages::StageKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub strategy: Strategy,
    pub question_digest: String,
    pub config: SearchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Generate {
        stage: StageKind,
        through: StageKind,
        pass: usize,
        candidate: u64,
        parent: Option<u64>,
        seed: u64,
        input_digest: String,
        output_digest: String,
        parse_error: Option<String>,
    },
    /// `score` is absent for candidates that failed to parse (scored as −∞).
    Score {
        stage: StageKind,
        pass: usize,
        candidate: u64,
        score: Option<f64>,
    },
    Select {
        stage: StageKind,
        pass: usize,
        kept: Vec<u64>,
        scores: Vec<Option<f64>>,
    },
    Retrace {
        after_pass: usize,
        #[serde(with = "ext_f64")]
        cutoff: f64,
        passing: usize,
        required: usize,
    },
    Final {
        candidate: u64,
        score: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "event", rename = "start")]
struct StartLine {
    #[serde(flatten)]
    header: TraceHeader,
}

impl SearchTrace {
    pub fn new(header: TraceHeader) -> Self {
        SearchTrace {
            header,
            events: Vec::new(),
        }
    }

    pub fn push(&mut self, event: TraceEvent) {
        self.events.push(event);
    }

    pub fn generations(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TraceEvent::Generate { .. }))
            .count()
    }

    pub fn retraces(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TraceEvent::Retrace { .. }))
            .count()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let start = StartLine {
            header: self.header.clone(),
        };
        serde_json::to_writer(&mut out, &start)?;
        out.write_all(b"\n")?;
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, std::io::Error> {
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "empty trace"))??;
        let start: StartLine = serde_json::from_str(&first)?;
        let mut trace = SearchTrace::new(start.header);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            trace.events.push(serde_json::from_str(&line)?);
        }
        Ok(trace)
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..16])
}

/// f64 that may be infinite: finite values as JSON numbers, others as strings.
pub mod ext_f64 {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(D::Error::custom(format!("bad float `{other}`"))),
            },
        }
    }
}
