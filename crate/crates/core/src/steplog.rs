//! JSONL step log. The first line is a header carrying the run metadata;
//! each trace follows as its step lines and a closing turn line. Reports can
//! be rebuilt from the log alone.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::metrics::RunMeta;
use crate::simulator::{StepRecord, TurnTrace};

pub const STEP_SCHEMA: &str = "chatac.steps";
pub const STEP_LOG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StepLogError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("step log line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    schema: String,
    version: u32,
    meta: RunMeta,
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    kind: String,
    trace: usize,
    conversation_id: String,
    turn_index: usize,
    k: usize,
    #[serde(flatten)]
    step: StepRecord,
}

#[derive(Serialize, Deserialize)]
struct TurnLine {
    kind: String,
    trace: usize,
    conversation_id: String,
    turn_index: usize,
    k: usize,
    full_turn_len: usize,
    steps: usize,
    accepted_chars_total: usize,
    acceptance_count: usize,
    aborted: bool,
}

#[derive(Deserialize)]
struct Kind {
    kind: String,
}

pub struct StepLogWriter<W: Write> {
    out: W,
    next_trace: usize,
}

impl<W: Write> StepLogWriter<W> {
    pub fn new(mut out: W, meta: &RunMeta) -> io::Result<Self> {
        let header =
            Header { kind: "header".into(), schema: STEP_SCHEMA.into(), version: STEP_LOG_VERSION, meta: meta.clone() };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        Ok(Self { out, next_trace: 0 })
    }

    /// Appends one trace and flushes. Returns its trace id.
    pub fn write_trace(&mut self, t: &TurnTrace) -> io::Result<usize> {
        let id = self.next_trace;
        self.next_trace += 1;
        for s in &t.steps {
            let line = StepLine {
                kind: "step".into(),
                trace: id,
                conversation_id: t.conversation_id.clone(),
                turn_index: t.turn_index,
                k: t.k,
                step: s.clone(),
            };
            serde_json::to_writer(&mut self.out, &line)?;
            self.out.write_all(b"\n")?;
        }
        let turn = TurnLine {
            kind: "turn".into(),
            trace: id,
            conversation_id: t.conversation_id.clone(),
            turn_index: t.turn_index,
            k: t.k,
            full_turn_len: t.full_turn_len,
            steps: t.steps.len(),
            accepted_chars_total: t.accepted_chars_total,
            acceptance_count: t.acceptance_count,
            aborted: t.aborted,
        };
        serde_json::to_writer(&mut self.out, &turn)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(id)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn write_step_log<W: Write>(out: W, meta: &RunMeta, traces: &[TurnTrace]) -> io::Result<W> {
    let mut w = StepLogWriter::new(out, meta)?;
    for t in traces {
        w.write_trace(t)?;
    }
    Ok(w.into_inner())
}

/// Rebuilds the run metadata and traces. Per-trace totals are recomputed
/// from the step lines and checked against the turn summaries.
pub fn read_step_log<R: BufRead>(reader: R) -> Result<(RunMeta, Vec<TurnTrace>), StepLogError> {
    let bad = |line: usize, message: String| StepLogError::Format { line, message };
    let mut meta: Option<RunMeta> = None;
    let mut pending: BTreeMap<usize, Vec<StepRecord>> = BTreeMap::new();
    let mut traces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let kind: Kind = serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?;
        match (kind.kind.as_str(), &meta) {
            ("header", None) => {
                let h: Header = serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?;
                if h.schema != STEP_SCHEMA || h.version != STEP_LOG_VERSION {
                    return Err(bad(n, format!("unsupported step log {} v{}", h.schema, h.version)));
                }
                meta = Some(h.meta);
            }
            ("header", Some(_)) => return Err(bad(n, "second header".into())),
            (_, None) => return Err(bad(n, "missing header".into())),
            ("step", Some(_)) => {
                let s: StepLine = serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?;
                if s.trace != traces.len() {
                    return Err(bad(n, format!("step for trace {} while reading trace {}", s.trace, traces.len())));
                }
                pending.entry(s.trace).or_default().push(s.step);
            }
            ("turn", Some(_)) => {
                let t: TurnLine = serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?;
                if t.trace != traces.len() {
                    return Err(bad(n, format!("trace {} out of order", t.trace)));
                }
                let steps = pending.remove(&t.trace).unwrap_or_default();
                let accepted: Vec<_> = steps.iter().filter_map(|s| s.accepted.as_ref()).collect();
                let chars: usize = accepted.iter().map(|a| a.consumed_chars).sum();
                if steps.len() != t.steps || chars != t.accepted_chars_total || accepted.len() != t.acceptance_count {
                    return Err(bad(n, format!("trace {} summary disagrees with its steps", t.trace)));
                }
                traces.push(TurnTrace {
                    conversation_id: t.conversation_id,
                    turn_index: t.turn_index,
                    k: t.k,
                    full_turn_len: t.full_turn_len,
                    accepted_chars_total: chars,
                    acceptance_count: accepted.len(),
                    steps,
                    aborted: t.aborted,
                });
            }
            (other, Some(_)) => return Err(bad(n, format!("unknown line kind {other:?}"))),
        }
    }
    if !pending.is_empty() {
        return Err(bad(0, "log ends inside a trace".into()));
    }
    let meta = meta.ok_or_else(|| bad(0, "empty step log".into()))?;
    Ok((meta, traces))
}
