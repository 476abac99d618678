//! Conversation corpora: parsing raw OASST / ShareGPT dumps into a canonical
//! form and enumerating the prefix instances a simulation runs over.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Read, Write};

use serde::de::{SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::simulator::{suggestion_points, SuggestionMode};
use crate::text::{char_len, char_offsets, tail_chars};

pub const PROMPTER_TAG: &str = "<|prompter|>";
pub const ASSISTANT_TAG: &str = "<|assistant|>";

/// Bumped whenever [`serialize_context`] output changes; part of the
/// instance-cache key.
pub const SERIALIZER_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {message}")]
    Canonical { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prompter,
    Assistant,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::Prompter => PROMPTER_TAG,
            Role::Assistant => ASSISTANT_TAG,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self { role, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub lang: String,
    pub messages: Vec<Message>,
}

impl Conversation {
    /// Checks the structural invariants: starts with a prompter turn, roles
    /// alternate, texts are non-empty and free of role tags.
    pub fn validate(&self) -> Result<(), Rejection> {
        validate_messages(&self.messages)
    }

    pub fn prompter_turns(&self) -> impl Iterator<Item = (usize, &Message)> {
        self.messages.iter().filter(|m| m.role == Role::Prompter).enumerate()
    }
}

/// Why a conversation (or OASST path) was not kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    Empty,
    EmptyText,
    NonAlternating,
    RoleTagInText,
    NonEnglish,
    UnknownRole,
}

fn validate_messages(messages: &[Message]) -> Result<(), Rejection> {
    let Some(first) = messages.first() else {
        return Err(Rejection::Empty);
    };
    if first.role != Role::Prompter {
        return Err(Rejection::NonAlternating);
    }
    if messages.windows(2).any(|w| w[0].role == w[1].role) {
        return Err(Rejection::NonAlternating);
    }
    for m in messages {
        if m.text.is_empty() {
            return Err(Rejection::EmptyText);
        }
        if contains_role_tag(&m.text) {
            return Err(Rejection::RoleTagInText);
        }
    }
    Ok(())
}

fn contains_role_tag(text: &str) -> bool {
    text.contains(PROMPTER_TAG) || text.contains(ASSISTANT_TAG)
}

/// Counters collected while parsing a raw dump. Nothing is dropped silently.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    /// Records that could not be decoded or lacked required fields.
    pub malformed_records: u64,
    /// Nodes whose parent id is absent from the dump (OASST only); each one
    /// roots a skipped subtree.
    pub orphan_subtrees: u64,
    /// Messages inside skipped orphan subtrees.
    pub orphaned_messages: u64,
    /// Messages removed for being empty after trimming (ShareGPT only).
    pub dropped_empty_messages: u64,
    /// Dropped conversations (OASST: root-to-leaf paths) keyed by reason.
    pub rejected: BTreeMap<Rejection, u64>,
}

impl ParseReport {
    fn reject(&mut self, why: Rejection) {
        *self.rejected.entry(why).or_default() += 1;
    }

    pub fn rejected_total(&self) -> u64 {
        self.rejected.values().sum()
    }
}

#[derive(Debug, Clone)]
pub struct ParsedCorpus {
    pub conversations: Vec<Conversation>,
    pub report: ParseReport,
}

// ---------------------------------------------------------------------------
// OASST

#[derive(Debug, Clone)]
struct OasstNode {
    id: String,
    parent_id: Option<String>,
    role: Role,
    text: String,
    lang: Option<String>,
}

fn str_field<'a>(v: &'a Value, names: &[&str]) -> Option<&'a str> {
    names.iter().find_map(|n| v.get(*n).and_then(Value::as_str))
}

fn oasst_node(v: &Value, parent: Option<&str>) -> Option<OasstNode> {
    let id = str_field(v, &["message_id", "id"])?.to_string();
    let role = match str_field(v, &["role"])? {
        "prompter" => Role::Prompter,
        "assistant" => Role::Assistant,
        _ => return None,
    };
    let text = str_field(v, &["text"])?.to_string();
    let parent_id = match parent {
        Some(p) => Some(p.to_string()),
        None => match v.get("parent_id") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return None,
        },
    };
    let lang = str_field(v, &["lang"]).map(str::to_string);
    Some(OasstNode { id, parent_id, role, text, lang })
}

/// Flattens one nested tree (`{"prompt": {..., "replies": [...]}}`) into nodes.
fn flatten_tree(node: &Value, parent: Option<&str>, out: &mut Vec<OasstNode>, report: &mut ParseReport) {
    let Some(n) = oasst_node(node, parent) else {
        report.malformed_records += 1;
        return;
    };
    let id = n.id.clone();
    out.push(n);
    if let Some(replies) = node.get("replies").and_then(Value::as_array) {
        for r in replies {
            flatten_tree(r, Some(&id), out, report);
        }
    }
}

/// Parses an OASST export into one conversation per root-to-leaf path.
///
/// Accepts JSONL where each line is either a flat message record
/// (`message_id`/`id`, `parent_id`, `role`, `text`, `lang`) or a nested
/// message tree (`{"prompt": {..., "replies": [...]}}`). A path is kept only
/// if every message on it is English, roles alternate starting with the
/// prompter, and no text is empty or contains a role tag.
pub fn parse_oasst<R: BufRead>(reader: R) -> Result<ParsedCorpus, CorpusError> {
    let mut report = ParseReport::default();
    let mut raw = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Ok(v) = serde_json::from_str::<Value>(&line) else {
            report.malformed_records += 1;
            continue;
        };
        if let Some(prompt) = v.get("prompt") {
            flatten_tree(prompt, None, &mut raw, &mut report);
        } else {
            match oasst_node(&v, None) {
                Some(n) => raw.push(n),
                None => report.malformed_records += 1,
            }
        }
    }

    // Duplicate ids make the tree ambiguous; drop every copy so the result
    // does not depend on record order.
    let mut seen: HashMap<String, usize> = HashMap::new();
    for n in &raw {
        *seen.entry(n.id.clone()).or_default() += 1;
    }
    let mut nodes: HashMap<String, OasstNode> = HashMap::new();
    for n in raw {
        if seen[&n.id] > 1 {
            report.malformed_records += 1;
        } else {
            nodes.insert(n.id.clone(), n);
        }
    }

    let mut children: HashMap<&str, Vec<&str>> = HashMap::new();
    let mut roots = Vec::new();
    let mut orphans = Vec::new();
    for n in nodes.values() {
        match &n.parent_id {
            None => roots.push(n.id.as_str()),
            Some(p) if nodes.contains_key(p) => children.entry(p.as_str()).or_default().push(n.id.as_str()),
            Some(_) => orphans.push(n.id.as_str()),
        }
    }
    for list in children.values_mut() {
        list.sort_unstable();
    }
    roots.sort_unstable();

    report.orphan_subtrees = orphans.len() as u64;
    for o in &orphans {
        let mut stack = vec![*o];
        while let Some(id) = stack.pop() {
            report.orphaned_messages += 1;
            if let Some(c) = children.get(id) {
                stack.extend(c.iter().copied());
            }
        }
    }

    let mut conversations = Vec::new();
    for root in roots {
        let mut path: Vec<&OasstNode> = Vec::new();
        collect_paths(root, &nodes, &children, &mut path, &mut conversations, &mut report);
    }
    Ok(ParsedCorpus { conversations, report })
}

fn collect_paths<'a>(
    id: &'a str,
    nodes: &'a HashMap<String, OasstNode>,
    children: &HashMap<&'a str, Vec<&'a str>>,
    path: &mut Vec<&'a OasstNode>,
    out: &mut Vec<Conversation>,
    report: &mut ParseReport,
) {
    path.push(&nodes[id]);
    match children.get(id) {
        Some(kids) if !kids.is_empty() => {
            for k in kids {
                collect_paths(k, nodes, children, path, out, report);
            }
        }
        _ => match path_to_conversation(path) {
            Ok(c) => out.push(c),
            Err(why) => report.reject(why),
        },
    }
    path.pop();
}

fn path_to_conversation(path: &[&OasstNode]) -> Result<Conversation, Rejection> {
    if path.iter().any(|n| n.lang.as_deref() != Some("en")) {
        return Err(Rejection::NonEnglish);
    }
    let messages: Vec<Message> = path
        .iter()
        .map(|n| Message::new(n.role, n.text.trim_end()))
        .collect();
    validate_messages(&messages)?;
    let leaf = path.last().expect("non-empty path");
    Ok(Conversation { id: leaf.id.clone(), lang: "en".into(), messages })
}

// ---------------------------------------------------------------------------
// ShareGPT

/// Parses ShareGPT conversations. The input is either one JSON array of
/// records (the published dump) or JSONL with one record per line; each
/// record is `{"id": str, "conversations": [{"from": "human"|"gpt", "value": str}]}`.
pub fn parse_sharegpt<R: Read>(mut reader: R) -> Result<ParsedCorpus, CorpusError> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf)?;
    let mut report = ParseReport::default();
    let mut conversations = Vec::new();
    let mut sink = |v: Value| match sharegpt_record(&v) {
        Err(RecordError::Malformed) => report.malformed_records += 1,
        Err(RecordError::Rejected(why)) => report.reject(why),
        Ok((conv, dropped)) => {
            report.dropped_empty_messages += dropped;
            match conv {
                Ok(c) => conversations.push(c),
                Err(why) => report.reject(why),
            }
        }
    };

    let mut bad_lines = 0;
    let first = buf.iter().find(|b| !b.is_ascii_whitespace()).copied();
    if first == Some(b'[') {
        let mut de = serde_json::Deserializer::from_slice(&buf);
        de.deserialize_seq(RecordStream(&mut sink))?;
        de.end()?;
    } else {
        for line in buf.split(|b| *b == b'\n') {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            match serde_json::from_slice::<Value>(line) {
                Ok(v) => sink(v),
                Err(_) => bad_lines += 1,
            }
        }
    }
    report.malformed_records += bad_lines;
    Ok(ParsedCorpus { conversations, report })
}

/// Feeds array elements to a callback one at a time instead of
/// materializing the whole array.
struct RecordStream<'f, F>(&'f mut F);

impl<'de, F: FnMut(Value)> Visitor<'de> for RecordStream<'_, F> {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("an array of conversation records")
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<(), A::Error> {
        while let Some(v) = seq.next_element::<Value>()? {
            (self.0)(v);
        }
        Ok(())
    }
}

enum RecordError {
    Malformed,
    Rejected(Rejection),
}

type RecordOutcome = (Result<Conversation, Rejection>, u64);

fn sharegpt_record(v: &Value) -> Result<RecordOutcome, RecordError> {
    let id = match v.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(RecordError::Malformed),
    };
    let turns = v
        .get("conversations")
        .or_else(|| v.get("items"))
        .and_then(Value::as_array)
        .ok_or(RecordError::Malformed)?;

    let mut messages = Vec::with_capacity(turns.len());
    let mut dropped = 0;
    for t in turns {
        let from = t.get("from").and_then(Value::as_str).ok_or(RecordError::Malformed)?;
        let role = match from {
            "human" => Role::Prompter,
            "gpt" => Role::Assistant,
            _ => return Err(RecordError::Rejected(Rejection::UnknownRole)),
        };
        let text = t.get("value").and_then(Value::as_str).ok_or(RecordError::Malformed)?;
        let text = text.trim_end();
        if text.trim_start().is_empty() {
            dropped += 1;
            continue;
        }
        messages.push(Message::new(role, text));
    }
    let lead = messages.iter().take_while(|m| m.role == Role::Assistant).count();
    messages.drain(..lead);

    let conv = Conversation { id, lang: "en".into(), messages };
    let outcome = conv.validate().and_then(|()| {
        if is_english(&conv) {
            Ok(conv)
        } else {
            Err(Rejection::NonEnglish)
        }
    });
    Ok((outcome, dropped))
}

/// Minimum share of ASCII characters for the English heuristic.
pub const ENGLISH_MIN_ASCII: f64 = 0.90;
/// Minimum share of word-like tokens for the English heuristic.
pub const ENGLISH_MIN_WORDLIKE: f64 = 0.60;

/// English heuristic for corpora without language metadata: at least 90% of
/// characters are ASCII and at least 60% of whitespace tokens are word-like.
/// A token is word-like when, after trimming surrounding ASCII punctuation,
/// it consists of `[A-Za-z'’-]` and contains a vowel (`aeiouy`, any case).
pub fn is_english(conv: &Conversation) -> bool {
    let (mut chars, mut ascii, mut tokens, mut wordlike) = (0usize, 0usize, 0usize, 0usize);
    for m in &conv.messages {
        for c in m.text.chars() {
            chars += 1;
            ascii += c.is_ascii() as usize;
        }
        for tok in m.text.split_whitespace() {
            tokens += 1;
            wordlike += is_wordlike(tok) as usize;
        }
    }
    if chars == 0 || tokens == 0 {
        return false;
    }
    ascii as f64 >= ENGLISH_MIN_ASCII * chars as f64 && wordlike as f64 >= ENGLISH_MIN_WORDLIKE * tokens as f64
}

fn is_wordlike(tok: &str) -> bool {
    let core = tok.trim_matches(|c: char| c.is_ascii_punctuation() && c != '\'' && c != '-');
    !core.is_empty()
        && core.chars().all(|c| c.is_ascii_alphabetic() || matches!(c, '\'' | '’' | '-'))
        && core.chars().any(|c| "aeiouyAEIOUY".contains(c))
}

// ---------------------------------------------------------------------------
// Canonical format

/// Writes conversations as canonical JSONL, one per line.
pub fn write_canonical<W: Write>(mut w: W, convs: &[Conversation]) -> Result<(), CorpusError> {
    for c in convs {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads canonical JSONL, re-validating every conversation.
pub fn read_canonical<R: BufRead>(reader: R) -> Result<Vec<Conversation>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Canonical { line: i + 1, message: e.to_string() })?;
        conv.validate().map_err(|why| CorpusError::Canonical {
            line: i + 1,
            message: format!("invalid conversation {}: {why:?}", conv.id),
        })?;
        out.push(conv);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Contexts and instances

/// Renders the history as tagged lines followed by the current prompter tag
/// and prefix: `"<|prompter|> q\n<|assistant|> a\n<|prompter|> " + prefix`.
pub fn serialize_context(history: &[Message], current_prefix: &str) -> String {
    let mut out = String::with_capacity(
        history.iter().map(|m| m.text.len() + 16).sum::<usize>() + current_prefix.len() + 16,
    );
    for m in history {
        out.push_str(m.role.tag());
        out.push(' ');
        out.push_str(&m.text);
        out.push('\n');
    }
    out.push_str(PROMPTER_TAG);
    out.push(' ');
    out.push_str(current_prefix);
    out
}

/// Context length cap in characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContextCap {
    Chars(usize),
    Full,
}

impl fmt::Display for ContextCap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextCap::Chars(n) => write!(f, "{n}"),
            ContextCap::Full => f.write_str("Full"),
        }
    }
}

impl std::str::FromStr for ContextCap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("full") {
            return Ok(ContextCap::Full);
        }
        match t.parse::<usize>() {
            Ok(n) if n > 0 => Ok(ContextCap::Chars(n)),
            _ => Err(format!("invalid context cap {s:?}: expected a positive integer or \"full\"")),
        }
    }
}

impl Serialize for ContextCap {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ContextCap::Chars(n) => s.serialize_u64(*n as u64),
            ContextCap::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for ContextCap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("context cap must be positive")),
            Raw::N(n) => Ok(ContextCap::Chars(n as usize)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Keeps the trailing `cap` characters of a serialized context. May cut
/// through a word or a role tag.
pub fn truncate_context(serialized: &str, cap: ContextCap) -> &str {
    match cap {
        ContextCap::Full => serialized,
        ContextCap::Chars(n) => tail_chars(serialized, n),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Char,
    WordBoundary,
}

impl Granularity {
    fn mode(self) -> SuggestionMode {
        match self {
            Granularity::Char => SuggestionMode::CharLevel,
            Granularity::WordBoundary => SuggestionMode::WordLevel,
        }
    }
}

/// One simulation subject: a prompter-turn prefix with its serialized context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixInstance {
    pub conversation_id: String,
    /// Index of the prompter turn among the conversation's prompter turns.
    pub turn_index: usize,
    /// Serialized history, ending with the prompter tag and `prefix`.
    pub context: String,
    pub prefix: String,
    pub gt_remainder: String,
    pub full_turn_len: usize,
}

impl PrefixInstance {
    /// The complete user turn.
    pub fn turn_text(&self) -> String {
        let mut t = String::with_capacity(self.prefix.len() + self.gt_remainder.len());
        t.push_str(&self.prefix);
        t.push_str(&self.gt_remainder);
        t
    }

    /// The serialized context with the prefix removed; ends with the
    /// prompter tag and a space.
    pub fn context_head(&self) -> &str {
        &self.context[..self.context.len() - self.prefix.len()]
    }

    pub fn prefix_len(&self) -> usize {
        char_len(&self.prefix)
    }
}

/// Lazily enumerates prefix instances for every prompter turn of `conv`.
pub fn enumerate_instances(conv: &Conversation, granularity: Granularity) -> impl Iterator<Item = PrefixInstance> + '_ {
    let mode = granularity.mode();
    conv.messages
        .iter()
        .enumerate()
        .filter(|(_, m)| m.role == Role::Prompter)
        .enumerate()
        .flat_map(move |(turn_index, (msg_index, msg))| {
            let head = serialize_context(&conv.messages[..msg_index], "");
            let offsets = char_offsets(&msg.text);
            let full_turn_len = offsets.len() - 1;
            let points = if msg.text.is_empty() { Vec::new() } else { suggestion_points(&msg.text, mode) };
            points.into_iter().map(move |p| {
                let split = offsets[p];
                let prefix = &msg.text[..split];
                let mut context = head.clone();
                context.push_str(prefix);
                PrefixInstance {
                    conversation_id: conv.id.clone(),
                    turn_index,
                    context,
                    prefix: prefix.to_string(),
                    gt_remainder: msg.text[split..].to_string(),
                    full_turn_len,
                }
            })
        })
}

/// One instance per prompter turn, positioned at the empty prefix. These are
/// the subjects of whole-turn simulations.
pub fn turn_starts(conv: &Conversation) -> impl Iterator<Item = PrefixInstance> + '_ {
    conv.messages
        .iter()
        .enumerate()
        .filter(|(_, m)| m.role == Role::Prompter)
        .enumerate()
        .map(|(turn_index, (msg_index, msg))| PrefixInstance {
            conversation_id: conv.id.clone(),
            turn_index,
            context: serialize_context(&conv.messages[..msg_index], ""),
            prefix: String::new(),
            gt_remainder: msg.text.clone(),
            full_turn_len: char_len(&msg.text),
        })
}

/// Corpus size statistics: conversations, messages, user turns and prefixes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub conversations: u64,
    pub messages: u64,
    pub prompter_turns: u64,
    /// Character-level prefixes (one per character of every prompter turn).
    pub char_prefixes: u64,
    /// Word-boundary prefixes.
    pub word_prefixes: u64,
}

impl CorpusStats {
    pub fn compute(convs: &[Conversation]) -> Self {
        let mut s = CorpusStats { conversations: convs.len() as u64, ..Default::default() };
        for c in convs {
            s.messages += c.messages.len() as u64;
            for (_, m) in c.prompter_turns() {
                s.prompter_turns += 1;
                s.char_prefixes += char_len(&m.text) as u64;
                if !m.text.is_empty() {
                    s.word_prefixes += suggestion_points(&m.text, SuggestionMode::WordLevel).len() as u64;
                }
            }
        }
        s
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}{:>12}", "Conversations", self.conversations)?;
        writeln!(f, "{:<16}{:>12}", "Messages", self.messages)?;
        writeln!(f, "{:<16}{:>12}", "User turns", self.prompter_turns)?;
        writeln!(f, "{:<16}{:>12}", "Prefixes", self.char_prefixes)?;
        write!(f, "{:<16}{:>12}", "Word prefixes", self.word_prefixes)
    }
}

// ---------------------------------------------------------------------------
// Instance cache

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedInstance {
    pub conversation_id: String,
    pub turn_index: usize,
    pub prefix_len: usize,
}

/// File name of a materialized instance cache for the given key.
pub fn instance_cache_name(dataset: &str, split: &str, granularity: Granularity) -> String {
    let g = match granularity {
        Granularity::Char => "char",
        Granularity::WordBoundary => "word",
    };
    format!("instances-{dataset}-{split}-{g}-v{SERIALIZER_VERSION}.jsonl")
}

/// Streams instance keys to `w`; returns the number written.
pub fn write_instance_cache<W: Write>(
    mut w: W,
    convs: &[Conversation],
    granularity: Granularity,
) -> Result<u64, CorpusError> {
    let mut n = 0;
    for c in convs {
        for inst in enumerate_instances(c, granularity) {
            let key = CachedInstance {
                conversation_id: inst.conversation_id,
                turn_index: inst.turn_index,
                prefix_len: char_len(&inst.prefix),
            };
            serde_json::to_writer(&mut w, &key)?;
            w.write_all(b"\n")?;
            n += 1;
        }
    }
    w.flush()?;
    Ok(n)
}

/// Rebuilds instances from cache keys against the canonical conversations.
/// Keys that no longer resolve are skipped and counted.
pub fn resolve_cached<R: BufRead>(
    reader: R,
    convs: &[Conversation],
) -> Result<(Vec<PrefixInstance>, u64), CorpusError> {
    let by_id: HashMap<&str, &Conversation> = convs.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut out = Vec::new();
    let mut unresolved = 0;
    let mut seen = HashSet::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let key: CachedInstance = serde_json::from_str(&line)?;
        let turn = by_id
            .get(key.conversation_id.as_str())
            .and_then(|c| turn_starts(c).nth(key.turn_index));
        match turn {
            Some(t) if key.prefix_len < t.full_turn_len && seen.insert((key.conversation_id.clone(), key.turn_index, key.prefix_len)) => {
                let text = t.turn_text();
                let split = char_offsets(&text)[key.prefix_len];
                let mut context = t.context.clone();
                context.push_str(&text[..split]);
                out.push(PrefixInstance {
                    conversation_id: t.conversation_id,
                    turn_index: t.turn_index,
                    context,
                    prefix: text[..split].to_string(),
                    gt_remainder: text[split..].to_string(),
                    full_turn_len: t.full_turn_len,
                });
            }
            _ => unresolved += 1,
        }
    }
    Ok((out, unresolved))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn conv(id: &str, msgs: &[(Role, &str)]) -> Conversation {
        Conversation {
            id: id.into(),
            lang: "en".into(),
            messages: msgs.iter().map(|(r, t)| Message::new(*r, *t)).collect(),
        }
    }

    fn node(id: &str, parent: Option<&str>, role: &str, text: &str, lang: &str) -> String {
        serde_json::json!({"message_id": id, "parent_id": parent, "role": role, "text": text, "lang": lang}).to_string()
    }

    #[test]
    fn oasst_single_root() {
        let input = node("r", None, "prompter", "Hello there", "en");
        let parsed = parse_oasst(input.as_bytes()).unwrap();
        assert_eq!(parsed.conversations.len(), 1);
        assert_eq!(parsed.conversations[0].messages.len(), 1);
        assert_eq!(parsed.conversations[0].messages[0].role, Role::Prompter);
    }

    fn toy_tree() -> Vec<String> {
        vec![
            node("r", None, "prompter", "What is rust?", "en"),
            node("a1", Some("r"), "assistant", "A language.", "en"),
            node("a2", Some("r"), "assistant", "An oxide.", "en"),
            node("p1", Some("a1"), "prompter", "Thanks!", "en"),
            node("p2", Some("a2"), "prompter", "Of iron?", "en"),
        ]
    }

    #[test]
    fn oasst_paths_share_root() {
        let parsed = parse_oasst(toy_tree().join("\n").as_bytes()).unwrap();
        let c = &parsed.conversations;
        assert_eq!(c.len(), 2);
        for conv in c {
            assert_eq!(conv.messages.len(), 3);
            assert_eq!(conv.messages[0].text, "What is rust?");
        }
        assert_eq!(c[0].messages[1].text, "A language.");
        assert_eq!(c[1].messages[1].text, "An oxide.");
        assert_eq!(c[0].id, "p1");
        assert_eq!(c[1].id, "p2");
    }

    #[test]
    fn oasst_record_order_independent() {
        let mut lines = toy_tree();
        let a = parse_oasst(lines.join("\n").as_bytes()).unwrap().conversations;
        lines.reverse();
        let b = parse_oasst(lines.join("\n").as_bytes()).unwrap().conversations;
        assert_eq!(a, b);
    }

    #[test]
    fn oasst_nested_tree_matches_flat() {
        let nested = serde_json::json!({
            "message_tree_id": "r",
            "prompt": {"message_id": "r", "role": "prompter", "text": "What is rust?", "lang": "en", "replies": [
                {"message_id": "a1", "role": "assistant", "text": "A language.", "lang": "en", "replies": [
                    {"message_id": "p1", "role": "prompter", "text": "Thanks!", "lang": "en", "replies": []}]},
                {"message_id": "a2", "role": "assistant", "text": "An oxide.", "lang": "en", "replies": [
                    {"message_id": "p2", "role": "prompter", "text": "Of iron?", "lang": "en"}]}
            ]}
        });
        let a = parse_oasst(nested.to_string().as_bytes()).unwrap().conversations;
        let b = parse_oasst(toy_tree().join("\n").as_bytes()).unwrap().conversations;
        assert_eq!(a, b);
    }

    #[test]
    fn oasst_counts_orphans_malformed_and_rejections() {
        let mut lines = toy_tree();
        lines.push("{not json".into());
        lines.push(node("o1", Some("missing"), "assistant", "lost", "en"));
        lines.push(node("o2", Some("o1"), "prompter", "also lost", "en"));
        lines.push(node("x", Some("p1"), "assistant", "Bitte sehr", "de"));
        lines.push(node("y", Some("p2"), "prompter", "double prompter", "en"));
        let parsed = parse_oasst(lines.join("\n").as_bytes()).unwrap();
        assert_eq!(parsed.report.malformed_records, 1);
        assert_eq!(parsed.report.orphan_subtrees, 1);
        assert_eq!(parsed.report.orphaned_messages, 2);
        assert_eq!(parsed.report.rejected[&Rejection::NonEnglish], 1);
        assert_eq!(parsed.report.rejected[&Rejection::NonAlternating], 1);
        assert!(parsed.conversations.is_empty());
    }

    #[test]
    fn oasst_trims_trailing_whitespace() {
        let input = node("r", None, "prompter", "Hi there  \n", "en");
        let parsed = parse_oasst(input.as_bytes()).unwrap();
        assert_eq!(parsed.conversations[0].messages[0].text, "Hi there");
    }

    fn sharegpt(id: &str, turns: &[(&str, &str)]) -> Value {
        serde_json::json!({
            "id": id,
            "conversations": turns.iter().map(|(f, v)| serde_json::json!({"from": f, "value": v})).collect::<Vec<_>>()
        })
    }

    #[test]
    fn sharegpt_minimal_pair() {
        let input = Value::Array(vec![sharegpt("s1", &[("human", "hi"), ("gpt", "hello")])]).to_string();
        let parsed = parse_sharegpt(input.as_bytes()).unwrap();
        assert_eq!(parsed.conversations.len(), 1);
        assert_eq!(parsed.conversations[0].messages.len(), 2);
    }

    #[test]
    fn sharegpt_trims_leading_assistant() {
        let rec = sharegpt("s1", &[("gpt", "greeting"), ("human", "where is home"), ("gpt", "right here")]);
        let parsed = parse_sharegpt(rec.to_string().as_bytes()).unwrap();
        let msgs = &parsed.conversations[0].messages;
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0], Message::new(Role::Prompter, "where is home"));
    }

    #[test]
    fn sharegpt_english_filter_drops_cjk() {
        let rec = sharegpt(
            "s1",
            &[
                ("human", "Can you help me plan a trip?"),
                ("gpt", "Sure, where would you like to go?"),
                ("human", "我想去日本旅行，请帮我安排一个为期两周的行程，包括东京、京都和大阪的主要景点以及交通方式。"),
                ("gpt", "Here is a plan."),
                ("human", "Thanks"),
                ("gpt", "You are welcome."),
            ],
        );
        let parsed = parse_sharegpt(rec.to_string().as_bytes()).unwrap();
        assert!(parsed.conversations.is_empty());
        assert_eq!(parsed.report.rejected[&Rejection::NonEnglish], 1);
    }

    #[test]
    fn sharegpt_unknown_role_and_empty_messages() {
        let bad = sharegpt("s1", &[("human", "hi there"), ("bing", "hello")]);
        let gap = sharegpt("s2", &[("human", "hi there"), ("gpt", "   "), ("human", "anyone?")]);
        let ok = sharegpt("s3", &[("human", "hi there"), ("gpt", ""), ("gpt", "hello you")]);
        let input = format!("{bad}\n{gap}\n{ok}\n");
        let parsed = parse_sharegpt(input.as_bytes()).unwrap();
        assert_eq!(parsed.report.rejected[&Rejection::UnknownRole], 1);
        assert_eq!(parsed.report.rejected[&Rejection::NonAlternating], 1);
        assert_eq!(parsed.report.dropped_empty_messages, 2);
        assert_eq!(parsed.conversations.len(), 1);
        assert_eq!(parsed.conversations[0].id, "s3");
    }

    #[test]
    fn serialize_empty_history() {
        assert_eq!(serialize_context(&[], "Do"), "<|prompter|> Do");
    }

    #[test]
    fn serialize_two_turn_history() {
        let h = vec![
            Message::new(Role::Prompter, "What is the Sun?"),
            Message::new(Role::Assistant, "The Sun is a star…"),
        ];
        assert_eq!(
            serialize_context(&h, "Can"),
            "<|prompter|> What is the Sun?\n<|assistant|> The Sun is a star…\n<|prompter|> Can"
        );
    }

    #[test]
    fn serialize_empty_prefix_ends_with_tag() {
        let h: Vec<Message> = (0..4)
            .map(|i| Message::new(if i % 2 == 0 { Role::Prompter } else { Role::Assistant }, format!("m{i}")))
            .collect();
        let s = serialize_context(&h, "");
        assert!(s.ends_with("\n<|prompter|> "));
        assert_eq!(s.lines().count(), 5);
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate_context("abcdef", ContextCap::Chars(4)), "cdef");
        assert_eq!(truncate_context("abcdef", ContextCap::Full), "abcdef");
        let long: String = (0..1200).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let t = truncate_context(&long, ContextCap::Chars(1000));
        assert_eq!(t.len(), 1000);
        assert_eq!(t, &long[200..]);
    }

    #[test]
    fn context_cap_parse_and_serde() {
        assert_eq!("full".parse::<ContextCap>().unwrap(), ContextCap::Full);
        assert_eq!("250".parse::<ContextCap>().unwrap(), ContextCap::Chars(250));
        assert!("0".parse::<ContextCap>().is_err());
        assert_eq!(serde_json::to_string(&ContextCap::Full).unwrap(), "\"full\"");
        assert_eq!(serde_json::from_str::<ContextCap>("50").unwrap(), ContextCap::Chars(50));
    }

    #[test]
    fn char_instances() {
        let c = conv("c", &[(Role::Prompter, "hi")]);
        let got: Vec<String> = enumerate_instances(&c, Granularity::Char).map(|i| i.prefix).collect();
        assert_eq!(got, vec!["", "h"]);
    }

    #[test]
    fn word_instances() {
        let c = conv("c", &[(Role::Prompter, "the cat sat")]);
        let got: Vec<String> = enumerate_instances(&c, Granularity::WordBoundary).map(|i| i.prefix).collect();
        assert_eq!(got, vec!["", "the ", "the cat "]);
    }

    #[test]
    fn instance_context_and_turn_index() {
        let c = conv("c", &[(Role::Prompter, "ab"), (Role::Assistant, "x"), (Role::Prompter, "cd")]);
        let inst: Vec<_> = enumerate_instances(&c, Granularity::Char).collect();
        assert_eq!(inst.len(), 4);
        assert_eq!(inst[3].turn_index, 1);
        assert_eq!(inst[3].context, "<|prompter|> ab\n<|assistant|> x\n<|prompter|> c");
        assert_eq!(inst[3].context_head(), "<|prompter|> ab\n<|assistant|> x\n<|prompter|> ");
    }

    #[test]
    fn instance_cache_round_trip() {
        let c = vec![conv("c", &[(Role::Prompter, "the cat"), (Role::Assistant, "x"), (Role::Prompter, "ok")])];
        let mut buf = Vec::new();
        let n = write_instance_cache(&mut buf, &c, Granularity::WordBoundary).unwrap();
        assert_eq!(n, 3);
        let (back, missing) = resolve_cached(buf.as_slice(), &c).unwrap();
        assert_eq!(missing, 0);
        let direct: Vec<_> = enumerate_instances(&c[0], Granularity::WordBoundary).collect();
        assert_eq!(back, direct);
        assert_eq!(instance_cache_name("oasst", "test", Granularity::Char), "instances-oasst-test-char-v1.jsonl");
    }

    #[test]
    fn canonical_round_trip() {
        let c = vec![conv("c1", &[(Role::Prompter, "q"), (Role::Assistant, "a")])];
        let mut buf = Vec::new();
        write_canonical(&mut buf, &c).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"id\":\"c1\",\"lang\":\"en\",\"messages\":[{\"role\":\"prompter\",\"text\":\"q\"},{\"role\":\"assistant\",\"text\":\"a\"}]}\n"
        );
        assert_eq!(read_canonical(buf.as_slice()).unwrap(), c);
    }

    #[test]
    fn stats_counts() {
        let c = vec![conv("c", &[(Role::Prompter, "the cat"), (Role::Assistant, "x"), (Role::Prompter, "ok")])];
        let s = CorpusStats::compute(&c);
        assert_eq!(s, CorpusStats { conversations: 1, messages: 3, prompter_turns: 2, char_prefixes: 9, word_prefixes: 3 });
    }

    fn turn_text() -> impl Strategy<Value = String> {
        proptest::string::string_regex("[a-zé ,.!?]{1,40}")
            .unwrap()
            .prop_map(|s| s.trim_end().to_string())
            .prop_filter("non-empty", |s| !s.is_empty())
    }

    proptest! {
        #[test]
        fn instances_reconstruct_turn(text in turn_text()) {
            let c = conv("c", &[(Role::Prompter, &text)]);
            let chars: Vec<_> = enumerate_instances(&c, Granularity::Char).collect();
            prop_assert_eq!(chars.len(), char_len(&text));
            for i in &chars {
                prop_assert_eq!(i.turn_text(), text.clone());
                prop_assert_eq!(i.full_turn_len, char_len(&i.prefix) + char_len(&i.gt_remainder));
                let tail = format!("{} {}", PROMPTER_TAG, i.prefix);
                prop_assert!(i.context.ends_with(&tail));
            }
            let prefixes: HashSet<String> = chars.into_iter().map(|i| i.prefix).collect();
            for w in enumerate_instances(&c, Granularity::WordBoundary) {
                prop_assert!(prefixes.contains(&w.prefix));
            }
        }

        #[test]
        fn serialization_distinguishes_histories(a in "[a-z ]{1,12}", b in "[a-z ]{1,12}", p in "[a-z]{0,5}") {
            let ha = vec![Message::new(Role::Prompter, a.clone())];
            let hb = vec![Message::new(Role::Prompter, b.clone())];
            prop_assert_eq!(serialize_context(&ha, &p) == serialize_context(&hb, &p), a == b);
        }
    }
}
