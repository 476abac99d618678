//! Shared fixtures: a deterministic generator of OASST-format message
//! trees, and helpers for locating real OASST exports.

#![allow(dead_code)]

use std::collections::HashSet;
use std::path::PathBuf;

use chatac_core::corpus::{parse_oasst, turn_starts};
use chatac_core::{Conversation, PrefixInstance};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Path to a real OASST export, taken from the environment.
pub fn oasst_path(var: &str) -> Option<PathBuf> {
    std::env::var_os(var).map(PathBuf::from).filter(|p| p.is_file())
}

pub const OASST_TEST_ENV: &str = "CHAITEA_OASST_TEST";
pub const OASST_TRAIN_ENV: &str = "CHAITEA_OASST_TRAIN";

const TOPICS: &[&str] = &[
    "machine learning",
    "the french revolution",
    "black holes",
    "climate change",
    "python decorators",
    "healthy breakfast ideas",
    "the stock market",
    "quantum computing",
    "medieval castles",
    "learning to play guitar",
    "renewable energy",
    "the roman empire",
    "sourdough bread",
    "electric cars",
    "photosynthesis",
];
const VERBS: &[&str] = &["write", "fix", "build", "clean", "improve", "learn", "plan", "start", "explain", "test"];
const NOUNS: &[&str] = &["essay", "garden", "website", "budget", "resume", "bike", "recipe", "script", "speech", "room"];
const ADJS: &[&str] = &["simple", "good", "short", "cheap", "fast", "better", "small", "new"];

const PROMPTS: &[&str] = &[
    "can you tell me more about {t}",
    "how do I {v} a {a} {n}",
    "what is the best way to {v} my {n}",
    "please explain {t} in simple terms",
    "write a short poem about {t}",
    "why is {t} so important",
    "could you give me an example of {t}",
    "I want to {v} a {n}, where should I start?",
    "what are the pros and cons of {t}",
    "summarize the history of {t} in a few sentences",
    "is it hard to {v} a {a} {n}?",
];
const FOLLOW_UPS: &[&str] = &[
    "thank you, that was very helpful",
    "can you tell me more about that",
    "and what about {t}?",
    "could you make it shorter",
    "that makes sense, thanks",
    "can you give me another example",
    "how long does it take to {v} a {n}?",
    "ok, and how do I {v} my {n}?",
    "thanks",
    "why?",
];
const REPLIES: &[&str] = &[
    "Sure! {t} is a broad topic, so let me start with the basics.",
    "Here is a simple way to {v} a {n}: start small and keep it {a}.",
    "Good question. Most people find that {t} is easier than it looks.",
    "There are several options. The {a} one is usually the best place to start.",
    "In short, {t} matters because it shapes how we live and work.",
];

fn fill(template: &str, rng: &mut ChaCha8Rng) -> String {
    let mut s = template.to_string();
    for (slot, words) in [("{t}", TOPICS), ("{v}", VERBS), ("{n}", NOUNS), ("{a}", ADJS)] {
        while s.contains(slot) {
            s = s.replacen(slot, words.choose(rng).unwrap(), 1);
        }
    }
    s
}

struct Emitter {
    tree: usize,
    next: usize,
    lines: Vec<String>,
}

impl Emitter {
    fn emit(&mut self, parent: Option<&str>, role: &str, text: &str, lang: &str) -> String {
        let id = format!("t{:05}-m{:03}", self.tree, self.next);
        self.next += 1;
        let rec = json!({"message_id": id, "parent_id": parent, "role": role, "text": text, "lang": lang});
        self.lines.push(rec.to_string());
        id
    }
}

fn grow(e: &mut Emitter, parent: &str, depth: usize, rng: &mut ChaCha8Rng) {
    let replies = if rng.random_bool(0.3) { 2 } else { 1 };
    for _ in 0..replies {
        let reply = fill(REPLIES.choose(rng).unwrap(), rng);
        let a = e.emit(Some(parent), "assistant", &reply, "en");
        if depth < 3 && rng.random_bool(0.55) {
            let follow = if rng.random_bool(0.2) { 2 } else { 1 };
            for _ in 0..follow {
                let text = fill(FOLLOW_UPS.choose(rng).unwrap(), rng);
                let p = e.emit(Some(&a), "prompter", &text, "en");
                grow(e, &p, depth + 1, rng);
            }
        }
    }
}

/// Flat OASST message records for `trees` English trees plus a few
/// non-English ones that curation must drop.
pub fn synthetic_oasst_jsonl(seed: u64, trees: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = Emitter { tree: 0, next: 0, lines: Vec::new() };
    for t in 0..trees {
        e.tree = t;
        e.next = 0;
        let text = fill(PROMPTS.choose(&mut rng).unwrap(), &mut rng);
        let root = e.emit(None, "prompter", &text, "en");
        grow(&mut e, &root, 1, &mut rng);
    }
    for t in trees..trees + trees / 20 {
        e.tree = t;
        e.next = 0;
        let root = e.emit(None, "prompter", "wie spät ist es", "de");
        e.emit(Some(&root), "assistant", "es ist drei uhr", "de");
    }
    let mut s = e.lines.join("\n");
    s.push('\n');
    s
}

pub fn synthetic_corpus(seed: u64, trees: usize) -> Vec<Conversation> {
    parse_oasst(synthetic_oasst_jsonl(seed, trees).as_bytes()).expect("synthetic corpus parses").conversations
}

/// Turn starts of at least `min_len` characters whose starting context is
/// unique, so that the turn is determined by its context alone.
pub fn distinct_turns(convs: &[Conversation], min_len: usize, limit: usize) -> Vec<PrefixInstance> {
    let mut seen = HashSet::new();
    convs
        .iter()
        .flat_map(turn_starts)
        .filter(|i| i.full_turn_len >= min_len && seen.insert(i.context.clone()))
        .take(limit)
        .collect()
}
