//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use memapo_core::gateway::{
    ChatRequest, ChatResult, EmbedResult, Gateway, GatewayError, HashEmbedder, ModelProvider,
    ScriptFixture, ScriptedProvider, ScriptedReply, Usage,
};
use memapo_core::gateway::{estimate_tokens, Matcher};
use memapo_core::index::Embedding;
use memapo_core::memory::Case;
use memapo_core::prompts::PromptLibrary;
use memapo_core::reflection::QueryItem;
use memapo_core::update::MemoryDelta;
use memapo_core::{Engine, EngineParams, Memory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Owns what an [`Engine`] borrows.
pub struct Rig {
    pub gateway: Gateway,
    pub prompts: PromptLibrary,
    pub params: EngineParams,
}

impl Rig {
    pub fn new(provider: Arc<dyn ModelProvider>, params: EngineParams) -> Self {
        Self {
            gateway: Gateway::new(provider, "chat-model", "embed-model"),
            prompts: PromptLibrary::builtin(),
            params,
        }
    }

    pub fn engine(&self) -> Engine<'_> {
        Engine::new(&self.gateway, &self.prompts, &self.params)
    }
}

pub fn axis(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

pub fn mix(dim: usize, parts: &[(usize, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for (i, w) in parts {
        v[*i] = *w;
    }
    v
}

pub fn emb(v: Vec<f64>) -> Embedding {
    Embedding::new(v).unwrap()
}

pub fn item(id: &str, question: &str, gold: &str) -> QueryItem {
    QueryItem::new(id, question, gold, None).unwrap()
}

pub fn answer(letter: &str) -> String {
    format!("Reasoning steps.\nAnswer: ({letter})")
}

pub fn reflect_reply(lesson: &str) -> String {
    json!({"analysis": "went wrong", "reflection": lesson}).to_string()
}

pub fn create_reply(when: &str, strategy: &str) -> String {
    json!({"when_to_use": when, "strategy": strategy}).to_string()
}

pub fn summary_reply(rule: &str) -> String {
    json!({"root_cause": "cause", "reflection": rule}).to_string()
}

pub fn pattern_update_reply(updated: bool, pattern: &str) -> String {
    json!({"analysis": "a", "updated": updated.to_string(), "pattern": pattern}).to_string()
}

pub fn merge_reply(groups: &[(&[&str], &str, &str)]) -> String {
    let groups: Vec<_> = groups
        .iter()
        .map(|(ids, w, s)| {
            json!({"template_ids": ids, "reason": "overlap", "merged_when_to_use": w, "merged_strategy": s})
        })
        .collect();
    json!({ "merge_groups": groups }).to_string()
}

/// Needle matching only the Answer prompt for `question`.
pub fn answer_needle(question: &str) -> String {
    format!("<QUESTION>\n{question}\n</QUESTION>\n\n<OUTPUT_FORMAT>")
}

pub fn filler_memory(n: usize, dim: usize, axis_i: usize) -> Memory {
    let mut m = Memory::new();
    for i in 0..n {
        let t = m
            .state
            .create_template(
                &format!("filler scenario {i}"),
                &format!("filler strategy {i}"),
                Case::new(format!("filler question {i}"), answer("A")),
            )
            .unwrap();
        m.insert_template(t, emb(axis(dim, axis_i))).unwrap();
    }
    m
}

// ---------------------------------------------------------------------------
// Randomized model stand-in for fuzzing.

/// Answers every meta-prompt with a random but well-formed reply, chosen by
/// a seeded RNG. Answer prompts are right with probability `p_correct`
/// (gold is always A).
pub struct SimProvider {
    rng: Mutex<ChaCha8Rng>,
    embedder: HashEmbedder,
    pub p_correct: f64,
    pub p_empty_merge: f64,
    pub merge_plans: Mutex<Vec<bool>>,
}

const VOCAB: &[&str] = &[
    "geometry", "shapes", "polygon", "angles", "logic", "deduction", "dates", "calendar",
    "arithmetic", "ratios", "probability", "ordering", "navigation", "boolean", "sports",
];

impl SimProvider {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            embedder: HashEmbedder::new(24),
            p_correct: 0.6,
            p_empty_merge: 0.25,
            merge_plans: Mutex::new(Vec::new()),
        }
    }

    fn phrase(rng: &mut ChaCha8Rng) -> String {
        let n = rng.random_range(1..=3);
        (0..n)
            .map(|_| VOCAB[rng.random_range(0..VOCAB.len())])
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Ids of the `[t-N]` blocks in a rendered templates list.
pub fn listed_ids(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|l| l.strip_prefix('['))
        .filter_map(|l| l.split_once(']'))
        .map(|(id, _)| id.to_string())
        .filter(|id| id.starts_with("t-"))
        .collect()
}

fn section<'a>(prompt: &'a str, open: &str, close: &str) -> &'a str {
    let start = prompt.find(open).map(|i| i + open.len()).unwrap_or(0);
    let end = prompt[start..].find(close).map(|i| start + i).unwrap_or(prompt.len());
    &prompt[start..end]
}

impl ModelProvider for SimProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResult, GatewayError> {
        let prompt = &request.messages[0].content;
        let mut rng = self.rng.lock().unwrap();
        let first = prompt.lines().next().unwrap_or("");
        let reply = if first.starts_with("You are an expert assistant for question answering") {
            if rng.random_bool(self.p_correct) {
                answer("A")
            } else if rng.random_bool(0.2) {
                "I am not sure.".to_string()
            } else {
                answer(["B", "C", "D"][rng.random_range(0..3)])
            }
        } else if first.starts_with("You are a precise self-reflection") {
            reflect_reply(&format!("check {}", Self::phrase(&mut rng)))
        } else if first.starts_with("You are an expert at abstracting") {
            create_reply(&Self::phrase(&mut rng), &format!("steps for {}", Self::phrase(&mut rng)))
        } else if first.starts_with("You are an expert template manager") {
            let ids = listed_ids(section(prompt, "<RECALLED_TEMPLATES>", "</RECALLED_TEMPLATES>"));
            let mut actions = Vec::new();
            for id in ids {
                let a = match rng.random_range(0..4) {
                    0 => json!({"action": "none", "template_id": id}),
                    1 => json!({"action": "delete", "template_id": id}),
                    _ => json!({
                        "action": "update",
                        "template_id": id,
                        "when_to_use": if rng.random_bool(0.5) { json!(Self::phrase(&mut rng)) } else { json!(null) },
                        "strategy": format!("refined {}", Self::phrase(&mut rng)),
                    }),
                };
                actions.push(a);
            }
            let adds = rng.random_range(0..=2);
            for _ in 0..adds {
                actions.push(json!({"action": "add", "when_to_use": Self::phrase(&mut rng), "strategy": "new steps"}));
            }
            json!({ "actions": actions }).to_string()
        } else if first.starts_with("You are an expert template librarian") {
            let mut ids = listed_ids(section(prompt, "<ALL_TEMPLATES>", "</ALL_TEMPLATES>"));
            let empty = rng.random_bool(self.p_empty_merge);
            self.merge_plans.lock().unwrap().push(empty);
            if empty {
                r#"{"merge_groups": []}"#.to_string()
            } else {
                // shuffle, then carve a few groups; the first is always valid
                for i in (1..ids.len()).rev() {
                    let j = rng.random_range(0..=i);
                    ids.swap(i, j);
                }
                let mut groups = Vec::new();
                let mut at = 0;
                let n_groups = rng.random_range(1..=3);
                for g in 0..n_groups {
                    let size = rng.random_range(2..=3);
                    if at + size > ids.len() {
                        break;
                    }
                    let mut members: Vec<String> = ids[at..at + size].to_vec();
                    at += size;
                    if g > 0 && rng.random_bool(0.3) {
                        // noise: an unknown id or an overlap with the first group
                        if rng.random_bool(0.5) {
                            members.push("t-999999".into());
                        } else {
                            members.push(ids[0].clone());
                        }
                    }
                    groups.push(json!({
                        "template_ids": members,
                        "reason": "overlap",
                        "merged_when_to_use": Self::phrase(&mut rng),
                        "merged_strategy": "merged steps",
                    }));
                }
                json!({ "merge_groups": groups }).to_string()
            }
        } else if first.starts_with("You are an expert error-pattern analyst.") {
            if prompt.contains("<CURRENT_PATTERN>") {
                let updated = rng.random_bool(0.5);
                let current = section(prompt, "<CURRENT_PATTERN>\n", "\n</CURRENT_PATTERN>").to_string();
                let pattern = if updated {
                    format!("avoid {}", Self::phrase(&mut rng))
                } else {
                    current
                };
                pattern_update_reply(updated, &pattern)
            } else {
                summary_reply(&format!("avoid {}", Self::phrase(&mut rng)))
            }
        } else {
            return Err(GatewayError::InvalidRequest(format!("unclassified prompt: {first}")));
        };
        let usage = Usage::estimate(prompt, &reply);
        Ok(ChatResult { text: reply, usage })
    }

    fn embed(&self, _model: &str, texts: &[String]) -> Result<EmbedResult, GatewayError> {
        let vectors = texts
            .iter()
            .map(|t| Embedding::new(self.embedder.embed(t)).map_err(|e| GatewayError::MalformedResponse(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EmbedResult {
            vectors,
            usage: Usage::new(texts.iter().map(|t| estimate_tokens(t)).sum(), 0),
        })
    }

    fn parallel_safe(&self) -> bool {
        false
    }
}

// ---------------------------------------------------------------------------
// The twelve-item state-machine scenario.

pub const SCENARIO_DIM: usize = 8;
pub const FILLERS: usize = 27;

/// Question, gold, and the axis mix of its embedding, in visit order.
pub fn scenario_items() -> Vec<(QueryItem, Vec<f64>)> {
    let d = SCENARIO_DIM;
    let q = |n: usize, gold: &str, v: Vec<f64>| (item(&format!("sm:{n}"), &format!("Q{n} scenario question"), gold), v);
    vec![
        q(1, "A", axis(d, 0)),
        q(2, "A", axis(d, 0)),
        q(3, "A", axis(d, 0)),
        q(4, "A", axis(d, 0)),
        q(5, "B", axis(d, 1)),
        q(6, "B", axis(d, 0)),
        q(7, "C", axis(d, 3)),
        q(8, "C", axis(d, 3)),
        q(9, "C", axis(d, 3)),
        q(10, "D", axis(d, 5)),
        q(11, "D", axis(d, 6)),
        q(12, "B", axis(d, 2)),
    ]
}

pub fn scenario_provider() -> ScriptedProvider {
    let d = SCENARIO_DIM;
    let mut embeddings: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (it, v) in scenario_items() {
        embeddings.insert(it.prompt_text(), v);
    }
    for i in 0..FILLERS {
        embeddings.insert(format!("filler scenario {i}"), axis(d, 7));
    }
    for (text, v) in [
        ("W-alpha: geometry questions", axis(d, 0)),
        ("W-beta: fallback scenario", axis(d, 1)),
        ("W-gamma: option elimination", axis(d, 2)),
        ("W-gamma-2: option elimination with tables", axis(d, 2)),
        ("W-delta: date arithmetic", axis(d, 3)),
        ("W-eps: boolean expressions", axis(d, 6)),
        ("W-filler: merged fillers", axis(d, 7)),
        ("R-one: re-read every constraint", axis(d, 4)),
        ("R-one-refined: re-read every constraint and unit", axis(d, 4)),
        ("R-two: check units", mix(d, &[(4, 0.9), (5, 0.435_889_894_354_067_4)])),
        ("R-three: track negations", mix(d, &[(4, 0.5), (6, 0.866_025_403_784_438_6)])),
    ] {
        embeddings.insert(text.into(), v);
    }

    let m = |contains: &str, reply: String| Matcher {
        contains: contains.into(),
        reply,
        usage: None,
    };
    let mut matchers = vec![
        // verification of the rejected candidate always fails
        m("STRATEGY: S-bad", answer("Z")),
        // verification of the re-indexed candidate passes (Q6 and Q12 both gold B)
        m("WHEN TO USE: W-gamma-2: option elimination with tables", answer("B")),
        // Q12 succeeds once it has reflected
        m("lesson twelve\n</REFLECTIONS>", answer("B")),
    ];
    for (it, _) in scenario_items() {
        let n: usize = it.id.trim_start_matches("sm:").parse().unwrap();
        let reply = match n {
            7..=9 => answer("A"),
            12 => answer("A"),
            _ => answer(&it.gold),
        };
        matchers.push(m(&answer_needle(&it.prompt_text()), reply));
    }

    let mut chat: Vec<ScriptedReply> = Vec::new();
    let mut push = |s: String| chat.push(ScriptedReply::text(s));
    // 1: empty recall
    push(create_reply("W-alpha: geometry questions", "S-alpha"));
    // 2: none
    push(json!({"actions": [{"action": "none", "template_id": "t-28"}]}).to_string());
    // 3: update, verification passes
    push(json!({"actions": [{"action": "update", "template_id": "t-28", "when_to_use": null, "strategy": "S-alpha-2"}]}).to_string());
    // 4: update, verification fails, falls back to create
    push(json!({"actions": [{"action": "update", "template_id": "t-28", "strategy": "S-bad"}]}).to_string());
    push(create_reply("W-beta: fallback scenario", "S-beta"));
    // 5: delete
    push(json!({"actions": [{"action": "delete", "template_id": "t-29"}]}).to_string());
    // 6: none + add
    push(json!({"actions": [
        {"action": "none", "template_id": "t-28"},
        {"action": "add", "when_to_use": "W-gamma: option elimination", "strategy": "S-gamma"}
    ]}).to_string());
    // 7: failure, EPM add
    for l in ["lesson 7a", "lesson 7b", "lesson 7c"] {
        push(reflect_reply(l));
    }
    push(summary_reply("R-one: re-read every constraint"));
    // 8: failure, refine above threshold
    for l in ["lesson 8a", "lesson 8b", "lesson 8c"] {
        push(reflect_reply(l));
    }
    push(summary_reply("R-two: check units"));
    push(pattern_update_reply(true, "R-one-refined: re-read every constraint and unit"));
    // 9: failure, below threshold
    for l in ["lesson 9a", "lesson 9b", "lesson 9c"] {
        push(reflect_reply(l));
    }
    push(summary_reply("R-three: track negations"));
    // 10: create, CTM reaches 30
    push(create_reply("W-delta: date arithmetic", "S-delta"));
    // 11: create, CTM 31, consolidation back to 30
    push(create_reply("W-eps: boolean expressions", "S-eps"));
    push(merge_reply(&[(&["t-1", "t-2"], "W-filler: merged fillers", "S-filler")]));
    // 12: success after one reflection, index text update passes verification
    push(reflect_reply("lesson twelve"));
    push(json!({"actions": [{"action": "update", "template_id": "t-30", "when_to_use": "W-gamma-2: option elimination with tables", "strategy": null}]}).to_string());

    ScriptedProvider::from_fixture(ScriptFixture {
        chat,
        matchers,
        embeddings,
        hash_embedding_dim: None,
    })
}

pub fn scenario_memory() -> Memory {
    filler_memory(FILLERS, SCENARIO_DIM, 7)
}

/// Runs the scenario; returns final memory and every step's delta.
pub fn run_scenario(rig: &Rig) -> (Memory, Vec<Option<MemoryDelta>>) {
    let mut trainer = memapo_core::harness::Trainer::new(rig.engine(), scenario_memory());
    let mut deltas = Vec::new();
    for (it, _) in scenario_items() {
        let step = trainer.step_item("sm", &it);
        assert!(step.record.error.is_none(), "{}: {:?}", it.id, step.record.error);
        deltas.push(step.delta);
    }
    let (memory, _) = trainer.finish(0.0);
    (memory, deltas)
}
