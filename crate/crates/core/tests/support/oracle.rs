//! Independent reference implementations and random-input generators.

use std::cmp::Ordering;

use memapo_core::memory::{BadCase, Case};
use memapo_core::Memory;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

use super::emb;

/// Brute-force top-k: score all, keep `>= theta`, order by score desc then
/// id asc, take `k`.
pub fn brute_top_k(entries: &[(String, Vec<f64>)], query: &[f64], k: usize, theta: f64) -> Vec<(String, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut scored: Vec<(String, f64)> = entries
        .iter()
        .map(|(id, v)| {
            let d: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
            (id.clone(), (d / (norm(v) * qn)).clamp(-1.0, 1.0))
        })
        .filter(|(_, s)| *s >= theta)
        .collect();
    scored.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap() {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    scored.truncate(k);
    scored
}

fn random_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

pub struct IndexCase {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f64>)>,
}

/// Random index contents. Some vectors are exact copies or scalings of
/// others so score ties are common.
pub fn random_index<R: Rng>(rng: &mut R, dim: usize, max_entries: usize) -> IndexCase {
    let n = rng.random_range(0..=max_entries);
    let mut entries: Vec<(String, Vec<f64>)> = Vec::with_capacity(n);
    for i in 0..n {
        let v = if i > 0 && rng.random_bool(0.15) {
            let (_, src) = &entries[rng.random_range(0..i)];
            let scale = [1.0, 2.0, 0.5][rng.random_range(0..3)];
            src.iter().map(|x| x * scale).collect()
        } else {
            random_vector(rng, dim)
        };
        entries.push((format!("t-{}", i + 1), v));
    }
    IndexCase { dim, entries }
}

pub fn random_query<R: Rng>(rng: &mut R, case: &IndexCase) -> Vec<f64> {
    if !case.entries.is_empty() && rng.random_bool(0.2) {
        case.entries[rng.random_range(0..case.entries.len())].1.clone()
    } else {
        random_vector(rng, case.dim)
    }
}

/// A TemplateUpdate reply over `recalled` and whether it should be accepted.
pub fn random_plan<R: Rng>(rng: &mut R, recalled: &[String]) -> (String, bool) {
    let mut targets: Vec<String> = recalled.to_vec();
    let mut valid = true;
    match rng.random_range(0..4) {
        0 => {}
        1 if !targets.is_empty() => {
            let i = rng.random_range(0..targets.len());
            targets.push(targets[i].clone());
            valid = false;
        }
        2 if !targets.is_empty() => {
            targets.remove(rng.random_range(0..targets.len()));
            valid = false;
        }
        _ => {
            targets.push(format!("t-{}", 1000 + rng.random_range(0..1000)));
            valid = false;
        }
    }
    let mut actions: Vec<Value> = targets
        .into_iter()
        .map(|id| match rng.random_range(0..3) {
            0 => json!({"action": "none", "template_id": id}),
            1 => json!({"action": "delete", "template_id": id, "when_to_use": null, "strategy": null}),
            _ => json!({"action": "update", "template_id": id, "strategy": "revised steps"}),
        })
        .collect();
    for _ in 0..rng.random_range(0..=2) {
        actions.push(json!({"action": "add", "when_to_use": "new situation", "strategy": "new steps"}));
    }
    actions.shuffle(rng);
    (json!({ "actions": actions }).to_string(), valid)
}

fn word<R: Rng>(rng: &mut R) -> String {
    const W: &[&str] = &["alpha", "beta", "gamma", "delta", "ünïcode", "tab\there", "quote\"d", "line\nbreak"];
    format!("{} {}", W[rng.random_range(0..W.len())], rng.random_range(0..10_000))
}

/// Random but valid memory with vectors whose bit patterns exercise
/// subnormals, negative zero and full-precision fractions.
pub fn random_memory<R: Rng>(rng: &mut R) -> Memory {
    let dim = rng.random_range(1..=16);
    let mut m = Memory::new();
    m.state.step = rng.random_range(0..1000);
    let vector = |rng: &mut R| {
        let mut v: Vec<f64> = (0..dim)
            .map(|_| match rng.random_range(0..6) {
                0 => f64::from_bits(rng.random_range(1..1u64 << 52)),
                1 => -0.0,
                2 => rng.random_range(-1e150..1e150),
                _ => rng.random::<f64>() - 0.5,
            })
            .collect();
        v[0] = 1.0 + rng.random::<f64>();
        emb(v)
    };
    for _ in 0..rng.random_range(0..8) {
        if rng.random_bool(0.2) {
            // burn an id so the counters skip numbers
            m.state.next_template_id += 1;
        }
        let mut t = m
            .state
            .create_template(&word(rng), &word(rng), Case::new(word(rng), word(rng)))
            .unwrap();
        for _ in 0..rng.random_range(0..5) {
            t.append_case(Case::new(word(rng), word(rng)), m.state.step, Default::default())
                .unwrap();
        }
        let v = vector(rng);
        m.insert_template(t, v).unwrap();
    }
    for _ in 0..rng.random_range(0..5) {
        let bad = || BadCase {
            question: "q".into(),
            gold_answer: "B".into(),
            wrong_answer: "A".into(),
            reflection: String::new(),
        };
        let mut p = m.state.create_pattern(&word(rng), bad()).unwrap();
        for _ in 0..rng.random_range(0..3) {
            p.bad_cases.push(BadCase {
                question: word(rng),
                ..bad()
            });
        }
        let v = vector(rng);
        m.insert_pattern(p, v).unwrap();
    }
    m
}
