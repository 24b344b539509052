//! Train and evaluate drivers.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::{info, warn};

use super::dataset::Dataset;
use super::report::{ItemRecord, MemoryStats, RunKind, RunReport};
use super::snapshot::MemorySnapshot;
use super::HarnessError;
use crate::engine::Engine;
use crate::reflection::{AttemptOutcome, QueryItem};
use crate::store::Memory;
use crate::update::MemoryDelta;

/// Source of wall time for reports.
pub trait Clock: Send + Sync {
    /// Seconds since some fixed origin.
    fn now_secs(&self) -> f64;
}

/// Real elapsed time.
#[derive(Debug, Clone, Copy)]
pub struct SystemClock(Instant);

impl SystemClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Always reads zero, so reports are reproducible byte for byte.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedClock;

impl Clock for FixedClock {
    fn now_secs(&self) -> f64 {
        0.0
    }
}

/// A training item tagged with its dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamItem {
    pub dataset: String,
    pub item: QueryItem,
}

/// Merges datasets and shuffles with `seed`. The order depends only on the
/// seed and the item ids, not on file or argument order.
pub fn training_order(datasets: &[Dataset], seed: u64) -> Vec<StreamItem> {
    let mut stream: Vec<StreamItem> = datasets
        .iter()
        .flat_map(|d| {
            d.items.iter().map(|i| StreamItem {
                dataset: d.name.clone(),
                item: i.clone(),
            })
        })
        .collect();
    stream.sort_by(|a, b| {
        (&a.item.id, &a.dataset, &a.item.question).cmp(&(&b.item.id, &b.dataset, &b.item.question))
    });
    stream.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    stream
}

/// Result of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemStep {
    pub record: ItemRecord,
    pub outcome: Option<AttemptOutcome>,
    pub delta: Option<MemoryDelta>,
}

/// Sequential training over a stream, one item at a time.
///
/// Each update stage runs on a copy of memory that is committed only if the
/// stage completes, so a provider failure mid-update leaves memory as it was.
pub struct Trainer<'a> {
    engine: Engine<'a>,
    memory: Memory,
    rng: ChaCha8Rng,
    records: Vec<ItemRecord>,
    merges: usize,
    verification_failures: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(engine: Engine<'a>, memory: Memory) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(engine.params.seed);
        // keep verification sampling apart from the visit-order stream
        rng.set_stream(1);
        Self {
            engine,
            memory,
            rng,
            records: Vec::new(),
            merges: 0,
            verification_failures: 0,
        }
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn step_item(&mut self, dataset: &str, item: &QueryItem) -> ItemStep {
        self.memory.state.step += 1;
        let mut record = ItemRecord {
            id: item.id.clone(),
            dataset: dataset.to_string(),
            predicted: None,
            gold: item.gold.clone(),
            correct: false,
            attempts_used: None,
            error: None,
        };
        let (outcome, recalled) = match self.engine.run_training_attempt(item, &self.memory) {
            Ok(r) => r,
            Err(e) => {
                warn!(item = %item.id, error = %e, "training attempt failed; item skipped");
                record.error = Some(e.to_string());
                self.records.push(record.clone());
                return ItemStep {
                    record,
                    outcome: None,
                    delta: None,
                };
            }
        };
        record.predicted = outcome.extracted_label.clone();
        record.correct = outcome.success;
        record.attempts_used = Some(outcome.attempts_used);

        let mut work = self.memory.clone();
        let result = if outcome.success {
            self.engine
                .update_after_success(item, &outcome, &recalled, &mut work, &mut self.rng)
        } else {
            self.engine.update_after_failure(item, &outcome, &mut work)
        };
        let delta = match result {
            Ok(delta) => {
                self.memory = work;
                self.merges += delta.merge_events.len();
                self.verification_failures += u64::from(delta.verification_failures);
                Some(delta)
            }
            Err(e) => {
                warn!(item = %item.id, error = %e, "memory update failed; memory left unchanged");
                record.error = Some(e.to_string());
                None
            }
        };
        self.records.push(record.clone());
        ItemStep {
            record,
            outcome: Some(outcome),
            delta,
        }
    }

    pub fn stats(&self) -> MemoryStats {
        MemoryStats {
            templates: self.memory.state.ctm.len(),
            patterns: self.memory.state.epm.len(),
            merges: self.merges,
            verification_failures: self.verification_failures,
        }
    }

    pub fn finish(self, wall_time_secs: f64) -> (Memory, RunReport) {
        let stats = self.stats();
        let report = RunReport::new(
            RunKind::Train,
            self.records,
            &self.engine.gateway.ledger(),
            stats,
            wall_time_secs,
        );
        (self.memory, report)
    }
}

/// Trains `initial` on the seeded shuffle of all `datasets`.
pub fn train(
    datasets: &[Dataset],
    engine: Engine<'_>,
    initial: Memory,
    clock: &dyn Clock,
) -> Result<(Memory, RunReport), HarnessError> {
    let start = clock.now_secs();
    let stream = training_order(datasets, engine.params.seed);
    if stream.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mut trainer = Trainer::new(engine, initial);
    for (n, s) in stream.iter().enumerate() {
        let step = trainer.step_item(&s.dataset, &s.item);
        info!(
            n = n + 1,
            of = stream.len(),
            item = %s.item.id,
            correct = step.record.correct,
            templates = trainer.memory().state.ctm.len(),
            patterns = trainer.memory().state.epm.len(),
            "trained item"
        );
    }
    Ok(trainer.finish(clock.now_secs() - start))
}

fn infer_record(engine: &Engine<'_>, memory: &Memory, dataset: &str, item: &QueryItem) -> ItemRecord {
    let mut record = ItemRecord {
        id: item.id.clone(),
        dataset: dataset.to_string(),
        predicted: None,
        gold: item.gold.clone(),
        correct: false,
        attempts_used: None,
        error: None,
    };
    match engine.run_inference(item, memory) {
        Ok(o) => {
            record.predicted = o.extracted_label;
            record.correct = o.success;
            record.attempts_used = Some(o.attempts_used);
        }
        Err(e) => {
            warn!(item = %item.id, error = %e, "inference failed; item counted incorrect");
            record.error = Some(e.to_string());
        }
    }
    record
}

/// Single-pass inference over every item against a frozen snapshot.
///
/// Items run concurrently up to the gateway's in-flight cap when the
/// provider allows it; records keep dataset order regardless.
pub fn evaluate(
    datasets: &[Dataset],
    snapshot: &MemorySnapshot,
    engine: Engine<'_>,
    clock: &dyn Clock,
) -> Result<RunReport, HarnessError> {
    let start = clock.now_secs();
    if snapshot.embedding_model != engine.gateway.embedding_model() {
        return Err(HarnessError::EmbeddingModelMismatch {
            snapshot: snapshot.embedding_model.clone(),
            config: engine.gateway.embedding_model().to_string(),
        });
    }
    let memory = snapshot.to_memory()?;
    let work: Vec<(&str, &QueryItem)> = datasets
        .iter()
        .flat_map(|d| d.items.iter().map(move |i| (d.name.as_str(), i)))
        .collect();
    if work.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }

    let workers = if engine.gateway.parallel_safe() {
        engine.gateway.max_inflight().clamp(1, work.len())
    } else {
        1
    };
    let records: Vec<ItemRecord> = if workers == 1 {
        work.iter()
            .map(|(ds, item)| infer_record(&engine, &memory, ds, item))
            .collect()
    } else {
        let slots: Mutex<Vec<Option<ItemRecord>>> = Mutex::new(vec![None; work.len()]);
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some((ds, item)) = work.get(i) else { break };
                    let r = infer_record(&engine, &memory, ds, item);
                    slots.lock().expect("slots lock poisoned")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("slots lock poisoned")
            .into_iter()
            .map(|r| r.expect("every item processed"))
            .collect()
    };

    Ok(RunReport::new(
        RunKind::Eval,
        records,
        &engine.gateway.ledger(),
        MemoryStats {
            templates: memory.state.ctm.len(),
            patterns: memory.state.epm.len(),
            merges: 0,
            verification_failures: 0,
        },
        clock.now_secs() - start,
    ))
}
