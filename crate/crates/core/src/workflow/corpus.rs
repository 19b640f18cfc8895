//! Seeded synthetic corpus: tasks rendered from hidden capability
//! signatures, each with successful and failing workflow programs.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    score_text, Capability, Domain, Operator, Signature, Split, TaskRecord, Tokenizer, WorkflowRecord,
    KEYWORDS, LABELS, OPENERS,
};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::FORMAT_VERSION;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Training tasks for each of the three training domains.
    pub tasks_per_domain: usize,
    pub workflows_per_task: usize,
    /// Held-out tasks for each training domain.
    pub heldout_per_domain: usize,
    /// Held-out tasks of the domain never seen in training.
    pub heldout_unseen_tasks: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            tasks_per_domain: 300,
            workflows_per_task: 6,
            heldout_per_domain: 60,
            heldout_unseen_tasks: 60,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workflows_per_task < 2 {
            return Err(Error::Config(format!(
                "workflows_per_task = {} cannot hold both a success and a failure",
                self.workflows_per_task
            )));
        }
        if self.workflows_per_task > 64 {
            return Err(Error::Config("workflows_per_task must be at most 64".into()));
        }
        if self.tasks_per_domain == 0 {
            return Err(Error::Config("tasks_per_domain must be positive".into()));
        }
        Ok(())
    }

    /// Successes per task; the rest are failures.
    pub fn successes_per_task(&self) -> usize {
        (self.workflows_per_task / 3).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub train_tasks: usize,
    pub heldout_tasks: usize,
    pub train_workflows: usize,
    pub heldout_workflows: usize,
    pub tasks_per_domain: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: CorpusConfig,
    pub vocab_size: usize,
    pub vocabulary: Vec<String>,
    pub counts: CorpusCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub train: Vec<TaskRecord>,
    pub heldout: Vec<TaskRecord>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[TaskRecord] {
        match split {
            Split::Train => &self.train,
            Split::Heldout => &self.heldout,
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(TRAIN_FILE), &self.train)?;
        write_jsonl(&dir.join(HELDOUT_FILE), &self.heldout)?;
        let mut manifest = serde_json::to_string_pretty(&self.manifest)?;
        manifest.push('\n');
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Input(format!("cannot read {}: {e}", manifest_path.display()))
        })?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Input(format!(
                "corpus format_version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let train = read_jsonl(&dir.join(TRAIN_FILE))?;
        let heldout = read_jsonl(&dir.join(HELDOUT_FILE))?;
        Ok(Self {
            manifest,
            train,
            heldout,
        })
    }
}

fn write_jsonl(path: &Path, tasks: &[TaskRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for t in tasks {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut tasks = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), n + 1)))?;
        tasks.push(task);
    }
    Ok(tasks)
}

fn capability_sets(domain: Domain) -> Vec<Vec<Capability>> {
    use Capability::*;
    match domain {
        Domain::Reasoning => vec![vec![MultiView], vec![Retrieve, MultiView]],
        Domain::Coding => vec![vec![TestRepair], vec![Retrieve, TestRepair]],
        Domain::Math => vec![vec![Verify], vec![MultiView, Verify], vec![Retrieve, Verify]],
        Domain::Science => vec![vec![Retrieve, MultiView, Verify]],
    }
}

/// Every distinct signature of a domain, shuffled.
fn shuffled_signatures(domain: Domain, rng: &mut ChaCha8Rng) -> Vec<Signature> {
    let mut all = Vec::new();
    for caps in capability_sets(domain) {
        for kw in KEYWORDS {
            for opener in OPENERS {
                all.push(Signature {
                    capabilities: caps.clone(),
                    keyword: kw.to_string(),
                    opener: opener.to_string(),
                });
            }
        }
    }
    all.shuffle(rng);
    all
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Variant {
    Success,
    /// Leaves out the domain's key operator.
    Shortcut,
    /// Moves the key operator to the front, breaking its precedence.
    Reorder,
    /// Names a different keyword everywhere.
    Corrupt,
}

// `{}` is replaced by the keyword.
const RETRIEVE_ARGS: [&str; 3] = ["{} sources", "sources on {}", "evidence about {}"];
const ANALYZE_ARGS: [&str; 3] = ["{} facts", "facts about {}", "{} evidence"];
const ANALYZE2_ARGS: [&str; 3] = ["{} views", "views on {}", "other views"];
const AGGREGATE_ARGS: [&str; 3] = ["all views", "merge views", "merge notes"];
const GENERATE_ARGS: [&str; 3] = ["{} answer", "answer for {}", "solve {}"];
const TEST_ARGS: [&str; 3] = ["unit cases", "edge cases", "{} cases"];
const REPAIR_ARGS: [&str; 3] = ["failing cases", "fix bugs", "fix {} bugs"];
const VERIFY_ARGS: [&str; 3] = ["final answer", "check result", "check {} steps"];

fn arg_choices(op: Operator, second_analyze: bool) -> &'static [&'static str; 3] {
    match op {
        Operator::Retrieve => &RETRIEVE_ARGS,
        Operator::Analyze if second_analyze => &ANALYZE2_ARGS,
        Operator::Analyze => &ANALYZE_ARGS,
        Operator::Aggregate => &AGGREGATE_ARGS,
        Operator::Generate => &GENERATE_ARGS,
        Operator::Test => &TEST_ARGS,
        Operator::Repair => &REPAIR_ARGS,
        Operator::Verify => &VERIFY_ARGS,
    }
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    keyword: &'a str,
    lines: Vec<String>,
}

impl Builder<'_> {
    fn push(&mut self, op: Operator, second_analyze: bool, deps: &[usize]) -> usize {
        let choices = arg_choices(op, second_analyze);
        let arg = choices[self.rng.random_range(0..choices.len())].replace("{}", self.keyword);
        let i = self.lines.len();
        let mut line = format!("{op}({arg}) -> {}", LABELS[i]);
        if !deps.is_empty() {
            let names: Vec<&str> = deps.iter().map(|&d| LABELS[d]).collect();
            line.push_str(" after ");
            line.push_str(&names.join(","));
        }
        self.lines.push(line);
        i
    }
}

fn render(sig: &Signature, domain: Domain, variant: Variant, rng: &mut ChaCha8Rng) -> String {
    let key = domain.key_operator();
    let keyword = if variant == Variant::Corrupt {
        let others: Vec<&str> = KEYWORDS.iter().copied().filter(|k| *k != sig.keyword).collect();
        others[rng.random_range(0..others.len())].to_string()
    } else {
        sig.keyword.clone()
    };
    let skip = (variant == Variant::Shortcut).then_some(key);
    let front = (variant == Variant::Reorder).then_some(key);
    let keep = |op: Operator| Some(op) != skip && Some(op) != front;
    let has = |c: Capability| sig.capabilities.contains(&c);

    let mut b = Builder {
        rng,
        keyword: &keyword,
        lines: Vec::new(),
    };
    let mut frontier: Vec<usize> = Vec::new();
    if let Some(op) = front {
        frontier = vec![b.push(op, false, &[])];
    }
    if has(Capability::Retrieve) && keep(Operator::Retrieve) {
        frontier = vec![b.push(Operator::Retrieve, false, &frontier)];
    }
    if has(Capability::MultiView) {
        let a1 = b.push(Operator::Analyze, false, &frontier);
        let a2 = b.push(Operator::Analyze, true, &frontier);
        frontier = vec![a1, a2];
        if keep(Operator::Aggregate) {
            frontier = vec![b.push(Operator::Aggregate, false, &frontier)];
        }
    }
    frontier = vec![b.push(Operator::Generate, false, &frontier)];
    if has(Capability::TestRepair) {
        if keep(Operator::Test) {
            frontier = vec![b.push(Operator::Test, false, &frontier)];
        }
        if keep(Operator::Repair) {
            frontier = vec![b.push(Operator::Repair, false, &frontier)];
        }
    }
    if has(Capability::Verify) && keep(Operator::Verify) {
        b.push(Operator::Verify, false, &frontier);
    }
    b.lines.join("\n")
}

/// Draws a text for `variant` not yet in `seen` when a few retries allow.
fn distinct(
    sig: &Signature,
    domain: Domain,
    variant: Variant,
    rng: &mut ChaCha8Rng,
    seen: &mut HashSet<String>,
) -> String {
    let mut text = render(sig, domain, variant, rng);
    for _ in 0..16 {
        if !seen.contains(&text) {
            break;
        }
        text = render(sig, domain, variant, rng);
    }
    seen.insert(text.clone());
    text
}

fn build_task(
    task_id: String,
    sig: Signature,
    domain: Domain,
    split: Split,
    config: &CorpusConfig,
    ordinal: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TaskRecord> {
    let n_success = config.successes_per_task();
    let n_fail = config.workflows_per_task - n_success;
    let mut variants = vec![Variant::Success; n_success];
    let tail = if ordinal % 2 == 0 { Variant::Reorder } else { Variant::Corrupt };
    for i in 0..n_fail {
        variants.push(if i + 1 == n_fail && n_fail >= 2 { tail } else { Variant::Shortcut });
    }
    let mut task = TaskRecord {
        task_id,
        question: sig.question(),
        domain,
        split,
        signature: sig,
        workflows: Vec::with_capacity(variants.len()),
    };
    let mut seen = HashSet::new();
    for v in variants {
        let text = distinct(&task.signature, domain, v, rng, &mut seen);
        let score = score_text(&task, &text);
        let expected = if v == Variant::Success { 1.0 } else { 0.0 };
        if score != expected {
            return Err(Error::Contract(format!(
                "generated {v:?} workflow for {} scored {score}:\n{text}",
                task.task_id
            )));
        }
        task.workflows.push(WorkflowRecord { text, score });
    }
    Ok(task)
}

/// Deterministic in `(seed, config)`. Training tasks cover the three
/// training domains; the held-out split adds fresh tasks of those domains
/// plus every task of the unseen domain. Questions are distinct across the
/// whole corpus while the signature space allows it.
pub fn generate_corpus(seed: u64, config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = substream(seed, Stream::Corpus);
    let train_domains = [Domain::Reasoning, Domain::Coding, Domain::Math];

    let mut plans: Vec<(Domain, Vec<Signature>, Vec<Signature>)> = Vec::new();
    for domain in Domain::ALL {
        let pool = shuffled_signatures(domain, &mut rng);
        let (n_train, n_held) = if train_domains.contains(&domain) {
            (config.tasks_per_domain, config.heldout_per_domain)
        } else {
            (0, config.heldout_unseen_tasks)
        };
        let mut it = pool.iter().cycle().cloned();
        let train: Vec<Signature> = it.by_ref().take(n_train).collect();
        let held: Vec<Signature> = it.take(n_held).collect();
        plans.push((domain, train, held));
    }

    let mut next_id = 0usize;
    let mut per_domain = BTreeMap::new();
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for split in [Split::Train, Split::Heldout] {
        for (domain, tr, he) in &plans {
            let sigs = if split == Split::Train { tr } else { he };
            for (i, sig) in sigs.iter().enumerate() {
                let task = build_task(format!("t{next_id:05}"), sig.clone(), *domain, split, config, i, &mut rng)?;
                next_id += 1;
                *per_domain.entry(domain.tag().to_string()).or_insert(0) += 1;
                match split {
                    Split::Train => train.push(task),
                    Split::Heldout => heldout.push(task),
                }
            }
        }
    }

    let tk = Tokenizer::new();
    let count_wf = |ts: &[TaskRecord]| ts.iter().map(|t| t.workflows.len()).sum();
    let manifest = CorpusManifest {
        format_version: FORMAT_VERSION,
        seed,
        config: config.clone(),
        vocab_size: tk.vocab_size(),
        vocabulary: tk.vocabulary().to_vec(),
        counts: CorpusCounts {
            train_tasks: train.len(),
            heldout_tasks: heldout.len(),
            train_workflows: count_wf(&train),
            heldout_workflows: count_wf(&heldout),
            tasks_per_domain: per_domain,
        },
    };
    Ok(Corpus {
        manifest,
        train,
        heldout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            tasks_per_domain: 20,
            workflows_per_task: 6,
            heldout_per_domain: 5,
            heldout_unseen_tasks: 5,
        }
    }

    #[test]
    fn rejects_single_workflow_tasks() {
        let cfg = CorpusConfig {
            workflows_per_task: 1,
            ..small()
        };
        assert!(matches!(generate_corpus(7, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn every_group_has_both_classes_and_consistent_scores() {
        let c = generate_corpus(3, &small()).unwrap();
        for t in c.train.iter().chain(&c.heldout) {
            assert!(t.successes().count() >= 1);
            assert!(t.failures().count() >= 1);
            for w in &t.workflows {
                assert_eq!(score_text(t, &w.text), w.score);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_unseen_domain_is_heldout_only() {
        let c = generate_corpus(5, &small()).unwrap();
        let train_ids: HashSet<_> = c.train.iter().map(|t| &t.task_id).collect();
        assert!(c.heldout.iter().all(|t| !train_ids.contains(&t.task_id)));
        assert!(c.train.iter().all(|t| t.domain != Domain::Science));
        assert_eq!(c.heldout.iter().filter(|t| t.domain == Domain::Science).count(), 5);
        let train_q: HashSet<_> = c.train.iter().map(|t| &t.question).collect();
        assert!(c.heldout.iter().all(|t| !train_q.contains(&t.question)));
    }

    #[test]
    fn two_workflows_per_task_give_one_of_each() {
        let cfg = CorpusConfig {
            workflows_per_task: 2,
            ..small()
        };
        let c = generate_corpus(1, &cfg).unwrap();
        assert!(c.train.iter().all(|t| t.successes().count() == 1 && t.failures().count() == 1));
    }

    #[test]
    fn corpus_words_are_in_vocabulary() {
        let tk = Tokenizer::new();
        let c = generate_corpus(11, &small()).unwrap();
        for t in c.train.iter().chain(&c.heldout) {
            assert!(!tk.tokenize(&t.question).contains(&tk.unk()), "{}", t.question);
            for w in &t.workflows {
                let ids = tk.tokenize(&w.text);
                assert!(!ids.contains(&tk.unk()), "{}", w.text);
                assert_eq!(tk.detokenize(&ids), w.text);
            }
        }
    }

    #[test]
    fn write_then_read_round_trips() {
        let c = generate_corpus(2, &small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write_dir(dir.path()).unwrap();
        let back = Corpus::read_dir(dir.path()).unwrap();
        assert_eq!(back, c);
    }
}
