//! Toy workflow domain: the operator DSL, a deterministic structural
//! success evaluator, the tokenizer, and a seeded corpus generator.

pub mod corpus;
pub mod dsl;
pub mod tokenizer;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use corpus::{generate_corpus, Corpus, CorpusConfig, CorpusManifest};
pub use dsl::{canonicalize, Invocation, Operator, ParseError, WorkflowProgram};
pub use tokenizer::Tokenizer;

pub const LABELS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];

pub const KEYWORDS: [&str; 40] = [
    "graph", "matrix", "prime", "string", "tree", "orbit", "cell", "market", "circuit", "enzyme",
    "river", "sorting", "parser", "vector", "climate", "protein", "lattice", "queue", "triangle",
    "budget", "planet", "fossil", "cache", "poem", "border", "reactor", "ledger", "glacier",
    "compiler", "election", "molecule", "bridge", "signal", "harvest", "theorem", "virus", "tensor",
    "canal", "socket", "comet",
];

pub const ARG_WORDS: [&str; 24] = [
    "sources", "on", "evidence", "about", "facts", "views", "other", "all", "merge", "answer",
    "for", "solve", "unit", "cases", "edge", "failing", "fix", "bugs", "final", "check", "result",
    "draft", "notes", "steps",
];

/// Question openers followed by the capability phrase words.
pub const QUESTION_WORDS: [&str; 14] = [
    "please", "now", "kindly", "task", "next", "quickly", "use", "sources", "compare", "views",
    "with", "tests", "check", "answer",
];

pub const OPENERS: [&str; 6] = ["please", "now", "kindly", "task", "next", "quickly"];

/// Documented vocabulary size of [`Tokenizer`]: 6 specials, 4 punctuation
/// lexemes, `after`, 7 operators, 8 labels, 40 keywords, 24 argument words
/// and the 10 question words not already present.
pub const VOCAB_SIZE: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "reasoning-like")]
    Reasoning,
    #[serde(rename = "coding-like")]
    Coding,
    #[serde(rename = "math-like")]
    Math,
    #[serde(rename = "held-out-science-like")]
    Science,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Reasoning, Domain::Coding, Domain::Math, Domain::Science];

    pub fn tag(self) -> &'static str {
        match self {
            Domain::Reasoning => "reasoning-like",
            Domain::Coding => "coding-like",
            Domain::Math => "math-like",
            Domain::Science => "held-out-science-like",
        }
    }

    /// Operator that the most common failure of this domain leaves out.
    pub fn key_operator(self) -> Operator {
        match self {
            Domain::Reasoning => Operator::Aggregate,
            Domain::Coding => Operator::Repair,
            Domain::Math | Domain::Science => Operator::Verify,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A reusable workflow factor a task may require.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Retrieve,
    MultiView,
    TestRepair,
    Verify,
}

impl Capability {
    /// Question phrase that renders this capability.
    pub fn phrase(self) -> &'static str {
        match self {
            Capability::Retrieve => "use sources",
            Capability::MultiView => "compare views",
            Capability::TestRepair => "with tests",
            Capability::Verify => "check answer",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            other => Err(format!("unknown split `{other}` (expected train or heldout)")),
        }
    }
}

/// Hidden generator record of what a task needs. Only the evaluator reads
/// it; training sees the rendered question text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub capabilities: Vec<Capability>,
    pub keyword: String,
    pub opener: String,
}

/// Structural requirements derived from a [`Signature`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Requirements {
    pub min_counts: BTreeMap<Operator, usize>,
    /// `(before, after)`: some `before` node must reach some `after` node.
    pub precedences: Vec<(Operator, Operator)>,
    pub keyword: String,
}

impl Signature {
    pub fn question(&self) -> String {
        let mut words = vec![self.opener.clone(), self.keyword.clone()];
        words.extend(self.capabilities.iter().map(|c| c.phrase().to_string()));
        words.join(" ")
    }

    pub fn requirements(&self) -> Requirements {
        let mut min_counts = BTreeMap::new();
        let mut precedences = Vec::new();
        min_counts.insert(Operator::Generate, 1);
        for cap in &self.capabilities {
            match cap {
                Capability::Retrieve => {
                    min_counts.insert(Operator::Retrieve, 1);
                    precedences.push((Operator::Retrieve, Operator::Generate));
                }
                Capability::MultiView => {
                    min_counts.insert(Operator::Analyze, 2);
                    min_counts.insert(Operator::Aggregate, 1);
                    precedences.push((Operator::Analyze, Operator::Aggregate));
                }
                Capability::TestRepair => {
                    min_counts.insert(Operator::Test, 1);
                    min_counts.insert(Operator::Repair, 1);
                    precedences.push((Operator::Generate, Operator::Test));
                    precedences.push((Operator::Test, Operator::Repair));
                }
                Capability::Verify => {
                    min_counts.insert(Operator::Verify, 1);
                    precedences.push((Operator::Generate, Operator::Verify));
                }
            }
        }
        Requirements {
            min_counts,
            precedences,
            keyword: self.keyword.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowRecord {
    pub text: String,
    pub score: f64,
}

impl WorkflowRecord {
    pub fn parse(&self) -> Result<WorkflowProgram, ParseError> {
        WorkflowProgram::parse(&self.text)
    }

    pub fn is_success(&self) -> bool {
        self.score >= 0.5
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub question: String,
    /// Metadata only; never a training input.
    pub domain: Domain,
    pub split: Split,
    pub signature: Signature,
    pub workflows: Vec<WorkflowRecord>,
}

impl TaskRecord {
    pub fn successes(&self) -> impl Iterator<Item = &WorkflowRecord> {
        self.workflows.iter().filter(|w| w.is_success())
    }

    pub fn failures(&self) -> impl Iterator<Item = &WorkflowRecord> {
        self.workflows.iter().filter(|w| !w.is_success())
    }
}

/// 1.0 iff the program meets the operator counts, every precedence, and
/// names the task keyword in some argument.
pub fn evaluate_workflow(task: &TaskRecord, program: &WorkflowProgram) -> f64 {
    if meets(&task.signature.requirements(), program) {
        1.0
    } else {
        0.0
    }
}

pub fn meets(req: &Requirements, program: &WorkflowProgram) -> bool {
    let invs = program.invocations();
    for (&op, &n) in &req.min_counts {
        if invs.iter().filter(|i| i.op == op).count() < n {
            return false;
        }
    }
    let reach = program.reachability();
    for &(before, after) in &req.precedences {
        let ok = (0..invs.len()).any(|i| {
            invs[i].op == before && (0..invs.len()).any(|j| invs[j].op == after && reach[i][j])
        });
        if !ok {
            return false;
        }
    }
    invs.iter().any(|i| i.arg_words().any(|w| w == req.keyword))
}

/// Score of raw workflow text; unparseable text scores 0.
pub fn score_text(task: &TaskRecord, text: &str) -> f64 {
    match WorkflowProgram::parse(text) {
        Ok(p) => evaluate_workflow(task, &p),
        Err(_) => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(caps: Vec<Capability>) -> TaskRecord {
        let signature = Signature {
            capabilities: caps,
            keyword: "graph".into(),
            opener: "please".into(),
        };
        TaskRecord {
            task_id: "t0".into(),
            question: signature.question(),
            domain: Domain::Math,
            split: Split::Train,
            signature,
            workflows: vec![],
        }
    }

    #[test]
    fn exact_signature_program_scores_one() {
        let t = task(vec![Capability::Verify]);
        let p = WorkflowProgram::parse("generate(graph answer) -> a\nverify(final answer) -> b after a").unwrap();
        assert_eq!(evaluate_workflow(&t, &p), 1.0);
    }

    #[test]
    fn missing_operator_scores_zero() {
        let t = task(vec![Capability::Verify]);
        let p = WorkflowProgram::parse("generate(graph answer)").unwrap();
        assert_eq!(evaluate_workflow(&t, &p), 0.0);
    }

    #[test]
    fn redundant_aggregate_keeps_success() {
        let t = task(vec![Capability::TestRepair]);
        let base = "generate(graph answer) -> a\ntest(unit cases) -> b after a\nrepair(fix bugs) -> c after b";
        assert_eq!(score_text(&t, base), 1.0);
        assert_eq!(score_text(&t, &format!("{base}\naggregate(all views) -> d after c")), 1.0);
        assert_eq!(score_text(&t, &format!("aggregate(all views)\n{base}")), 1.0);
    }

    #[test]
    fn wrong_order_or_keyword_fails() {
        let t = task(vec![Capability::TestRepair]);
        assert_eq!(
            score_text(&t, "repair(fix bugs) -> a\ngenerate(graph answer) -> b after a\ntest(unit cases) -> c after b"),
            0.0
        );
        assert_eq!(
            score_text(&t, "generate(tree answer) -> a\ntest(unit cases) -> b after a\nrepair(fix bugs) -> c after b"),
            0.0
        );
        assert_eq!(score_text(&t, "generate(graph answer"), 0.0);
    }

    #[test]
    fn question_renders_signature() {
        let t = task(vec![Capability::Retrieve, Capability::Verify]);
        assert_eq!(t.question, "please graph use sources check answer");
    }
}
