//! Line-oriented workflow DSL.
//!
//! ```text
//! retrieve(graph sources) -> a
//! analyze(graph facts) -> b after a
//! verify(b)
//! ```
//!
//! Each line is `op(argument) [-> label] [after label,label...]`. Edges come
//! from `after` clauses and from argument words that name a defined label.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Generate,
    Analyze,
    Retrieve,
    Verify,
    Repair,
    Test,
    Aggregate,
}

impl Operator {
    pub const ALL: [Operator; 7] = [
        Operator::Generate,
        Operator::Analyze,
        Operator::Retrieve,
        Operator::Verify,
        Operator::Repair,
        Operator::Test,
        Operator::Aggregate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Generate => "generate",
            Operator::Analyze => "analyze",
            Operator::Retrieve => "retrieve",
            Operator::Verify => "verify",
            Operator::Repair => "repair",
            Operator::Test => "test",
            Operator::Aggregate => "aggregate",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Operator::ALL.into_iter().find(|op| op.name() == s).ok_or(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("workflow has no invocations")]
    Empty,
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown operator `{name}`")]
    UnknownOperator { line: usize, name: String },
    #[error("line {line}: label `{label}` defined twice")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: `after` names undefined label `{label}`")]
    DanglingLabel { line: usize, label: String },
    #[error("workflow edges form a cycle")]
    Cycle,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Invocation {
    pub op: Operator,
    /// The customized operator prompt, in canonical spacing.
    pub arg: String,
    pub label: Option<String>,
    pub after: Vec<String>,
}

impl Invocation {
    pub fn arg_words(&self) -> impl Iterator<Item = &str> {
        lex_line(&self.arg).into_iter().filter(|w| !is_punct(w))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkflowProgram {
    invocations: Vec<Invocation>,
    /// `(from, to)` node indices, sorted and deduplicated.
    edges: Vec<(usize, usize)>,
}

pub(crate) const PUNCT: [&str; 4] = ["(", ")", ",", "->"];

pub(crate) fn is_punct(s: &str) -> bool {
    PUNCT.contains(&s)
}

/// Splits one line into words and the punctuation lexemes `( ) , ->`.
pub(crate) fn lex_line(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes = line.as_bytes();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let punct_len = match c {
            b'(' | b')' | b',' => 1,
            b'-' if bytes.get(i + 1) == Some(&b'>') => 2,
            _ => 0,
        };
        if punct_len > 0 || c.is_ascii_whitespace() {
            if let Some(s) = start.take() {
                out.push(&line[s..i]);
            }
            if punct_len > 0 {
                out.push(&line[i..i + punct_len]);
                i += punct_len;
                continue;
            }
        } else if start.is_none() {
            start = Some(i);
        }
        i += 1;
    }
    if let Some(s) = start {
        out.push(&line[s..]);
    }
    out
}

/// Joins lexemes of one line with canonical spacing: no space around `(`
/// and `,`, none before `)`, single spaces elsewhere.
pub(crate) fn join_lexemes<'a>(lexemes: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for lx in lexemes {
        let glue = match prev {
            None => true,
            Some(p) => p == "(" || p == "," || lx == "(" || lx == ")" || lx == ",",
        };
        if !glue {
            out.push(' ');
        }
        out.push_str(lx);
        prev = Some(lx);
    }
    out
}

/// Whitespace normalization: canonical spacing on each line, blank lines
/// dropped. Parsing then printing a valid program yields exactly this.
pub fn canonicalize(text: &str) -> String {
    text.lines()
        .map(|l| join_lexemes(lex_line(l)))
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_line(line_no: usize, lexemes: &[&str]) -> Result<Invocation, ParseError> {
    let syntax = |message: &str| ParseError::Syntax {
        line: line_no,
        message: message.to_string(),
    };
    let name = lexemes[0];
    if is_punct(name) {
        return Err(syntax("expected an operator name"));
    }
    let op = Operator::from_str(name).map_err(|_| ParseError::UnknownOperator {
        line: line_no,
        name: name.to_string(),
    })?;
    if lexemes.get(1) != Some(&"(") {
        return Err(syntax("expected `(` after operator"));
    }
    let close = lexemes
        .iter()
        .position(|&l| l == ")")
        .ok_or_else(|| syntax("unclosed argument"))?;
    let arg_lex = &lexemes[2..close];
    if arg_lex.iter().any(|&l| l == "(" || l == "->") {
        return Err(syntax("unexpected token inside argument"));
    }
    let arg = join_lexemes(arg_lex.iter().copied());

    let mut rest = &lexemes[close + 1..];
    let mut label = None;
    if rest.first() == Some(&"->") {
        match rest.get(1) {
            Some(l) if is_ident(l) && *l != "after" => label = Some(l.to_string()),
            _ => return Err(syntax("expected label after `->`")),
        }
        rest = &rest[2..];
    }
    let mut after = Vec::new();
    if rest.first() == Some(&"after") {
        rest = &rest[1..];
        loop {
            match rest.first() {
                Some(l) if is_ident(l) => after.push(l.to_string()),
                _ => return Err(syntax("expected label in `after` clause")),
            }
            rest = &rest[1..];
            if rest.first() == Some(&",") {
                rest = &rest[1..];
            } else {
                break;
            }
        }
    }
    if !rest.is_empty() {
        return Err(syntax(&format!("unexpected `{}`", rest[0])));
    }
    Ok(Invocation {
        op,
        arg,
        label,
        after,
    })
}

impl WorkflowProgram {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut invocations = Vec::new();
        let mut line_numbers = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let lexemes = lex_line(line);
            if lexemes.is_empty() {
                continue;
            }
            invocations.push(parse_line(n + 1, &lexemes)?);
            line_numbers.push(n + 1);
        }
        Self::from_invocations_at(invocations, &line_numbers)
    }

    pub fn from_invocations(invocations: Vec<Invocation>) -> Result<Self, ParseError> {
        let lines: Vec<usize> = (1..=invocations.len()).collect();
        Self::from_invocations_at(invocations, &lines)
    }

    fn from_invocations_at(invocations: Vec<Invocation>, lines: &[usize]) -> Result<Self, ParseError> {
        if invocations.is_empty() {
            return Err(ParseError::Empty);
        }
        let mut labels: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, inv) in invocations.iter().enumerate() {
            if let Some(l) = &inv.label {
                if labels.insert(l.as_str(), i).is_some() {
                    return Err(ParseError::DuplicateLabel {
                        line: lines[i],
                        label: l.clone(),
                    });
                }
            }
        }
        let mut edges = BTreeSet::new();
        for (j, inv) in invocations.iter().enumerate() {
            for l in &inv.after {
                let &i = labels.get(l.as_str()).ok_or_else(|| ParseError::DanglingLabel {
                    line: lines[j],
                    label: l.clone(),
                })?;
                edges.insert((i, j));
            }
            for w in inv.arg_words() {
                if let Some(&i) = labels.get(w) {
                    edges.insert((i, j));
                }
            }
        }
        let program = Self {
            edges: edges.into_iter().collect(),
            invocations,
        };
        if program.has_cycle() {
            return Err(ParseError::Cycle);
        }
        Ok(program)
    }

    fn has_cycle(&self) -> bool {
        let n = self.invocations.len();
        let mut indegree = vec![0usize; n];
        for &(_, j) in &self.edges {
            indegree[j] += 1;
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = ready.pop() {
            seen += 1;
            for &(a, b) in &self.edges {
                if a == i {
                    indegree[b] -= 1;
                    if indegree[b] == 0 {
                        ready.push(b);
                    }
                }
            }
        }
        seen != n
    }

    pub fn invocations(&self) -> &[Invocation] {
        &self.invocations
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.invocations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.invocations.is_empty()
    }

    /// `reach[i][j]`: a directed path of length ≥ 1 leads from node `i` to `j`.
    pub fn reachability(&self) -> Vec<Vec<bool>> {
        let n = self.invocations.len();
        let mut reach = vec![vec![false; n]; n];
        for &(i, j) in &self.edges {
            reach[i][j] = true;
        }
        for k in 0..n {
            for i in 0..n {
                if reach[i][k] {
                    for j in 0..n {
                        if reach[k][j] {
                            reach[i][j] = true;
                        }
                    }
                }
            }
        }
        reach
    }

    /// Canonical text form.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::with_capacity(self.invocations.len());
        for inv in &self.invocations {
            let mut line = format!("{}({})", inv.op, inv.arg);
            if let Some(l) = &inv.label {
                line.push_str(" -> ");
                line.push_str(l);
            }
            if !inv.after.is_empty() {
                line.push_str(" after ");
                line.push_str(&inv.after.join(","));
            }
            lines.push(line);
        }
        lines.join("\n")
    }
}

impl fmt::Display for WorkflowProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_node_program_with_reference_edge() {
        let p = WorkflowProgram::parse("analyze(goal) -> a\nverify(a)").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.edges(), &[(0, 1)]);
        assert_eq!(p.invocations()[0].label.as_deref(), Some("a"));
    }

    #[test]
    fn empty_text_is_rejected() {
        assert_eq!(WorkflowProgram::parse(""), Err(ParseError::Empty));
        assert_eq!(WorkflowProgram::parse("\n  \n"), Err(ParseError::Empty));
    }

    #[test]
    fn distinct_errors_for_unknown_operator_cycle_and_dangling_label() {
        assert!(matches!(
            WorkflowProgram::parse("summarize(x)"),
            Err(ParseError::UnknownOperator { line: 1, .. })
        ));
        assert_eq!(
            WorkflowProgram::parse("analyze(x) -> p after q\ngenerate(y) -> q after p"),
            Err(ParseError::Cycle)
        );
        assert!(matches!(
            WorkflowProgram::parse("analyze(x) -> p\nverify(y) after z"),
            Err(ParseError::DanglingLabel { line: 2, .. })
        ));
        assert!(matches!(
            WorkflowProgram::parse("analyze(x) -> p\nverify(y) -> p"),
            Err(ParseError::DuplicateLabel { .. })
        ));
        assert_eq!(WorkflowProgram::parse("verify(v) -> v"), Err(ParseError::Cycle));
    }

    #[test]
    fn syntax_errors() {
        for bad in ["generate x", "generate(x", "generate(x) ->", "generate(x) after", "generate(x) y", "(x)"] {
            assert!(
                matches!(WorkflowProgram::parse(bad), Err(ParseError::Syntax { .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn print_is_canonical_spacing() {
        let messy = "  generate(  graph   answer ) ->a\n\n test( a )->b   after   a , a\n";
        let p = WorkflowProgram::parse(messy).unwrap();
        assert_eq!(p.to_text(), "generate(graph answer) -> a\ntest(a) -> b after a,a");
        assert_eq!(p.to_text(), canonicalize(messy));
    }

    #[test]
    fn reachability_is_transitive() {
        let p = WorkflowProgram::parse("generate(x) -> a\ntest(a) -> b\nrepair(b)").unwrap();
        let r = p.reachability();
        assert!(r[0][1] && r[1][2] && r[0][2]);
        assert!(!r[2][0] && !r[0][0]);
    }
}
