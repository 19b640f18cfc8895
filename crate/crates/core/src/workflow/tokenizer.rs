//! Closed-vocabulary tokenizer for task questions and workflow programs.

use std::collections::HashMap;

use super::dsl::{join_lexemes, lex_line};
use super::{ARG_WORDS, KEYWORDS, LABELS, QUESTION_WORDS};
use crate::workflow::Operator;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const SEP: &str = "<sep>";
pub const EOS: &str = "<eos>";
pub const NL: &str = "<nl>";

#[derive(Clone, Debug)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    /// The fixed vocabulary, in manifest order: specials, punctuation,
    /// `after`, operators, labels, task keywords, argument words, question
    /// words. Duplicates keep their first position.
    pub fn new() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        let mut push = |t: &str| {
            if !index.contains_key(t) {
                index.insert(t.to_string(), tokens.len());
                tokens.push(t.to_string());
            }
        };
        for t in [PAD, UNK, BOS, SEP, EOS, NL] {
            push(t);
        }
        for t in super::dsl::PUNCT {
            push(t);
        }
        push("after");
        for op in Operator::ALL {
            push(op.name());
        }
        for group in [&LABELS[..], &KEYWORDS[..], &ARG_WORDS[..], &QUESTION_WORDS[..]] {
            for t in group {
                push(t);
            }
        }
        Self { tokens, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.index[UNK])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn sep(&self) -> usize {
        self.index[SEP]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    /// Lines become lexemes separated by the newline token; blank lines are
    /// dropped. Out-of-vocabulary words map to the unknown token.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for line in text.lines() {
            let lex = lex_line(line);
            if lex.is_empty() {
                continue;
            }
            if !out.is_empty() {
                out.push(self.index[NL]);
            }
            out.extend(lex.into_iter().map(|w| self.id(w)));
        }
        out
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.split(|&id| self.token(id) == NL)
            .map(|line| join_lexemes(line.iter().map(|&id| self.token(id))))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_on_in_vocabulary_text() {
        let tk = Tokenizer::new();
        let text = "generate(graph answer) -> a\ntest(unit cases) -> b after a\nrepair(b) -> c after b";
        let ids = tk.tokenize(text);
        assert!(!ids.contains(&tk.unk()));
        assert_eq!(tk.detokenize(&ids), text);
    }

    #[test]
    fn unknown_words_only_for_out_of_vocabulary() {
        let tk = Tokenizer::new();
        let ids = tk.tokenize("generate(zebra answer)");
        let unks: Vec<_> = ids.iter().filter(|&&i| i == tk.unk()).collect();
        assert_eq!(unks.len(), 1);
        assert_eq!(tk.detokenize(&ids), "generate(<unk> answer)");
    }

    #[test]
    fn vocabulary_matches_manifest_enumeration() {
        let tk = Tokenizer::new();
        let mut expected: Vec<&str> = vec![PAD, UNK, BOS, SEP, EOS, NL, "(", ")", ",", "->", "after"];
        expected.extend(Operator::ALL.iter().map(|o| o.name()));
        for group in [&LABELS[..], &KEYWORDS[..], &ARG_WORDS[..], &QUESTION_WORDS[..]] {
            for w in group {
                if !expected.contains(w) {
                    expected.push(w);
                }
            }
        }
        assert_eq!(tk.vocab_size(), expected.len());
        assert_eq!(tk.vocab_size(), super::super::VOCAB_SIZE);
        for (i, w) in expected.iter().enumerate() {
            assert_eq!(tk.id(w), i);
        }
    }
}
