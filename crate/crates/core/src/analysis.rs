//! Routing diagnostics: basis usage, cross-domain usage similarity,
//! co-activation PMI and the routing-structure gap.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Generator;
use crate::trainer::RoutingLogEntry;
use crate::workflow::TaskRecord;
use crate::FORMAT_VERSION;

/// Parsed routing log plus the number of lines that failed to parse.
pub fn read_routing_log(path: &Path) -> Result<(Vec<RoutingLogEntry>, usize)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open routing log {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    let mut skipped = 0;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RoutingLogEntry>(&line) {
            Ok(e) => entries.push(e),
            Err(e) => {
                warn!("routing log line {}: {e}", i + 1);
                skipped += 1;
            }
        }
    }
    Ok((entries, skipped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetUsage {
    pub tasks: u64,
    /// Active-set memberships per basis.
    pub counts: Vec<u64>,
    /// `counts / tasks`; sums to the mean active-set size.
    pub frequency: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageStatistics {
    pub format_version: u32,
    pub num_bases: usize,
    pub skipped_lines: usize,
    pub datasets: BTreeMap<String, DatasetUsage>,
}

impl UsageStatistics {
    /// Share of all active-set slots held by the most used basis.
    pub fn max_slot_share(&self) -> f64 {
        let mut total = vec![0u64; self.num_bases];
        for d in self.datasets.values() {
            for (t, c) in total.iter_mut().zip(&d.counts) {
                *t += c;
            }
        }
        let sum: u64 = total.iter().sum();
        if sum == 0 {
            return 0.0;
        }
        *total.iter().max().unwrap() as f64 / sum as f64
    }
}

/// Per-domain counts of each basis's membership in active sets.
pub fn usage_histogram(entries: &[RoutingLogEntry], skipped_lines: usize) -> Result<UsageStatistics> {
    let Some(first) = entries.first() else {
        return Err(Error::Input("routing log has no entries".into()));
    };
    let k = first.alpha.len();
    let mut datasets: BTreeMap<String, (u64, Vec<u64>)> = BTreeMap::new();
    let mut skipped = skipped_lines;
    for e in entries {
        if e.alpha.len() != k || e.active_set.iter().any(|&b| b >= k) {
            warn!("routing entry for task {} does not match {k} bases; skipped", e.task_id);
            skipped += 1;
            continue;
        }
        let d = datasets.entry(e.domain.tag().to_string()).or_insert_with(|| (0, vec![0; k]));
        d.0 += 1;
        for &b in &e.active_set {
            d.1[b] += 1;
        }
    }
    Ok(UsageStatistics {
        format_version: FORMAT_VERSION,
        num_bases: k,
        skipped_lines: skipped,
        datasets: datasets
            .into_iter()
            .map(|(name, (tasks, counts))| {
                let frequency = counts.iter().map(|&c| c as f64 / tasks as f64).collect();
                (name, DatasetUsage { tasks, counts, frequency })
            })
            .collect(),
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub format_version: u32,
    pub datasets: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

/// Cosine similarity of the per-dataset usage frequencies.
pub fn usage_cosine_similarity(stats: &UsageStatistics) -> Result<SimilarityMatrix> {
    let names: Vec<String> = stats.datasets.keys().cloned().collect();
    let freqs: Vec<&Vec<f64>> = stats.datasets.values().map(|d| &d.frequency).collect();
    for (n, f) in names.iter().zip(&freqs) {
        if f.iter().all(|&x| x == 0.0) {
            return Err(Error::Degenerate(format!("dataset {n} has no basis usage; similarity undefined")));
        }
    }
    let n = names.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in i + 1..n {
            let c = cosine(freqs[i], freqs[j]).clamp(0.0, 1.0);
            matrix[i][j] = c;
            matrix[j][i] = c;
        }
    }
    Ok(SimilarityMatrix {
        format_version: FORMAT_VERSION,
        datasets: names,
        matrix,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmiEdge {
    pub a: usize,
    pub b: usize,
    pub pmi: f64,
    pub p_a: f64,
    pub p_b: f64,
    pub p_ab: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmiNetwork {
    pub format_version: u32,
    pub tasks: usize,
    pub edges: Vec<PmiEdge>,
}

/// Positive-PMI basis pairs from active-set sets, strongest first.
pub fn pmi_from_sets(sets: &[Vec<usize>], num_bases: usize, top_pairs: usize) -> Result<PmiNetwork> {
    if sets.is_empty() {
        return Err(Error::Input("PMI needs at least one task".into()));
    }
    let n = sets.len() as f64;
    let mut single = vec![0u64; num_bases];
    let mut joint = vec![vec![0u64; num_bases]; num_bases];
    for s in sets {
        let mut s = s.clone();
        s.sort_unstable();
        s.dedup();
        for (i, &a) in s.iter().enumerate() {
            single[a] += 1;
            for &b in &s[i + 1..] {
                joint[a][b] += 1;
            }
        }
    }
    let mut edges = Vec::new();
    for a in 0..num_bases {
        for b in a + 1..num_bases {
            if joint[a][b] == 0 {
                continue;
            }
            let (pa, pb, pab) = (single[a] as f64 / n, single[b] as f64 / n, joint[a][b] as f64 / n);
            let pmi = (pab / (pa * pb)).ln();
            if pmi > 0.0 {
                edges.push(PmiEdge { a, b, pmi, p_a: pa, p_b: pb, p_ab: pab });
            }
        }
    }
    edges.sort_by(|x, y| y.pmi.total_cmp(&x.pmi).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));
    edges.truncate(top_pairs);
    Ok(PmiNetwork {
        format_version: FORMAT_VERSION,
        tasks: sets.len(),
        edges,
    })
}

pub fn pmi_network(entries: &[RoutingLogEntry], top_pairs: usize) -> Result<PmiNetwork> {
    let k = entries.first().map_or(0, |e| e.alpha.len());
    let sets: Vec<Vec<usize>> = entries
        .iter()
        .filter(|e| e.alpha.len() == k && e.active_set.iter().all(|&b| b < k))
        .map(|e| e.active_set.clone())
        .collect();
    pmi_from_sets(&sets, k, top_pairs)
}

/// Mean intra-label minus mean inter-label cosine similarity.
pub fn routing_gap(vectors: &[Vec<f64>], labels: &[String]) -> Result<f64> {
    if vectors.len() != labels.len() {
        return Err(Error::Contract("one label per vector".into()));
    }
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0u64, 0.0, 0u64);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let c = cosine(&vectors[i], &vectors[j]);
            if labels[i] == labels[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    if ni == 0 || nx == 0 {
        return Ok(0.0);
    }
    Ok(intra / ni as f64 - inter / nx as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub format_version: u32,
    pub task_id: String,
    pub domain: String,
    pub z: Vec<f32>,
    pub alpha: Vec<f64>,
    pub sparse_alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStructure {
    pub format_version: u32,
    pub tasks: usize,
    /// Gap on the composed (top-m) routing weights.
    pub gap: f64,
    /// Gap on the full softmax routing.
    pub gap_dense: f64,
}

/// Per-task z(q) and routing vectors plus the routing-structure gap.
pub fn export_embeddings(generator: &Generator<'_>, tasks: &[TaskRecord]) -> Result<(Vec<EmbeddingRecord>, RoutingStructure)> {
    if tasks.is_empty() {
        return Err(Error::Input("no tasks to embed".into()));
    }
    let mut records = Vec::with_capacity(tasks.len());
    for t in tasks {
        let z = generator.base.task_embedding(generator.tokenizer, &t.question)?;
        let (decision, _) = generator.route(&t.question)?;
        let decision = decision.ok_or_else(|| Error::Checkpoint("embedding export needs a capability checkpoint".into()))?;
        records.push(EmbeddingRecord {
            format_version: FORMAT_VERSION,
            task_id: t.task_id.clone(),
            domain: t.domain.tag().to_string(),
            z,
            sparse_alpha: decision.sparse_alpha(),
            alpha: decision.alpha,
        });
    }
    let labels: Vec<String> = records.iter().map(|r| r.domain.clone()).collect();
    let sparse: Vec<Vec<f64>> = records.iter().map(|r| r.sparse_alpha.clone()).collect();
    let dense: Vec<Vec<f64>> = records.iter().map(|r| r.alpha.clone()).collect();
    let structure = RoutingStructure {
        format_version: FORMAT_VERSION,
        tasks: records.len(),
        gap: routing_gap(&sparse, &labels)?,
        gap_dense: routing_gap(&dense, &labels)?,
    };
    Ok((records, structure))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::Domain;

    fn entry(domain: Domain, set: Vec<usize>) -> RoutingLogEntry {
        RoutingLogEntry {
            format_version: 1,
            step: None,
            task_id: "t".into(),
            domain,
            alpha: vec![1.0 / 6.0; 6],
            temperature: 1.0,
            active_set: set,
        }
    }

    #[test]
    fn histogram_counts_memberships() {
        let s = usage_histogram(&[entry(Domain::Math, vec![0, 2, 5])], 0).unwrap();
        assert_eq!(s.datasets["math-like"].counts, vec![1, 0, 1, 0, 0, 1]);
        let many: Vec<_> = (0..10).map(|i| entry(Domain::Coding, vec![i % 6, (i + 1) % 6, (i + 2) % 6])).collect();
        let s = usage_histogram(&many, 0).unwrap();
        assert_eq!(s.datasets["coding-like"].counts.iter().sum::<u64>(), 30);
        assert!((s.datasets["coding-like"].frequency.iter().sum::<f64>() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[3.0, 1.0, 0.0], &[1.0, 1.0, 0.0]) - 4.0 / (10f64.sqrt() * 2f64.sqrt())).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn similarity_rejects_unused_dataset() {
        let mut s = usage_histogram(&[entry(Domain::Math, vec![0])], 0).unwrap();
        s.datasets.get_mut("math-like").unwrap().frequency = vec![0.0; 6];
        assert!(matches!(usage_cosine_similarity(&s), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pmi_examples() {
        // 100 tasks: a in 40, b in 40, together in 30
        let mut sets = vec![vec![0, 1]; 30];
        sets.extend(vec![vec![0]; 10]);
        sets.extend(vec![vec![1]; 10]);
        sets.extend(vec![vec![2]; 50]);
        let net = pmi_from_sets(&sets, 3, 20).unwrap();
        assert_eq!(net.edges.len(), 1);
        assert!((net.edges[0].pmi - (0.30f64 / 0.16).ln()).abs() < 1e-12);

        let mut sets = vec![vec![0, 1]; 20];
        sets.extend(vec![vec![2]; 80]);
        let net = pmi_from_sets(&sets, 3, 20).unwrap();
        assert!((net.edges[0].pmi + 0.2f64.ln()).abs() < 1e-12);

        let sets = vec![vec![0, 1], vec![0], vec![1], vec![]];
        assert!(pmi_from_sets(&sets, 2, 20).unwrap().edges.is_empty());
    }

    #[test]
    fn gap_extremes() {
        let same = vec![vec![0.5, 0.5]; 4];
        let labels: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        assert!(routing_gap(&same, &labels).unwrap().abs() < 1e-12);
        let split = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        assert!((routing_gap(&split, &labels).unwrap() - 1.0).abs() < 1e-12);
    }
}
