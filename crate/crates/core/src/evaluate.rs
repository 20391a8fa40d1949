//! Cluster purity, NMI, per-cluster composition and superclass merging.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{filled_clusters, SoftAssignment};
use crate::data::{DatasetManifest, SuperClass, ViewLabel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no labeled samples to evaluate")]
    NoLabeledSamples,
    #[error("label {0:?} has no superclass")]
    UnmappedLabel(String),
    #[error("assignment id {0:?} is not in the manifest")]
    UnknownId(String),
}

/// Counts of samples per (cluster, label); columns follow `labels`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub cluster_sizes: Vec<u64>,
    pub label_sizes: Vec<u64>,
    pub total: u64,
    /// Evaluated ids skipped because they carry no label.
    pub unlabeled: usize,
}

impl ContingencyTable {
    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Self {
        let cluster_sizes: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
        let label_sizes: Vec<u64> = (0..labels.len()).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        let total = cluster_sizes.iter().sum();
        ContingencyTable { labels, counts, cluster_sizes, label_sizes, total, unlabeled: 0 }
    }

    /// Table from parallel cluster/label index lists.
    pub fn from_pairs(clusters: &[usize], labels: &[usize], num_clusters: usize, label_names: Vec<String>) -> Self {
        let mut counts = vec![vec![0u64; label_names.len()]; num_clusters];
        for (&c, &l) in clusters.iter().zip(labels) {
            counts[c][l] += 1;
        }
        Self::from_counts(label_names, counts)
    }

    pub fn num_clusters(&self) -> usize {
        self.counts.len()
    }

    /// Sums label columns that share a group name.
    pub fn merge_columns(&self, group: impl Fn(&str) -> Option<String>) -> Result<Self, EvalError> {
        let mut names: Vec<String> = Vec::new();
        let mut target = Vec::with_capacity(self.labels.len());
        for l in &self.labels {
            let g = group(l).ok_or_else(|| EvalError::UnmappedLabel(l.clone()))?;
            let pos = match names.iter().position(|n| *n == g) {
                Some(p) => p,
                None => {
                    names.push(g);
                    names.len() - 1
                }
            };
            target.push(pos);
        }
        let counts = self
            .counts
            .iter()
            .map(|row| {
                let mut merged = vec![0u64; names.len()];
                for (j, &v) in row.iter().enumerate() {
                    merged[target[j]] += v;
                }
                merged
            })
            .collect();
        let mut t = Self::from_counts(names, counts);
        t.unlabeled = self.unlabeled;
        Ok(t)
    }
}

/// Cross-tabulates hard labels against pseudo labels; columns follow the view order.
pub fn contingency(assignment: &SoftAssignment, manifest: &DatasetManifest) -> Result<ContingencyTable, EvalError> {
    let by_id = manifest.id_index();
    let mut pairs = Vec::with_capacity(assignment.len());
    let mut unlabeled = 0;
    for (i, id) in assignment.ids.iter().enumerate() {
        let row = *by_id.get(id.as_str()).ok_or_else(|| EvalError::UnknownId(id.clone()))?;
        match manifest.records[row].pseudo_label {
            Some(label) => pairs.push((assignment.hard_labels[i], label)),
            None => unlabeled += 1,
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoLabeledSamples);
    }
    let present: Vec<ViewLabel> = ViewLabel::ALL.iter().copied().filter(|v| pairs.iter().any(|p| p.1 == *v)).collect();
    let col: BTreeMap<ViewLabel, usize> = present.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let clusters: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let labels: Vec<usize> = pairs.iter().map(|p| col[&p.1]).collect();
    let names = present.iter().map(|v| v.as_str().to_string()).collect();
    let mut t = ContingencyTable::from_pairs(&clusters, &labels, assignment.num_clusters(), names);
    t.unlabeled = unlabeled;
    Ok(t)
}

/// Fraction of samples that carry their cluster's majority label.
pub fn cluster_purity(table: &ContingencyTable) -> f64 {
    if table.total == 0 {
        return 0.0;
    }
    let hits: u64 = table.counts.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
    hits as f64 / table.total as f64
}

fn entropy(sizes: &[u64], n: f64) -> f64 {
    sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2 I(X;Y) / (H(X) + H(Y))` in nats; 1 when both partitions are trivial, 0 when only one is.
pub fn nmi(table: &ContingencyTable) -> f64 {
    if table.total == 0 {
        return 0.0;
    }
    let n = table.total as f64;
    let hx = entropy(&table.cluster_sizes, n);
    let hy = entropy(&table.label_sizes, n);
    if hx + hy == 0.0 {
        return 1.0;
    }
    if hx == 0.0 || hy == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (c, row) in table.counts.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > 0 {
                let v = v as f64;
                mi += v / n * (v * n / (table.cluster_sizes[c] as f64 * table.label_sizes[j] as f64)).ln();
            }
        }
    }
    (2.0 * mi / (hx + hy)).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopLabel {
    pub label: String,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: u64,
    pub top: Vec<TopLabel>,
}

/// Top three labels of each nonempty cluster, by count then column order.
pub fn per_cluster_report(table: &ContingencyTable) -> Vec<ClusterSummary> {
    table
        .counts
        .iter()
        .enumerate()
        .filter(|(c, _)| table.cluster_sizes[*c] > 0)
        .map(|(c, row)| {
            let size = table.cluster_sizes[c];
            let mut cols: Vec<usize> = (0..row.len()).collect();
            cols.sort_by(|&a, &b| row[b].cmp(&row[a]).then(a.cmp(&b)));
            let top = cols
                .into_iter()
                .take(3)
                .map(|j| TopLabel { label: table.labels[j].clone(), fraction: row[j] as f64 / size as f64 })
                .collect();
            ClusterSummary { cluster: c, size, top }
        })
        .collect()
}

/// Canonical view name to superclass name.
pub fn superclass_map() -> BTreeMap<String, String> {
    SuperClass::ALL
        .iter()
        .flat_map(|s| s.members().into_iter().map(move |v| (v.as_str().to_string(), s.as_str().to_string())))
        .collect()
}

/// CP and NMI after collapsing label columns through `map`.
pub fn merged_metrics(table: &ContingencyTable, map: &BTreeMap<String, String>) -> Result<(f64, f64), EvalError> {
    let merged = table.merge_columns(|l| map.get(l).cloned())?;
    Ok((cluster_purity(&merged), nmi(&merged)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Which samples were evaluated, e.g. `test` or `all`.
    pub split: String,
    pub evaluated: u64,
    pub unlabeled: usize,
    pub num_clusters: usize,
    pub cp: f64,
    pub nmi: f64,
    pub filled_clusters: usize,
    pub per_cluster: Vec<ClusterSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub merged_cp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub merged_nmi: Option<f64>,
}

pub fn evaluate(
    assignment: &SoftAssignment,
    manifest: &DatasetManifest,
    split: &str,
    merge: bool,
) -> Result<EvaluationReport, EvalError> {
    let table = contingency(assignment, manifest)?;
    let (merged_cp, merged_nmi) = if merge {
        let (c, n) = merged_metrics(&table, &superclass_map())?;
        (Some(c), Some(n))
    } else {
        (None, None)
    };
    Ok(EvaluationReport {
        split: split.to_string(),
        evaluated: table.total,
        unlabeled: table.unlabeled,
        num_clusters: assignment.num_clusters(),
        cp: cluster_purity(&table),
        nmi: nmi(&table),
        filled_clusters: filled_clusters(assignment),
        per_cluster: per_cluster_report(&table),
        merged_cp,
        merged_nmi,
    })
}

fn display_label(name: &str) -> String {
    name.parse::<ViewLabel>().map(|v| v.display_name().to_string()).unwrap_or_else(|_| name.to_string())
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plain-text summary with one row per cluster.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "split: {}  evaluated: {}  unlabeled: {}", self.split, self.evaluated, self.unlabeled);
        let _ = writeln!(out, "CP {:.2}%  NMI {:.2}%  filled clusters {}/{}", self.cp * 100.0, self.nmi * 100.0, self.filled_clusters, self.num_clusters);
        if let (Some(c), Some(n)) = (self.merged_cp, self.merged_nmi) {
            let _ = writeln!(out, "merged CP {:.2}%  merged NMI {:.2}%", c * 100.0, n * 100.0);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>7}  {:<16}{:>6}  {:<16}{:>6}  {:<16}{:>6}  {:>6}", "cluster", "top1", "%", "top2", "%", "top3", "%", "size");
        for s in &self.per_cluster {
            let mut line = format!("{:>7}", s.cluster + 1);
            for i in 0..3 {
                match s.top.get(i) {
                    Some(t) => {
                        let _ = write!(line, "  {:<16}{:>5.0}%", display_label(&t.label), t.fraction * 100.0);
                    }
                    None => {
                        let _ = write!(line, "  {:<16}{:>6}", "-", "-");
                    }
                }
            }
            let _ = writeln!(line, "  {:>6}", s.size);
            out.push_str(&line);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("L{i}")).collect()
    }

    #[test]
    fn counts_example() {
        let t = ContingencyTable::from_pairs(&[0, 0, 0, 1, 1], &[0, 0, 1, 1, 1], 2, names(2));
        assert_eq!(t.counts, vec![vec![2, 1], vec![0, 2]]);
        assert_eq!(t.cluster_sizes, vec![3, 2]);
        assert_eq!(t.label_sizes, vec![2, 3]);
        assert!((cluster_purity(&t) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn purity_examples() {
        let diag = ContingencyTable::from_counts(names(3), vec![vec![4, 0, 0], vec![0, 2, 0], vec![0, 0, 7]]);
        assert_eq!(cluster_purity(&diag), 1.0);
        let single = ContingencyTable::from_counts(names(2), vec![vec![3, 2]]);
        assert!((cluster_purity(&single) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn nmi_examples() {
        let same = ContingencyTable::from_pairs(&[0, 0, 1, 1], &[0, 0, 1, 1], 2, names(2));
        assert!((nmi(&same) - 1.0).abs() < 1e-12);
        let indep = ContingencyTable::from_pairs(&[0, 0, 1, 1], &[0, 1, 0, 1], 2, names(2));
        assert!(nmi(&indep).abs() < 1e-12);
        let t = ContingencyTable::from_pairs(&[0, 0, 1, 1], &[0, 0, 0, 1], 2, names(2));
        // direct counts: cells (c1,l1)=2, (c2,l1)=1, (c2,l2)=1 with N=4
        let i = 0.5 * (2.0f64 * 4.0 / 6.0).ln() + 0.25 * (4.0f64 / 6.0).ln() + 0.25 * (4.0f64 / 2.0).ln();
        let hx = 2f64.ln();
        let hy = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((i - 0.2158).abs() < 1e-3 && (hy - 0.5623).abs() < 1e-4);
        assert!((nmi(&t) - 2.0 * i / (hx + hy)).abs() < 1e-12);
        assert!((nmi(&t) - 0.3437).abs() < 1e-3);
    }

    #[test]
    fn nmi_degenerate_cases() {
        let one = ContingencyTable::from_counts(names(1), vec![vec![5]]);
        assert_eq!(nmi(&one), 1.0);
        let one_cluster = ContingencyTable::from_counts(names(2), vec![vec![2, 3]]);
        assert_eq!(nmi(&one_cluster), 0.0);
    }

    #[test]
    fn top_three_listing() {
        let t = ContingencyTable::from_counts(
            vec!["RVOT".into(), "LVOT".into(), "FourChamber".into(), "Brain".into()],
            vec![vec![160, 119, 98, 33], vec![0, 0, 0, 914], vec![0; 4]],
        );
        let r = per_cluster_report(&t);
        assert_eq!(r.len(), 2, "empty cluster omitted");
        let labels: Vec<&str> = r[0].top.iter().map(|t| t.label.as_str()).collect();
        assert_eq!(labels, vec!["RVOT", "LVOT", "FourChamber"]);
        assert_eq!((r[0].top[0].fraction * 100.0).round(), 39.0);
        assert_eq!((r[0].top[1].fraction * 100.0).round(), 29.0);
        assert_eq!((r[0].top[2].fraction * 100.0).round(), 24.0);
        assert_eq!(r[0].size, 410);
        assert_eq!(r[1].top[0], TopLabel { label: "Brain".into(), fraction: 1.0 });
        assert_eq!(r[1].top[1].fraction, 0.0);
        assert_eq!(r[1].size, 914);
    }

    #[test]
    fn merge_is_additive() {
        let t = ContingencyTable::from_counts(vec!["RVOT".into(), "LVOT".into(), "Femur".into()], vec![vec![3, 2, 1]]);
        let m = t.merge_columns(|l| superclass_map().get(l).cloned()).unwrap();
        assert_eq!(m.labels, vec!["Heart", "Bone"]);
        assert_eq!(m.counts, vec![vec![5, 1]]);
        let bad = ContingencyTable::from_counts(vec!["Placenta".into()], vec![vec![1]]);
        assert!(matches!(merged_metrics(&bad, &superclass_map()), Err(EvalError::UnmappedLabel(_))));
    }

    #[test]
    fn report_renders() {
        use crate::data::ImageRecord;
        let recs = (0..4)
            .map(|i| ImageRecord {
                image_id: format!("r{i}"),
                patient_id: "p".into(),
                pixel_path: "x.png".into(),
                pseudo_label: if i == 3 { None } else { Some([ViewLabel::Brain, ViewLabel::Femur][i % 2]) },
                machine: String::new(),
                width: 1,
                height: 1,
            })
            .collect();
        let m = DatasetManifest::new(recs);
        let a = SoftAssignment::one_hot((0..4).map(|i| format!("r{i}")).collect(), &[0, 1, 0, 1], 3).unwrap();
        let r = evaluate(&a, &m, "test", true).unwrap();
        assert_eq!(r.unlabeled, 1);
        assert_eq!(r.evaluated, 3);
        assert_eq!(r.filled_clusters, 2);
        assert_eq!(r.cp, 1.0);
        assert!(r.merged_cp.is_some());
        let text = r.to_table();
        assert!(text.contains("Brain"));
        let back: EvaluationReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let none = SoftAssignment::one_hot(vec!["r3".into()], &[0], 2).unwrap();
        assert!(matches!(evaluate(&none, &m, "test", false), Err(EvalError::NoLabeledSamples)));
    }

    fn random_table() -> impl Strategy<Value = ContingencyTable> {
        (1usize..8, 1usize..8).prop_flat_map(|(c, l)| {
            proptest::collection::vec(proptest::collection::vec(0u64..20, l), c)
                .prop_filter("nonempty", |rows| rows.iter().flatten().sum::<u64>() > 0)
                .prop_map(move |rows| ContingencyTable::from_counts(names(l), rows))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn permutation_invariance(t in random_table(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rows: Vec<usize> = (0..t.num_clusters()).collect();
            let mut cols: Vec<usize> = (0..t.labels.len()).collect();
            rows.shuffle(&mut rng);
            cols.shuffle(&mut rng);
            let p = ContingencyTable::from_counts(
                cols.iter().map(|&j| t.labels[j].clone()).collect(),
                rows.iter().map(|&r| cols.iter().map(|&j| t.counts[r][j]).collect()).collect(),
            );
            prop_assert!((cluster_purity(&p) - cluster_purity(&t)).abs() < 1e-12);
            prop_assert!((nmi(&p) - nmi(&t)).abs() < 1e-12);
        }

        #[test]
        fn nmi_symmetric_and_bounded(t in random_table()) {
            let transposed = ContingencyTable::from_counts(
                names(t.num_clusters()),
                (0..t.labels.len()).map(|j| t.counts.iter().map(|r| r[j]).collect()).collect(),
            );
            prop_assert!((nmi(&t) - nmi(&transposed)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&nmi(&t)));
            prop_assert!((0.0..=1.0).contains(&cluster_purity(&t)));
        }

        #[test]
        fn single_cluster_purity_is_modal_frequency(row in proptest::collection::vec(0u64..30, 1..6)) {
            prop_assume!(row.iter().sum::<u64>() > 0);
            let n: u64 = row.iter().sum();
            let max = *row.iter().max().unwrap();
            let t = ContingencyTable::from_counts(names(row.len()), vec![row]);
            prop_assert!((cluster_purity(&t) - max as f64 / n as f64).abs() < 1e-15);
        }
    }
}
