//! Hybrid data labeling: enumerate operator groups, score every
//! (image, group) pair after a codec pass, standardize per image and keep
//! the best-scoring preprocessed image as the training label.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{compress, Codec};
use crate::corpus::{read_jsonl, write_jsonl, CorpusEntry, ManifestError};
use crate::filters::{OperatorRegistry, PreprocOperator};
use crate::image::{load_image, save_image, ImageBuffer, ImageError, ImageFormat};
use crate::metrics::{MetricMode, QualityMetric};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("invalid group config: {0}")]
    InvalidConfig(String),
    #[error("standardization needs at least 2 records, got {0}")]
    TooFewRecords(usize),
    #[error("record ({i}, {j}) has not been standardized")]
    Unstandardized { i: String, j: usize },
    #[error("group {j} failed on image {i}: {source}")]
    Group {
        i: String,
        j: usize,
        #[source]
        source: BoxError,
    },
    #[error("no groups to evaluate")]
    NoGroups,
    #[error("every group failed on image {0}")]
    AllGroupsFailed(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LabelError + '_ {
    move |source| LabelError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupMode {
    /// Order-canonical subsets.
    #[default]
    Combinations,
    /// Ordered arrangements.
    Permutations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupGenConfig {
    pub n: usize,
    pub k_max: usize,
    #[serde(default)]
    pub mode: GroupMode,
}

impl GroupGenConfig {
    pub fn validate(&self) -> Result<(), LabelError> {
        if self.n == 0 {
            return Err(LabelError::InvalidConfig("operator pool is empty".into()));
        }
        if self.k_max == 0 || self.k_max > self.n {
            return Err(LabelError::InvalidConfig(format!("k_max must satisfy 1 <= k_max <= n (n = {}, k_max = {})", self.n, self.k_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocGroup {
    pub index: usize,
    pub operator_ids: Vec<String>,
}

impl PreprocGroup {
    pub fn name(&self) -> String {
        self.operator_ids.join("+")
    }
}

fn push_combinations(pool: &[String], k: usize, start: usize, cur: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..pool.len() {
        cur.push(pool[i].clone());
        push_combinations(pool, k, i + 1, cur, out);
        cur.pop();
    }
}

fn push_permutations(pool: &[String], k: usize, used: &mut [bool], cur: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in 0..pool.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        cur.push(pool[i].clone());
        push_permutations(pool, k, used, cur, out);
        cur.pop();
        used[i] = false;
    }
}

/// Enumerate groups over the first `cfg.n` registered operators, by
/// increasing length, lexicographic in registry order within each length.
pub fn generate_groups(cfg: &GroupGenConfig, registry: &OperatorRegistry) -> Result<Vec<PreprocGroup>, LabelError> {
    cfg.validate()?;
    if cfg.n > registry.len() {
        return Err(LabelError::InvalidConfig(format!("n = {} exceeds the {} registered operators", cfg.n, registry.len())));
    }
    let pool: Vec<String> = registry.ids().into_iter().take(cfg.n).collect();
    let mut chains = Vec::new();
    for k in 1..=cfg.k_max {
        match cfg.mode {
            GroupMode::Combinations => push_combinations(&pool, k, 0, &mut Vec::new(), &mut chains),
            GroupMode::Permutations => push_permutations(&pool, k, &mut vec![false; pool.len()], &mut Vec::new(), &mut chains),
        }
    }
    Ok(chains.into_iter().enumerate().map(|(index, operator_ids)| PreprocGroup { index, operator_ids }).collect())
}

/// One row of the score ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub i: String,
    pub j: usize,
    pub group_ids: Vec<String>,
    pub raw_quality: f64,
    pub raw_bpp: f64,
    pub z_quality: Option<f64>,
    pub z_bpp: Option<f64>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSign {
    /// `z_quality − z_bpp`: rewards quality and penalizes rate.
    #[default]
    Default,
    /// `z_quality + z_bpp`.
    Paper,
}

impl std::str::FromStr for ScoreSign {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(Self::Default),
            "paper" => Ok(Self::Paper),
            other => Err(format!("unknown score sign `{other}` (expected default|paper)")),
        }
    }
}

fn z_scores(values: &[f64]) -> Vec<f64> {
    if values.windows(2).all(|w| w[0] == w[1]) {
        return vec![0.0; values.len()];
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

/// Fill the z columns of one image's records (population σ; a constant
/// column standardizes to all zeros).
pub fn standardize(records: &mut [ScoreRecord]) -> Result<(), LabelError> {
    if records.len() < 2 {
        return Err(LabelError::TooFewRecords(records.len()));
    }
    let zq = z_scores(&records.iter().map(|r| r.raw_quality).collect::<Vec<_>>());
    let zb = z_scores(&records.iter().map(|r| r.raw_bpp).collect::<Vec<_>>());
    for ((r, q), b) in records.iter_mut().zip(zq).zip(zb) {
        r.z_quality = Some(q);
        r.z_bpp = Some(b);
    }
    Ok(())
}

pub fn score(record: &ScoreRecord, sign: ScoreSign) -> Result<f64, LabelError> {
    match (record.z_quality, record.z_bpp) {
        (Some(q), Some(b)) => Ok(match sign {
            ScoreSign::Default => q - b,
            ScoreSign::Paper => q + b,
        }),
        _ => Err(LabelError::Unstandardized { i: record.i.clone(), j: record.j }),
    }
}

/// Index of the winning record: highest score, then lower raw bpp, then
/// lower group index. Records without a score are ignored.
pub fn select_winner(records: &[ScoreRecord]) -> Option<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.score.is_some())
        .min_by(|(_, a), (_, b)| {
            b.score
                .unwrap()
                .total_cmp(&a.score.unwrap())
                .then(a.raw_bpp.total_cmp(&b.raw_bpp))
                .then(a.j.cmp(&b.j))
        })
        .map(|(idx, _)| idx)
}

/// Standardize (or zero a lone record) and fill scores.
pub fn finalize_scores(records: &mut [ScoreRecord], sign: ScoreSign) -> Result<(), LabelError> {
    if records.len() == 1 {
        records[0].z_quality = Some(0.0);
        records[0].z_bpp = Some(0.0);
    } else {
        standardize(records)?;
    }
    for r in records.iter_mut() {
        r.score = Some(score(r, sign)?);
    }
    Ok(())
}

/// Row of the labels manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub input_path: PathBuf,
    pub label_path: PathBuf,
    pub j_star: usize,
    pub group_ids: Vec<String>,
    pub score: f64,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".into()
}

/// In-memory result of labeling one image.
#[derive(Debug, Clone)]
pub struct ImageLabel {
    pub image_id: String,
    pub j_star: usize,
    pub score: f64,
    /// Pre-codec output of the winning group.
    pub label: ImageBuffer,
    /// Standardized records of every group that succeeded, in group order.
    pub table: Vec<ScoreRecord>,
    /// Groups that failed, with their error text.
    pub failures: Vec<(usize, String)>,
}

/// Failed image during corpus labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFailure {
    pub id: String,
    pub j: Option<usize>,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusReport {
    pub labeled: usize,
    pub skipped: usize,
    pub records: Vec<LabelRecord>,
    pub failures: Vec<LabelFailure>,
}

impl CorpusReport {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const LABEL_DIR: &str = "labels";

/// Everything needed to score groups on images.
#[derive(Clone)]
pub struct Labeler {
    pub registry: OperatorRegistry,
    pub groups: Vec<PreprocGroup>,
    pub codec: Arc<dyn Codec>,
    pub quality: u8,
    pub metric: Arc<dyn QualityMetric>,
    pub sign: ScoreSign,
}

impl Labeler {
    /// Raw ledger fields for one (image, group) pair plus the pre-codec
    /// preprocessed image.
    pub fn evaluate_group(&self, image_id: &str, img: &ImageBuffer, group: &PreprocGroup) -> Result<(ScoreRecord, ImageBuffer), LabelError> {
        let ctx = |source: BoxError| LabelError::Group { i: image_id.to_string(), j: group.index, source };
        let op = self.registry.chain(&group.operator_ids).map_err(|e| ctx(e.into()))?;
        let preprocessed = op.apply(img).map_err(|e| ctx(e.into()))?;
        let artifact = compress(self.codec.as_ref(), &preprocessed, self.quality).map_err(|e| ctx(e.into()))?;
        let decoded = self.codec.decode(&artifact.payload).map_err(|e| ctx(e.into()))?;
        let reference = (self.metric.mode() == MetricMode::FullReference).then_some(img);
        let quality = self.metric.score(&decoded, reference).map_err(|e| ctx(e.into()))?;
        let record = ScoreRecord {
            i: image_id.to_string(),
            j: group.index,
            group_ids: group.operator_ids.clone(),
            raw_quality: quality,
            raw_bpp: artifact.bpp,
            z_quality: None,
            z_bpp: None,
            score: None,
        };
        Ok((record, preprocessed))
    }

    /// Score every group on `img` and pick the winner. Groups run on the
    /// rayon pool; results are kept in group order.
    pub fn label_image(&self, image_id: &str, img: &ImageBuffer) -> Result<ImageLabel, LabelError> {
        if self.groups.is_empty() {
            return Err(LabelError::NoGroups);
        }
        let results: Vec<_> = self.groups.par_iter().map(|g| self.evaluate_group(image_id, img, g)).collect();
        let mut table = Vec::new();
        let mut images = Vec::new();
        let mut failures = Vec::new();
        for (g, r) in self.groups.iter().zip(results) {
            match r {
                Ok((rec, out)) => {
                    table.push(rec);
                    images.push(out);
                }
                Err(e) => failures.push((g.index, e.to_string())),
            }
        }
        if table.is_empty() {
            return Err(LabelError::AllGroupsFailed(image_id.to_string()));
        }
        finalize_scores(&mut table, self.sign)?;
        let w = select_winner(&table).expect("scores were just filled");
        Ok(ImageLabel {
            image_id: image_id.to_string(),
            j_star: table[w].j,
            score: table[w].score.unwrap(),
            label: images.swap_remove(w),
            table,
            failures,
        })
    }

    /// Label a whole corpus into `out_dir`:
    ///
    /// - `ledger.jsonl`: one score row per (image, group), appended per image
    /// - `labels/<id>.png`: the winning pre-codec image
    /// - `labels.jsonl`: `{id, input_path, label_path, j_star, ...}`
    /// - `failures.jsonl`: images or groups that failed
    ///
    /// Images that already have ledger rows are not re-scored; their winner
    /// is recomputed from the ledger.
    pub fn label_corpus(&self, entries: &[CorpusEntry], out_dir: &Path, workers: usize) -> Result<CorpusReport, LabelError> {
        self.label_corpus_with_progress(entries, out_dir, workers, |_, _| {})
    }

    /// As [`Labeler::label_corpus`], calling `progress(id, ok)` after each
    /// freshly scored image.
    pub fn label_corpus_with_progress(
        &self,
        entries: &[CorpusEntry],
        out_dir: &Path,
        workers: usize,
        mut progress: impl FnMut(&str, bool),
    ) -> Result<CorpusReport, LabelError> {
        let label_dir = out_dir.join(LABEL_DIR);
        std::fs::create_dir_all(&label_dir).map_err(io_err(&label_dir))?;
        let ledger_path = out_dir.join(LEDGER_FILE);
        let mut done: BTreeMap<String, Vec<ScoreRecord>> = BTreeMap::new();
        if ledger_path.exists() {
            for row in read_jsonl::<ScoreRecord>(&ledger_path)? {
                done.entry(row.i.clone()).or_default().push(row);
            }
        }
        let mut ledger = OpenOptions::new().create(true).append(true).open(&ledger_path).map_err(io_err(&ledger_path))?;

        let mut report = CorpusReport::default();
        let mut seen = BTreeSet::new();
        for e in entries {
            if !seen.insert(e.id.clone()) {
                report.failures.push(LabelFailure { id: e.id.clone(), j: None, error: "duplicate image id".into() });
            }
        }
        let label_path = |id: &str| label_dir.join(format!("{id}.png"));

        let pending: Vec<&CorpusEntry> = entries.iter().filter(|e| !done.contains_key(&e.id)).collect();
        let chunk = workers.max(1);
        let mut fresh: BTreeMap<String, LabelRecord> = BTreeMap::new();
        for batch in pending.chunks(chunk) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|e| -> Result<ImageLabel, LabelError> {
                    let img = load_image(&e.path)?;
                    let labeled = self.label_image(&e.id, &img)?;
                    save_image(&labeled.label, &label_path(&e.id), ImageFormat::Png)?;
                    Ok(labeled)
                })
                .collect();
            // single writer, input order
            for (e, r) in batch.iter().zip(results) {
                match r {
                    Ok(labeled) => {
                        let mut buf = String::new();
                        for row in &labeled.table {
                            buf.push_str(&serde_json::to_string(row).expect("ledger rows serialize"));
                            buf.push('\n');
                        }
                        ledger.write_all(buf.as_bytes()).map_err(io_err(&ledger_path))?;
                        ledger.flush().map_err(io_err(&ledger_path))?;
                        for (j, error) in &labeled.failures {
                            report.failures.push(LabelFailure { id: e.id.clone(), j: Some(*j), error: error.clone() });
                        }
                        let winner = labeled.table.iter().find(|r| r.j == labeled.j_star).unwrap();
                        fresh.insert(
                            e.id.clone(),
                            LabelRecord {
                                id: e.id.clone(),
                                input_path: e.path.clone(),
                                label_path: label_path(&e.id),
                                j_star: labeled.j_star,
                                group_ids: winner.group_ids.clone(),
                                score: labeled.score,
                                split: e.split.clone(),
                            },
                        );
                        report.labeled += 1;
                        progress(&e.id, true);
                    }
                    Err(err) => {
                        report.failures.push(LabelFailure { id: e.id.clone(), j: None, error: err.to_string() });
                        progress(&e.id, false);
                    }
                }
            }
        }

        for e in entries {
            if let Some(rec) = fresh.remove(&e.id) {
                report.records.push(rec);
                continue;
            }
            let Some(rows) = done.get(&e.id) else { continue };
            let w = select_winner(rows);
            let Some(w) = w else {
                report.failures.push(LabelFailure { id: e.id.clone(), j: None, error: "ledger rows carry no scores".into() });
                continue;
            };
            let winner = &rows[w];
            let path = label_path(&e.id);
            if !path.exists() {
                // regenerate the label without touching the codec
                let rebuilt = load_image(&e.path)
                    .map_err(LabelError::from)
                    .and_then(|img| self.registry.chain(&winner.group_ids).map(|op| (img, op)).map_err(|err| LabelError::Group { i: e.id.clone(), j: winner.j, source: err.into() }))
                    .and_then(|(img, op)| op.apply(&img).map_err(|err| LabelError::Group { i: e.id.clone(), j: winner.j, source: err.into() }))
                    .and_then(|label| save_image(&label, &path, ImageFormat::Png).map_err(LabelError::from));
                if let Err(err) = rebuilt {
                    report.failures.push(LabelFailure { id: e.id.clone(), j: Some(winner.j), error: err.to_string() });
                    continue;
                }
            }
            report.skipped += 1;
            report.records.push(LabelRecord {
                id: e.id.clone(),
                input_path: e.path.clone(),
                label_path: path,
                j_star: winner.j,
                group_ids: winner.group_ids.clone(),
                score: winner.score.unwrap(),
                split: e.split.clone(),
            });
        }

        write_jsonl(&out_dir.join(LABELS_FILE), &report.records)?;
        write_jsonl(&out_dir.join(FAILURES_FILE), &report.failures)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::JpegCodec;
    use crate::filters::{DetailFilter, Identity, NlmDenoise};
    use crate::metrics::{Psnr, ProxyNr};
    use crate::synth::{add_gaussian_noise, photo_like};
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn rec(j: usize, q: f64, b: f64) -> ScoreRecord {
        ScoreRecord { i: "x".into(), j, group_ids: vec![format!("g{j}")], raw_quality: q, raw_bpp: b, z_quality: None, z_bpp: None, score: None }
    }

    fn binom(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    fn perm(n: usize, k: usize) -> usize {
        (0..k).map(|i| n - i).product()
    }

    #[test]
    fn group_counts_examples() {
        let reg = OperatorRegistry::default_pool();
        let c = GroupGenConfig { n: 4, k_max: 2, mode: GroupMode::Combinations };
        assert_eq!(generate_groups(&c, &reg).unwrap().len(), 10);
        let p = GroupGenConfig { mode: GroupMode::Permutations, ..c };
        assert_eq!(generate_groups(&p, &reg).unwrap().len(), 16);
        for mode in [GroupMode::Combinations, GroupMode::Permutations] {
            let one = GroupGenConfig { n: 1, k_max: 1, mode };
            assert_eq!(generate_groups(&one, &reg).unwrap().len(), 1);
        }
    }

    #[test]
    fn group_order_is_canonical() {
        let reg = OperatorRegistry::default_pool();
        let c = GroupGenConfig { n: 3, k_max: 2, mode: GroupMode::Combinations };
        let names: Vec<_> = generate_groups(&c, &reg).unwrap().iter().map(|g| g.name()).collect();
        assert_eq!(names, ["nlm", "detail", "deblock", "nlm+detail", "nlm+deblock", "detail+deblock"]);
        let groups = generate_groups(&c, &reg).unwrap();
        assert!(groups.iter().enumerate().all(|(i, g)| g.index == i));
    }

    #[test]
    fn invalid_group_configs() {
        let reg = OperatorRegistry::default_pool();
        for (n, k) in [(4, 5), (4, 0), (0, 0), (5, 2)] {
            let c = GroupGenConfig { n, k_max: k, mode: GroupMode::Combinations };
            assert!(matches!(generate_groups(&c, &reg), Err(LabelError::InvalidConfig(_))), "n={n} k={k}");
        }
    }

    #[test]
    fn counts_match_closed_forms() {
        let mut reg = OperatorRegistry::new();
        for i in 0..6 {
            reg.register(Arc::new(DeblockLike(i))).unwrap();
        }
        for n in 1..=6 {
            for k_max in 1..=n {
                let c = GroupGenConfig { n, k_max, mode: GroupMode::Combinations };
                let p = GroupGenConfig { mode: GroupMode::Permutations, ..c };
                let sc: usize = (1..=k_max).map(|k| binom(n, k)).sum();
                let sp: usize = (1..=k_max).map(|k| perm(n, k)).sum();
                let gc = generate_groups(&c, &reg).unwrap();
                let gp = generate_groups(&p, &reg).unwrap();
                assert_eq!(gc.len(), sc);
                assert_eq!(gp.len(), sp);
                for g in gc.iter().chain(&gp) {
                    let set: BTreeSet<_> = g.operator_ids.iter().collect();
                    assert_eq!(set.len(), g.operator_ids.len());
                }
            }
        }
    }

    /// Cheap distinct-id operator for enumeration tests.
    struct DeblockLike(usize);

    impl PreprocOperator for DeblockLike {
        fn id(&self) -> String {
            format!("op{}", self.0)
        }

        fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, crate::filters::FilterError> {
            Ok(img.clone())
        }
    }

    #[test]
    fn standardize_hand_example() {
        let mut rs = vec![rec(0, 60.0, 1.0), rec(1, 65.0, 1.0), rec(2, 70.0, 1.0)];
        standardize(&mut rs).unwrap();
        let z: Vec<f64> = rs.iter().map(|r| r.z_quality.unwrap()).collect();
        // sd = sqrt(50/3)
        let expected = 5.0 / (50.0f64 / 3.0).sqrt();
        assert!((z[0] + expected).abs() < 1e-12 && z[1].abs() < 1e-12 && (z[2] - expected).abs() < 1e-12);
        assert!((expected - 1.2247).abs() < 1e-4);
        assert!(rs.iter().all(|r| r.z_bpp == Some(0.0)));
    }

    #[test]
    fn standardize_needs_two() {
        assert!(matches!(standardize(&mut [rec(0, 1.0, 1.0)]), Err(LabelError::TooFewRecords(1))));
        assert!(matches!(standardize(&mut []), Err(LabelError::TooFewRecords(0))));
    }

    #[test]
    fn score_signs() {
        let mut rs: Vec<_> = [(1.0, -1.0), (0.0, 0.0), (-1.0, 1.0)]
            .iter()
            .enumerate()
            .map(|(j, &(q, b))| ScoreRecord { z_quality: Some(q), z_bpp: Some(b), ..rec(j, 0.0, 0.0) })
            .collect();
        let d: Vec<f64> = rs.iter().map(|r| score(r, ScoreSign::Default).unwrap()).collect();
        assert_eq!(d, [2.0, 0.0, -2.0]);
        let p: Vec<f64> = rs.iter().map(|r| score(r, ScoreSign::Paper).unwrap()).collect();
        assert_eq!(p, [0.0, 0.0, 0.0]);
        for r in rs.iter_mut() {
            r.score = Some(score(r, ScoreSign::Default).unwrap());
        }
        assert_eq!(select_winner(&rs), Some(0));
        assert!(matches!(score(&rec(0, 1.0, 1.0), ScoreSign::Default), Err(LabelError::Unstandardized { .. })));
    }

    #[test]
    fn tie_break_prefers_lower_bpp_then_index() {
        let mk = |j, b| ScoreRecord { score: Some(1.5), ..rec(j, 0.0, b) };
        assert_eq!(select_winner(&[mk(0, 0.52), mk(1, 0.50)]), Some(1));
        assert_eq!(select_winner(&[mk(3, 0.50), mk(1, 0.50)]), Some(1));
        let zero: Vec<_> = (0..3).map(|j| ScoreRecord { score: Some(0.0), ..rec(j, 0.0, 0.7) }).collect();
        assert_eq!(select_winner(&zero), Some(0));
    }

    proptest! {
        #[test]
        fn standardization_moments(values in proptest::collection::vec(-1e3f64..1e3, 2..12)) {
            let mut rs: Vec<_> = values.iter().enumerate().map(|(j, &v)| rec(j, v, 0.5)).collect();
            standardize(&mut rs).unwrap();
            let z: Vec<f64> = rs.iter().map(|r| r.z_quality.unwrap()).collect();
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            let spread = values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min);
            if spread > 1e-6 {
                prop_assert!((var - 1.0).abs() < 1e-9, "var {}", var);
            }
        }

        #[test]
        fn argmax_invariant_under_affine(
            cols in proptest::collection::vec((0f64..100.0, 0.1f64..4.0), 2..10),
            a in 0.01f64..100.0,
            b in -50f64..50.0,
        ) {
            let base: Vec<_> = cols.iter().enumerate().map(|(j, &(q, r))| rec(j, q, r)).collect();
            let mut x = base.clone();
            finalize_scores(&mut x, ScoreSign::Default).unwrap();
            let mut y: Vec<_> = base.iter().map(|r| ScoreRecord { raw_quality: a * r.raw_quality + b, ..r.clone() }).collect();
            finalize_scores(&mut y, ScoreSign::Default).unwrap();
            let wx = select_winner(&x).unwrap();
            let wy = select_winner(&y).unwrap();
            let (sx, sy) = (x[wx].score.unwrap(), y[wy].score.unwrap());
            // scores agree to rounding, so the winner may only differ on a near tie
            prop_assert!((sx - y[wx].score.unwrap()).abs() < 1e-9 && (sy - x[wy].score.unwrap()).abs() < 1e-9);
        }
    }

    fn labeler(groups: Vec<Vec<&str>>, metric: Arc<dyn QualityMetric>) -> Labeler {
        Labeler {
            registry: {
                let mut r = OperatorRegistry::new();
                r.register(Arc::new(Identity)).unwrap();
                r.register(Arc::new(NlmDenoise::new(10.0, 3, 7).unwrap())).unwrap();
                r.register(Arc::new(DetailFilter)).unwrap();
                r
            },
            groups: groups
                .into_iter()
                .enumerate()
                .map(|(index, ids)| PreprocGroup { index, operator_ids: ids.into_iter().map(String::from).collect() })
                .collect(),
            codec: Arc::new(JpegCodec),
            quality: 75,
            metric,
            sign: ScoreSign::Default,
        }
    }

    #[test]
    fn identity_group_equals_direct_codec_pass() {
        let img = photo_like(48, 40, 3);
        let l = labeler(vec![vec!["identity"]], Arc::new(ProxyNr::default()));
        let (r, pre) = l.evaluate_group("a", &img, &l.groups[0]).unwrap();
        assert_eq!(pre, img);
        let bytes = crate::codec::jpeg::encode(&img, 75).unwrap();
        assert_eq!(r.raw_bpp, 8.0 * bytes.len() as f64 / (48.0 * 40.0));
        let decoded = crate::codec::jpeg::decode(&bytes).unwrap();
        assert_eq!(r.raw_quality, crate::metrics::proxy_nr_score(&decoded, &Default::default()).unwrap());
    }

    #[test]
    fn full_reference_metric_uses_original() {
        let img = photo_like(48, 40, 4);
        let l = labeler(vec![vec!["identity"]], Arc::new(Psnr));
        let (r, _) = l.evaluate_group("a", &img, &l.groups[0]).unwrap();
        let decoded = crate::codec::jpeg::decode(&crate::codec::jpeg::encode(&img, 75).unwrap()).unwrap();
        assert_eq!(r.raw_quality, crate::metrics::psnr(&decoded, &img).unwrap());
    }

    #[test]
    fn denoising_lowers_rate_on_noisy_input() {
        let img = add_gaussian_noise(&photo_like(64, 48, 5), 15.0, 6);
        let l = labeler(vec![vec!["identity"], vec!["nlm"]], Arc::new(ProxyNr::default()));
        let out = l.label_image("n", &img).unwrap();
        assert!(out.table[1].raw_bpp < out.table[0].raw_bpp, "{:?}", out.table);
    }

    #[test]
    fn single_group_always_wins() {
        let img = photo_like(32, 32, 9);
        let l = labeler(vec![vec!["detail"]], Arc::new(ProxyNr::default()));
        let out = l.label_image("s", &img).unwrap();
        assert_eq!(out.j_star, 0);
        assert_eq!(out.label, DetailFilter.apply(&img).unwrap());
    }

    #[test]
    fn failing_groups_are_reported() {
        let img = photo_like(32, 32, 9);
        let l = labeler(vec![vec!["identity"], vec!["missing"]], Arc::new(ProxyNr::default()));
        let out = l.label_image("f", &img).unwrap();
        assert_eq!(out.table.len(), 1);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].0, 1);
        let bad = labeler(vec![vec!["missing"]], Arc::new(ProxyNr::default()));
        assert!(matches!(bad.label_image("f", &img), Err(LabelError::AllGroupsFailed(_))));
        let none = labeler(vec![], Arc::new(ProxyNr::default()));
        assert!(matches!(none.label_image("f", &img), Err(LabelError::NoGroups)));
    }

    struct Counting {
        calls: AtomicUsize,
    }

    impl Codec for Counting {
        fn name(&self) -> &str {
            "counting-jpeg"
        }

        fn encode(&self, img: &ImageBuffer, quality: u8) -> Result<Vec<u8>, crate::codec::CodecError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            JpegCodec.encode(img, quality)
        }

        fn decode(&self, bytes: &[u8]) -> Result<ImageBuffer, crate::codec::CodecError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            JpegCodec.decode(bytes)
        }
    }

    fn small_corpus(dir: &Path, n: usize) -> Vec<CorpusEntry> {
        (0..n)
            .map(|i| {
                let path = dir.join(format!("img{i}.png"));
                save_image(&photo_like(40, 32, 100 + i as u64), &path, ImageFormat::Png).unwrap();
                CorpusEntry { id: format!("img{i}"), path, split: "train".into() }
            })
            .collect()
    }

    #[test]
    fn corpus_labeling_resumes_without_codec_calls() {
        let dir = tempfile::tempdir().unwrap();
        let entries = small_corpus(dir.path(), 3);
        let counting = Arc::new(Counting { calls: AtomicUsize::new(0) });
        let mut l = labeler(vec![vec!["identity"], vec!["nlm"], vec!["detail"], vec!["nlm", "detail"]], Arc::new(ProxyNr::default()));
        l.codec = counting.clone();
        let out = dir.path().join("out");
        let first = l.label_corpus(&entries, &out, 2).unwrap();
        assert!(first.is_complete());
        assert_eq!(first.labeled, 3);
        let ledger: Vec<ScoreRecord> = read_jsonl(&out.join(LEDGER_FILE)).unwrap();
        assert_eq!(ledger.len(), 3 * 4);
        let calls = counting.calls.load(Ordering::SeqCst);
        assert_eq!(calls, 3 * 4 * 2);

        std::fs::remove_file(out.join(LABEL_DIR).join("img1.png")).unwrap();
        let second = l.label_corpus(&entries, &out, 2).unwrap();
        assert_eq!(counting.calls.load(Ordering::SeqCst), calls);
        assert_eq!(second.skipped, 3);
        assert_eq!(second.records, first.records);
        assert!(out.join(LABEL_DIR).join("img1.png").exists());
        let relabeled: Vec<ScoreRecord> = read_jsonl(&out.join(LEDGER_FILE)).unwrap();
        assert_eq!(relabeled, ledger);
        let manifest: Vec<LabelRecord> = read_jsonl(&out.join(LABELS_FILE)).unwrap();
        assert_eq!(manifest, first.records);
    }

    #[test]
    fn empty_manifest_is_success() {
        let dir = tempfile::tempdir().unwrap();
        let l = labeler(vec![vec!["identity"]], Arc::new(ProxyNr::default()));
        let r = l.label_corpus(&[], dir.path(), 4).unwrap();
        assert!(r.is_complete() && r.records.is_empty());
        assert_eq!(std::fs::read_to_string(dir.path().join(LABELS_FILE)).unwrap(), "");
    }

    #[test]
    fn unreadable_image_is_a_recorded_failure() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = small_corpus(dir.path(), 2);
        entries.push(CorpusEntry { id: "ghost".into(), path: dir.path().join("ghost.png"), split: "train".into() });
        let l = labeler(vec![vec!["identity"], vec!["detail"]], Arc::new(ProxyNr::default()));
        let r = l.label_corpus(&entries, &dir.path().join("out"), 2).unwrap();
        assert_eq!(r.labeled, 2);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].id, "ghost");
    }
}
