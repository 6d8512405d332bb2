//! Verdicts, the annotation ledger, and cluster re-assignment.
//!
//! A negative verdict on an INTRA pair splits the cluster around its two
//! endpoints; a positive verdict on an INTER pair merges the two clusters.
//! The other two outcomes leave the partition untouched. Pairs whose
//! endpoints were moved by an earlier verdict are rejected as stale and do
//! not consume budget.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{ClusterContext, ClusterId, ClusterSet, ClusteringError};
use crate::dataset::{DatasetError, EmbeddingDataset, LabelAccess};
use crate::selection::{PairCandidate, PairKey, Stage};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("pair ({0}, {1}) is stale")]
    Stale(usize, usize),
    #[error("expected an {expected} pair, got {found}")]
    WrongStage { expected: Stage, found: Stage },
    #[error("verdict must be 0 or 1, got {0}")]
    InvalidVerdict(i64),
    #[error("annotation budget of {0} is exhausted")]
    BudgetExhausted(usize),
    #[error("pair ({0}, {1}) was already annotated")]
    AlreadyAsked(usize, usize),
    #[error("unknown sample {0}")]
    UnknownSample(usize),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("ledger io: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger record on line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = AnnotationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub enum Verdict {
    Different,
    Same,
}

impl Verdict {
    pub fn is_same(self) -> bool {
        self == Verdict::Same
    }
}

impl TryFrom<i64> for Verdict {
    type Error = AnnotationError;

    fn try_from(v: i64) -> Result<Self> {
        match v {
            0 => Ok(Verdict::Different),
            1 => Ok(Verdict::Same),
            other => Err(AnnotationError::InvalidVerdict(other)),
        }
    }
}

impl From<Verdict> for u8 {
    fn from(v: Verdict) -> u8 {
        match v {
            Verdict::Different => 0,
            Verdict::Same => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VerdictSource {
    Oracle,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationVerdict {
    pub pair: PairCandidate,
    pub v: Verdict,
    pub source: VerdictSource,
    pub sequence: u64,
    pub epoch: usize,
}

/// One line of the exported ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub seq: u64,
    pub a: usize,
    pub b: usize,
    pub stage: Stage,
    pub v: Verdict,
    pub source: VerdictSource,
    pub epoch: usize,
}

impl From<&AnnotationVerdict> for LedgerRecord {
    fn from(v: &AnnotationVerdict) -> Self {
        LedgerRecord {
            seq: v.sequence,
            a: v.pair.a,
            b: v.pair.b,
            stage: v.pair.stage,
            v: v.v,
            source: v.source,
            epoch: v.epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LedgerRepr", into = "LedgerRepr")]
pub struct AnnotationLedger {
    verdicts: Vec<AnnotationVerdict>,
    asked: HashSet<PairKey>,
    budget_total: usize,
}

/// Serialized form; `asked` is rebuilt from the verdicts.
#[derive(Serialize, Deserialize)]
struct LedgerRepr {
    budget_total: usize,
    verdicts: Vec<AnnotationVerdict>,
}

impl From<AnnotationLedger> for LedgerRepr {
    fn from(l: AnnotationLedger) -> Self {
        LedgerRepr {
            budget_total: l.budget_total,
            verdicts: l.verdicts,
        }
    }
}

impl TryFrom<LedgerRepr> for AnnotationLedger {
    type Error = AnnotationError;

    fn try_from(r: LedgerRepr) -> Result<Self> {
        let mut ledger = AnnotationLedger::new(r.budget_total);
        for v in r.verdicts {
            ledger.record(v.pair, v.v, v.source, v.epoch)?;
        }
        Ok(ledger)
    }
}

impl AnnotationLedger {
    pub fn new(budget_total: usize) -> Self {
        AnnotationLedger {
            verdicts: Vec::new(),
            asked: HashSet::new(),
            budget_total,
        }
    }

    pub fn budget_total(&self) -> usize {
        self.budget_total
    }

    pub fn budget_used(&self) -> usize {
        self.verdicts.len()
    }

    pub fn remaining(&self) -> usize {
        self.budget_total - self.verdicts.len()
    }

    pub fn verdicts(&self) -> &[AnnotationVerdict] {
        &self.verdicts
    }

    pub fn asked(&self) -> &HashSet<PairKey> {
        &self.asked
    }

    pub fn was_asked(&self, a: usize, b: usize) -> bool {
        self.asked.contains(&PairKey::new(a, b))
    }

    pub fn record(
        &mut self,
        pair: PairCandidate,
        v: Verdict,
        source: VerdictSource,
        epoch: usize,
    ) -> Result<&AnnotationVerdict> {
        if self.verdicts.len() >= self.budget_total {
            return Err(AnnotationError::BudgetExhausted(self.budget_total));
        }
        if !self.asked.insert(pair.key()) {
            return Err(AnnotationError::AlreadyAsked(pair.a, pair.b));
        }
        let sequence = self.verdicts.last().map_or(0, |l| l.sequence + 1);
        self.verdicts.push(AnnotationVerdict {
            pair,
            v,
            source,
            sequence,
            epoch,
        });
        Ok(self.verdicts.last().unwrap())
    }

    pub fn records(&self) -> impl Iterator<Item = LedgerRecord> + '_ {
        self.verdicts.iter().map(LedgerRecord::from)
    }

    pub fn export_ndjson(&self, mut out: impl Write) -> Result<()> {
        for r in self.records() {
            serde_json::to_writer(&mut out, &r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn read_ledger(input: impl BufRead) -> Result<Vec<LedgerRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| AnnotationError::Record {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

/// Ground-truth verification: `Same` iff both samples share an identity.
pub fn oracle_verdict(pair: &PairCandidate, dataset: &EmbeddingDataset) -> Result<Verdict> {
    let access = LabelAccess::unlock();
    let identity = |id: usize| -> Result<u32> {
        dataset
            .sample(id)
            .ok_or(AnnotationError::UnknownSample(id))?
            .identity(&access)?
            .ok_or(AnnotationError::Dataset(DatasetError::MissingIdentity(id)))
    };
    Ok(if identity(pair.a)? == identity(pair.b)? {
        Verdict::Same
    } else {
        Verdict::Different
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reassignment {
    Unchanged,
    Split {
        kept: ClusterId,
        fresh: ClusterId,
    },
    Merged {
        into: ClusterId,
        absorbed: ClusterId,
    },
}

/// True when the pair no longer poses a meaningful question for `clusters`.
pub fn is_stale(clusters: &ClusterSet, pair: &PairCandidate) -> bool {
    let (ca, cb) = (clusters.cluster_of(pair.a), clusters.cluster_of(pair.b));
    match pair.stage {
        Stage::Intra => ca.is_none() || ca != cb,
        Stage::Inter => ca.is_none() || cb.is_none() || ca == cb,
    }
}

pub fn apply_intra_verdict(
    clusters: &mut ClusterSet,
    pair: &PairCandidate,
    v: Verdict,
    ctx: &ClusterContext<'_>,
) -> Result<Reassignment> {
    if pair.stage != Stage::Intra {
        return Err(AnnotationError::WrongStage {
            expected: Stage::Intra,
            found: pair.stage,
        });
    }
    if is_stale(clusters, pair) {
        return Err(AnnotationError::Stale(pair.a, pair.b));
    }
    if v.is_same() {
        return Ok(Reassignment::Unchanged);
    }
    let cluster = clusters.cluster_of(pair.a).unwrap();
    let fresh = clusters.split(cluster, pair.a, pair.b, ctx)?;
    Ok(Reassignment::Split {
        kept: cluster,
        fresh,
    })
}

pub fn apply_inter_verdict(
    clusters: &mut ClusterSet,
    pair: &PairCandidate,
    v: Verdict,
    ctx: &ClusterContext<'_>,
) -> Result<Reassignment> {
    if pair.stage != Stage::Inter {
        return Err(AnnotationError::WrongStage {
            expected: Stage::Inter,
            found: pair.stage,
        });
    }
    if is_stale(clusters, pair) {
        return Err(AnnotationError::Stale(pair.a, pair.b));
    }
    if !v.is_same() {
        return Ok(Reassignment::Unchanged);
    }
    let (ca, cb) = (
        clusters.cluster_of(pair.a).unwrap(),
        clusters.cluster_of(pair.b).unwrap(),
    );
    let into = clusters.merge(ca, cb, ctx)?;
    Ok(Reassignment::Merged {
        into,
        absorbed: ca.max(cb),
    })
}

pub fn apply_verdict(
    clusters: &mut ClusterSet,
    pair: &PairCandidate,
    v: Verdict,
    ctx: &ClusterContext<'_>,
) -> Result<Reassignment> {
    match pair.stage {
        Stage::Intra => apply_intra_verdict(clusters, pair, v, ctx),
        Stage::Inter => apply_inter_verdict(clusters, pair, v, ctx),
    }
}

/// Dense training labels `0..|C|` in ascending cluster-id order; noise maps
/// to `None`.
pub fn pseudo_labels(clusters: &ClusterSet) -> Vec<Option<usize>> {
    let dense: std::collections::BTreeMap<ClusterId, usize> = clusters
        .cluster_ids()
        .enumerate()
        .map(|(i, c)| (c, i))
        .collect();
    clusters
        .assignment()
        .iter()
        .map(|a| a.map(|c| dense[&c]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;

    fn embeddings() -> Vec<Vec<f64>> {
        vec![
            vec![0.0, 0.0],
            vec![4.0, 0.0],
            vec![3.0, 0.0],
            vec![2.0, 0.0],
        ]
    }

    fn intra(a: usize, b: usize, c: ClusterId) -> PairCandidate {
        PairCandidate {
            a,
            b,
            cluster_a: c,
            cluster_b: c,
            stage: Stage::Intra,
            fallibility: -1.0,
        }
    }

    fn inter(a: usize, b: usize, ca: ClusterId, cb: ClusterId) -> PairCandidate {
        PairCandidate {
            a,
            b,
            cluster_a: ca,
            cluster_b: cb,
            stage: Stage::Inter,
            fallibility: 1.0,
        }
    }

    #[test]
    fn oracle_examples() {
        let ds = EmbeddingDataset::from_samples(vec![
            Sample::new(0, vec![0.0], None, Some(3), None),
            Sample::new(1, vec![0.0], None, Some(3), None),
            Sample::new(2, vec![0.0], None, Some(7), None),
        ])
        .unwrap();
        assert_eq!(
            oracle_verdict(&inter(0, 1, 0, 1), &ds).unwrap(),
            Verdict::Same
        );
        assert_eq!(
            oracle_verdict(&inter(0, 2, 0, 1), &ds).unwrap(),
            Verdict::Different
        );
        let unlabelled = EmbeddingDataset::from_samples(vec![
            Sample::new(0, vec![0.0], None, None, None),
            Sample::new(1, vec![0.0], None, None, None),
        ])
        .unwrap();
        assert!(oracle_verdict(&inter(0, 1, 0, 1), &unlabelled).is_err());
    }

    #[test]
    fn intra_split_divides_by_nearest_seed() {
        let e = embeddings();
        let ctx = ClusterContext::new(&e, None, 0.0).unwrap();
        let mut cs = ClusterSet::from_assignment(&[Some(0), Some(0), Some(0), None], &ctx).unwrap();
        let same = apply_intra_verdict(&mut cs, &intra(0, 1, 0), Verdict::Same, &ctx).unwrap();
        assert_eq!(same, Reassignment::Unchanged);
        let out = apply_intra_verdict(&mut cs, &intra(0, 1, 0), Verdict::Different, &ctx).unwrap();
        assert_eq!(out, Reassignment::Split { kept: 0, fresh: 1 });
        assert_eq!(cs.get(0).unwrap().members, vec![0]);
        assert_eq!(cs.get(1).unwrap().members, vec![1, 2]);
        // now stale
        assert!(matches!(
            apply_intra_verdict(&mut cs, &intra(0, 1, 0), Verdict::Different, &ctx),
            Err(AnnotationError::Stale(0, 1))
        ));
    }

    #[test]
    fn two_member_split_gives_singletons() {
        let e = embeddings();
        let ctx = ClusterContext::new(&e, None, 0.0).unwrap();
        let mut cs = ClusterSet::from_assignment(&[Some(0), Some(0), None, None], &ctx).unwrap();
        apply_intra_verdict(&mut cs, &intra(0, 1, 0), Verdict::Different, &ctx).unwrap();
        assert_eq!(cs.len(), 2);
        assert!(cs.clusters().all(|c| c.len() == 1));
    }

    #[test]
    fn inter_merge() {
        let e = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let ctx = ClusterContext::new(&e, None, 0.0).unwrap();
        let mut cs = ClusterSet::from_assignment(&[Some(0), Some(1)], &ctx).unwrap();
        let pair = inter(0, 1, 0, 1);
        assert_eq!(
            apply_inter_verdict(&mut cs, &pair, Verdict::Different, &ctx).unwrap(),
            Reassignment::Unchanged
        );
        assert_eq!(
            apply_inter_verdict(&mut cs, &pair, Verdict::Same, &ctx).unwrap(),
            Reassignment::Merged {
                into: 0,
                absorbed: 1
            }
        );
        let merged = cs.get(0).unwrap();
        assert_eq!(merged.f_mean, vec![1.0, 0.0]);
        assert_eq!(merged.var_diag, vec![1.0, 0.0]);
        assert!(matches!(
            apply_inter_verdict(&mut cs, &pair, Verdict::Same, &ctx),
            Err(AnnotationError::Stale(0, 1))
        ));
    }

    #[test]
    fn wrong_stage_is_rejected() {
        let e = embeddings();
        let ctx = ClusterContext::new(&e, None, 0.0).unwrap();
        let mut cs = ClusterSet::from_assignment(&[Some(0), Some(0), Some(1), None], &ctx).unwrap();
        assert!(matches!(
            apply_inter_verdict(&mut cs, &intra(0, 1, 0), Verdict::Same, &ctx),
            Err(AnnotationError::WrongStage { .. })
        ));
    }

    #[test]
    fn pseudo_labels_are_dense() {
        let e = vec![vec![0.0]; 4];
        let ctx = ClusterContext::new(&e, None, 0.0).unwrap();
        let mut cs = ClusterSet::from_assignment(&[Some(4), Some(9), None, Some(4)], &ctx).unwrap();
        assert_eq!(pseudo_labels(&cs), vec![Some(0), Some(1), None, Some(0)]);
        cs.merge(4, 9, &ctx).unwrap();
        assert_eq!(pseudo_labels(&cs), vec![Some(0), Some(0), None, Some(0)]);
    }

    #[test]
    fn ledger_budget_and_roundtrip() {
        let mut ledger = AnnotationLedger::new(2);
        ledger
            .record(inter(0, 1, 0, 1), Verdict::Same, VerdictSource::Oracle, 0)
            .unwrap();
        assert!(matches!(
            ledger.record(inter(1, 0, 0, 1), Verdict::Same, VerdictSource::Oracle, 0),
            Err(AnnotationError::AlreadyAsked(1, 0))
        ));
        ledger
            .record(intra(2, 3, 2), Verdict::Different, VerdictSource::Human, 1)
            .unwrap();
        assert!(matches!(
            ledger.record(inter(4, 5, 0, 1), Verdict::Same, VerdictSource::Oracle, 1),
            Err(AnnotationError::BudgetExhausted(2))
        ));
        assert_eq!(ledger.budget_used(), 2);
        assert_eq!(ledger.asked().len(), 2);

        let mut buf = Vec::new();
        ledger.export_ndjson(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"seq":0,"a":0,"b":1,"stage":"INTER","v":1,"source":"ORACLE","epoch":0}"#
        );
        let json = serde_json::to_string(&ledger).unwrap();
        assert_eq!(
            serde_json::from_str::<AnnotationLedger>(&json).unwrap(),
            ledger
        );
        let back = read_ledger(buf.as_slice()).unwrap();
        assert_eq!(back, ledger.records().collect::<Vec<_>>());
        assert!(read_ledger(
            &br#"{"seq":0,"a":0,"b":1,"stage":"INTER","v":2,"source":"ORACLE","epoch":0}"#[..]
        )
        .is_err());
    }
}
