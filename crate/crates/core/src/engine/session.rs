use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::annotation::{
    apply_verdict, is_stale, oracle_verdict, pseudo_labels, AnnotationLedger, LedgerRecord,
    Reassignment, Verdict, VerdictSource,
};
use crate::clustering::{dbscan, jaccard_distance, knn_lists, ClusterContext, ClusterSet};
use crate::dataset::{
    l2_normalize, split_query_gallery, with_labels_sealed, EmbeddingDataset, QueryGallerySplit,
};
use crate::evaluation::{
    evaluate_retrieval, nmi, pairwise_f1, true_identities, EvalReport, RetrievalMetrics,
};
use crate::selection::{
    budget_schedule, build_stage_pairs, greedy_pick, greedy_select, BudgetSchedule, PairCandidate,
    SelectionState, Stage,
};
use crate::trainer::{init_memory, train_epoch, Projection};

use super::{EngineConfig, EngineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Selecting(Stage),
    Training,
    Done,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Selecting(Stage::Intra) => "INTRA",
            Phase::Selecting(Stage::Inter) => "INTER",
            Phase::Training => "training",
            Phase::Done => "done",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A pair waiting for a verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendingPair {
    pub pair_id: u64,
    pub pair: PairCandidate,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Pair(PendingPair),
    /// Selection for the epoch is over; call [`Session::advance`].
    Training,
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submitted {
    pub seq: u64,
    pub reassignment: Reassignment,
}

/// Everything needed to rebuild a session at the start of an epoch, apart
/// from the projection weights (stored as a checkpoint).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub config: EngineConfig,
    pub epoch: usize,
    pub reports: Vec<EvalReport>,
    pub ledger: AnnotationLedger,
    pub next_pair_id: u64,
}

pub struct Session {
    config: EngineConfig,
    dataset: Arc<EmbeddingDataset>,
    features: Vec<Vec<f64>>,
    g_descriptors: Option<Vec<Vec<f64>>>,
    schedule: BudgetSchedule,
    split: Option<QueryGallerySplit>,

    epoch: usize,
    phase: Phase,
    projection: Projection,
    embeddings: Vec<Vec<f64>>,
    clusters: ClusterSet,
    selection: SelectionState,
    ledger: AnnotationLedger,
    reports: Vec<EvalReport>,

    candidates: Vec<PairCandidate>,
    queue: VecDeque<PairCandidate>,
    stage_left: usize,
    inter_reserved: usize,
    pending: Option<PendingPair>,
    next_pair_id: u64,
    stale_skipped: usize,
    boundary: Option<(RunSnapshot, Projection)>,
}

impl Session {
    /// Starts a fresh run at epoch 0.
    pub fn new(config: EngineConfig, dataset: &EmbeddingDataset) -> Result<Self> {
        config.validate()?;
        let d_base = dataset.feature_dim();
        let d_emb = config.d_emb.unwrap_or(d_base);
        let projection = Projection::init(d_base, d_emb, config.learning_rate, config.seed)?;
        let ledger = AnnotationLedger::new(config.total_budget);
        let mut session = Self::assemble(config, dataset, projection, ledger, Vec::new(), 0, 0)?;
        session.begin_epoch()?;
        Ok(session)
    }

    /// Rebuilds a session at the epoch boundary described by `snapshot`.
    pub fn restore(
        config: EngineConfig,
        dataset: &EmbeddingDataset,
        snapshot: RunSnapshot,
        mut projection: Projection,
    ) -> Result<Self> {
        config.validate()?;
        if snapshot.config != config {
            return Err(EngineError::Snapshot(
                "snapshot was taken under a different config".into(),
            ));
        }
        if projection.d_base() != dataset.feature_dim() {
            return Err(EngineError::Snapshot(
                "checkpoint does not match the dataset".into(),
            ));
        }
        projection.learning_rate = config.learning_rate;
        let mut session = Self::assemble(
            config,
            dataset,
            projection,
            snapshot.ledger,
            snapshot.reports,
            snapshot.epoch,
            snapshot.next_pair_id,
        )?;
        session.begin_epoch()?;
        Ok(session)
    }

    fn assemble(
        config: EngineConfig,
        dataset: &EmbeddingDataset,
        projection: Projection,
        ledger: AnnotationLedger,
        reports: Vec<EvalReport>,
        epoch: usize,
        next_pair_id: u64,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(EngineError::Config("dataset is empty".into()));
        }
        let dataset = if config.normalize {
            l2_normalize(dataset)?
        } else {
            dataset.clone()
        };
        let schedule = budget_schedule(config.total_budget, config.epochs)?;
        let split = if dataset.has_identities() {
            split_query_gallery(&dataset, config.query_fraction, config.seed.wrapping_add(1)).ok()
        } else {
            None
        };
        let features = dataset.features();
        let g_descriptors = dataset.g_descriptors();
        let clusters = ClusterSet::from_assignment(
            &vec![None; dataset.len()],
            &ClusterContext::new(&features, None, config.gamma)?,
        )?;
        Ok(Session {
            selection: SelectionState::new([], config.total_budget, config.alpha),
            config,
            dataset: Arc::new(dataset),
            features,
            g_descriptors,
            schedule,
            split,
            epoch,
            phase: Phase::Training,
            projection,
            embeddings: Vec::new(),
            clusters,
            ledger,
            reports,
            candidates: Vec::new(),
            queue: VecDeque::new(),
            stage_left: 0,
            inter_reserved: 0,
            pending: None,
            next_pair_id,
            stale_skipped: 0,
            boundary: None,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// The dataset as the engine sees it (normalized when configured).
    pub fn dataset(&self) -> &Arc<EmbeddingDataset> {
        &self.dataset
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn clusters(&self) -> &ClusterSet {
        &self.clusters
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn ledger(&self) -> &AnnotationLedger {
        &self.ledger
    }

    pub fn selection(&self) -> &SelectionState {
        &self.selection
    }

    pub fn reports(&self) -> &[EvalReport] {
        &self.reports
    }

    pub fn schedule(&self) -> &BudgetSchedule {
        &self.schedule
    }

    pub fn budget_used(&self) -> usize {
        self.ledger.budget_used()
    }

    pub fn budget_total(&self) -> usize {
        self.ledger.budget_total()
    }

    /// Picks dropped because an earlier verdict made them stale.
    pub fn stale_skipped(&self) -> usize {
        self.stale_skipped
    }

    pub fn pending(&self) -> Option<&PendingPair> {
        self.pending.as_ref()
    }

    /// State at the start of the current epoch, with the projection that
    /// produced its embeddings.
    pub fn boundary(&self) -> Option<&(RunSnapshot, Projection)> {
        self.boundary.as_ref()
    }

    fn context(&self) -> Result<ClusterContext<'_>> {
        Ok(ClusterContext::new(
            &self.embeddings,
            self.g_descriptors.as_deref(),
            self.config.gamma,
        )?)
    }

    fn cluster(&self) -> Result<ClusterSet> {
        let n = self.embeddings.len();
        let ctx = self.context()?;
        if n < 2 {
            return Ok(ClusterSet::from_assignment(&vec![None; n], &ctx)?);
        }
        let k = self.config.k_reciprocal.min(n - 1);
        let neighbors = knn_lists(&self.embeddings, k)?;
        let distances = jaccard_distance(&neighbors, k)?;
        let assignment = dbscan(&distances, self.config.eps, self.config.min_pts)?;
        Ok(ClusterSet::from_assignment(&assignment, &ctx)?)
    }

    /// Re-applies earlier splits and merges that still pose a question
    /// against the fresh clustering. No budget is consumed.
    fn carry_over(&mut self) -> Result<()> {
        let decisive: Vec<(PairCandidate, Verdict)> = self
            .ledger
            .verdicts()
            .iter()
            .filter(|v| match v.pair.stage {
                Stage::Intra => !v.v.is_same(),
                Stage::Inter => v.v.is_same(),
            })
            .map(|v| (v.pair.clone(), v.v))
            .collect();
        let ctx = ClusterContext::new(
            &self.embeddings,
            self.g_descriptors.as_deref(),
            self.config.gamma,
        )?;
        for (pair, v) in decisive {
            if !is_stale(&self.clusters, &pair) {
                apply_verdict(&mut self.clusters, &pair, v, &ctx)?;
            }
        }
        Ok(())
    }

    fn begin_epoch(&mut self) -> Result<()> {
        self.pending = None;
        self.candidates.clear();
        self.queue.clear();
        self.embeddings = self.projection.embed_all(&self.features)?;
        if self.epoch >= self.config.epochs {
            self.phase = Phase::Done;
            return Ok(());
        }
        self.boundary = Some((
            RunSnapshot {
                config: self.config.clone(),
                epoch: self.epoch,
                reports: self.reports.clone(),
                ledger: self.ledger.clone(),
                next_pair_id: self.next_pair_id,
            },
            self.projection.clone(),
        ));
        self.clusters = with_labels_sealed(|| self.cluster())?;
        if self.config.carry_over {
            self.carry_over()?;
        }
        let allowance = self
            .schedule
            .cumulative(self.epoch)
            .saturating_sub(self.ledger.budget_used())
            .min(self.ledger.remaining());
        let intra = self.config.intra_share(allowance);
        self.inter_reserved = allowance - intra;
        self.selection = SelectionState::new(
            self.clusters.cluster_ids(),
            self.config.total_budget,
            self.config.alpha,
        );
        log::debug!(
            "epoch {}: {} clusters, {} noise, allowance {allowance}",
            self.epoch,
            self.clusters.len(),
            self.clusters.noise_ids().len()
        );
        self.start_stage(Stage::Intra, intra)
    }

    fn start_stage(&mut self, stage: Stage, budget: usize) -> Result<()> {
        self.phase = Phase::Selecting(stage);
        self.stage_left = budget;
        let candidates = build_stage_pairs(&self.clusters, stage, self.ledger.asked())?;
        if self.config.interleave {
            self.candidates = candidates;
        } else {
            let outcome =
                with_labels_sealed(|| greedy_select(candidates, &mut self.selection, budget));
            self.queue = outcome.selected.into();
        }
        Ok(())
    }

    fn finish_stage(&mut self, stage: Stage) -> Result<()> {
        self.candidates.clear();
        self.queue.clear();
        match stage {
            Stage::Intra => {
                // A stage with no share of the budget stays off entirely.
                let leftover = if self.config.stage_split < 1.0 {
                    self.stage_left
                } else {
                    0
                };
                self.start_stage(Stage::Inter, leftover + self.inter_reserved)
            }
            Stage::Inter => {
                self.phase = Phase::Training;
                Ok(())
            }
        }
    }

    /// The pair to annotate next. Repeated calls return the same pending
    /// pair until a verdict for it arrives.
    pub fn next_pair(&mut self) -> Result<Step> {
        loop {
            if let Some(p) = &self.pending {
                return Ok(Step::Pair(p.clone()));
            }
            let stage = match self.phase {
                Phase::Done => return Ok(Step::Done),
                Phase::Training => return Ok(Step::Training),
                Phase::Selecting(stage) => stage,
            };
            if self.stage_left == 0 {
                self.finish_stage(stage)?;
                continue;
            }
            let pick = if self.config.interleave {
                with_labels_sealed(|| greedy_pick(&self.candidates, &self.selection))
                    .map(|i| self.candidates.swap_remove(i))
            } else {
                self.queue.pop_front()
            };
            let Some(pair) = pick else {
                self.finish_stage(stage)?;
                continue;
            };
            if is_stale(&self.clusters, &pair) || self.ledger.was_asked(pair.a, pair.b) {
                self.stale_skipped += 1;
                continue;
            }
            let pending = PendingPair {
                pair_id: self.next_pair_id,
                pair,
                epoch: self.epoch,
            };
            self.next_pair_id += 1;
            self.pending = Some(pending.clone());
            return Ok(Step::Pair(pending));
        }
    }

    /// Records a verdict for the pending pair and applies it to the
    /// clusters. Ids of pairs that are no longer pending are stale.
    pub fn submit_verdict(
        &mut self,
        pair_id: u64,
        v: Verdict,
        source: VerdictSource,
    ) -> Result<Submitted> {
        match &self.pending {
            Some(p) if p.pair_id == pair_id => {}
            _ if pair_id < self.next_pair_id => return Err(EngineError::StalePair(pair_id)),
            _ => return Err(EngineError::UnknownPair(pair_id)),
        }
        let pending = self.pending.take().unwrap();
        let pair = pending.pair;
        if is_stale(&self.clusters, &pair) {
            return Err(EngineError::StalePair(pair_id));
        }
        let seq = self
            .ledger
            .record(pair.clone(), v, source, self.epoch)?
            .sequence;
        let ctx = ClusterContext::new(
            &self.embeddings,
            self.g_descriptors.as_deref(),
            self.config.gamma,
        )?;
        let reassignment = apply_verdict(&mut self.clusters, &pair, v, &ctx)?;
        self.stage_left -= 1;
        if self.config.interleave {
            self.selection.record(pair);
        }
        if let Reassignment::Split { fresh, .. } = reassignment {
            self.selection.register_clusters([fresh]);
        }
        Ok(Submitted { seq, reassignment })
    }

    /// Trains on the current pseudo-labels, evaluates, and opens the next
    /// epoch.
    pub fn advance(&mut self) -> Result<EvalReport> {
        if self.phase != Phase::Training {
            return Err(EngineError::WrongPhase {
                expected: "training",
                found: self.phase.to_string(),
            });
        }
        let labels = pseudo_labels(&self.clusters);
        let mean_loss = if self.clusters.is_empty() {
            0.0
        } else {
            let seed =
                self.config.seed ^ (self.epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let stats = with_labels_sealed(|| -> Result<_> {
                let mut bank = init_memory(
                    &labels,
                    &self.embeddings,
                    self.config.momentum,
                    self.config.tau,
                )?;
                Ok(train_epoch(
                    &mut self.projection,
                    &self.features,
                    &labels,
                    &mut bank,
                    self.config.batch_size,
                    seed,
                )?)
            })?;
            stats.mean_loss
        };
        let report = self.evaluate(&labels, mean_loss)?;
        log::info!(
            "epoch {} done: budget {}/{}, {} clusters, f1 {:?}, mAP {:?}",
            report.epoch,
            report.budget_used,
            self.ledger.budget_total(),
            report.num_clusters,
            report.pairwise_f1,
            report.map
        );
        self.reports.push(report.clone());
        self.epoch += 1;
        self.begin_epoch()?;
        Ok(report)
    }

    fn evaluate(&self, labels: &[Option<usize>], mean_loss: f64) -> Result<EvalReport> {
        let mut report = EvalReport {
            epoch: self.epoch,
            budget_used: self.ledger.budget_used(),
            num_clusters: self.clusters.len(),
            num_noise: self.clusters.noise_ids().len(),
            mean_loss,
            map: None,
            cmc: None,
            pairwise_f1: None,
            nmi: None,
        };
        if !self.dataset.has_identities() {
            return Ok(report);
        }
        let truth = true_identities(&self.dataset)?;
        report.pairwise_f1 = Some(pairwise_f1(labels, &truth)?);
        report.nmi = Some(nmi(labels, &truth)?);
        if let Some(split) = &self.split {
            let embeddings = self.projection.embed_all(&self.features)?;
            let m = evaluate_retrieval(&split.query, &split.gallery, &embeddings, &truth, None)?;
            report.map = Some(m.map);
            report.cmc = Some(m.cmc);
        }
        Ok(report)
    }
}

/// Supplies verdicts for pairs the session asks about.
pub trait Annotator {
    fn annotate(
        &mut self,
        pair: &PendingPair,
        dataset: &EmbeddingDataset,
    ) -> Result<(Verdict, VerdictSource)>;
}

/// Answers from the dataset's ground-truth identities.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleAnnotator;

impl Annotator for OracleAnnotator {
    fn annotate(
        &mut self,
        pair: &PendingPair,
        dataset: &EmbeddingDataset,
    ) -> Result<(Verdict, VerdictSource)> {
        Ok((oracle_verdict(&pair.pair, dataset)?, VerdictSource::Oracle))
    }
}

/// Answers from a recorded ledger, checking that the session asks the same
/// pairs in the same order.
#[derive(Debug, Default, Clone)]
pub struct ReplayAnnotator {
    records: VecDeque<LedgerRecord>,
}

impl ReplayAnnotator {
    pub fn new(records: impl IntoIterator<Item = LedgerRecord>) -> Self {
        ReplayAnnotator {
            records: records.into_iter().collect(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.records.len()
    }
}

impl Annotator for ReplayAnnotator {
    fn annotate(
        &mut self,
        pair: &PendingPair,
        _dataset: &EmbeddingDataset,
    ) -> Result<(Verdict, VerdictSource)> {
        let rec = self
            .records
            .pop_front()
            .ok_or(EngineError::ReplayExhausted)?;
        let p = &pair.pair;
        if (rec.a, rec.b, rec.stage, rec.epoch) != (p.a, p.b, p.stage, pair.epoch) {
            return Err(EngineError::ReplayDivergence {
                seq: rec.seq,
                reason: format!(
                    "recorded ({}, {}, {}, epoch {}), session asked ({}, {}, {}, epoch {})",
                    rec.a, rec.b, rec.stage, rec.epoch, p.a, p.b, p.stage, pair.epoch
                ),
            });
        }
        Ok((rec.v, rec.source))
    }
}

/// Annotates until the current epoch's selection ends, then trains.
/// Returns `None` once the run is over.
pub fn run_iteration(
    session: &mut Session,
    annotator: &mut dyn Annotator,
) -> Result<Option<EvalReport>> {
    loop {
        match session.next_pair()? {
            Step::Pair(p) => {
                let (v, source) = annotator.annotate(&p, session.dataset())?;
                session.submit_verdict(p.pair_id, v, source)?;
            }
            Step::Training => return session.advance().map(Some),
            Step::Done => return Ok(None),
        }
    }
}

/// Retrieval metrics of `projection` on the query/gallery split a session
/// with `config` would use.
pub fn evaluate_projection(
    config: &EngineConfig,
    dataset: &EmbeddingDataset,
    projection: &Projection,
) -> Result<RetrievalMetrics> {
    if projection.d_base() != dataset.feature_dim() {
        return Err(EngineError::Snapshot(
            "checkpoint does not match the dataset".into(),
        ));
    }
    let dataset = if config.normalize {
        l2_normalize(dataset)?
    } else {
        dataset.clone()
    };
    let split = split_query_gallery(&dataset, config.query_fraction, config.seed.wrapping_add(1))?;
    let truth = true_identities(&dataset)?;
    let embeddings = projection.embed_all(&dataset.features())?;
    Ok(evaluate_retrieval(
        &split.query,
        &split.gallery,
        &embeddings,
        &truth,
        None,
    )?)
}

pub fn run_to_completion(
    session: &mut Session,
    annotator: &mut dyn Annotator,
) -> Result<Vec<EvalReport>> {
    while run_iteration(session, annotator)?.is_some() {}
    Ok(session.reports().to_vec())
}
