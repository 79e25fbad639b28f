//! Metric-learning training loop and the configuration-grid runner.
//!
//! One run: sample a P x K batch, embed it, mine tuples by the configured
//! strategy, evaluate the tuple loss (with fixed or batch-adaptive margins),
//! backpropagate the mean gradient, and apply a gradient-descent update.
//! The grid runner sweeps loss x sampling x margin combinations and scores
//! each trained model on evaluation corpora.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::{backward, forward, init_model, EmbedderConfig, EmbedderModel, Embedding};
use crate::error::{Error, Result};
use crate::features::Corpus;
use crate::losses::{
    adaptive_margin, quadruplet_loss, sq_dist, triplet_loss, LossKind, MarginMode, MarginSpec,
};
use crate::pipeline::{evaluate_model, EvalOptions};
use crate::sampling::{build_tuples, make_pk_batch, SamplingStrategy, TupleSet};

/// One pipeline realization: loss x sampling x margin, plus optimizer and
/// batch shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub sampling: SamplingStrategy,
    pub margin: MarginSpec,
    pub embedder: EmbedderConfig,
    pub learning_rate: f64,
    /// Momentum coefficient; 0 disables the velocity term.
    pub momentum: f64,
    pub steps: usize,
    /// Speakers per batch (P).
    pub batch_speakers: usize,
    /// Segments per speaker (K).
    pub batch_segments: usize,
    /// Seed for batch sampling and mining.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Triplet,
            sampling: SamplingStrategy::Random,
            margin: MarginSpec::default(),
            embedder: EmbedderConfig::default(),
            learning_rate: 1e-3,
            momentum: 0.0,
            steps: 500,
            batch_speakers: 8,
            batch_segments: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Argument("steps must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Argument("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Argument("momentum must be in [0, 1)".into()));
        }
        if self.batch_segments < 2 {
            return Err(Error::Argument(
                "batch_segments must be >= 2 to form anchor-positive pairs".into(),
            ));
        }
        let min_speakers = match self.loss {
            LossKind::Triplet => 2,
            LossKind::Quadruplet => 3,
        };
        if self.batch_speakers < min_speakers {
            return Err(Error::Argument(format!(
                "batch_speakers must be >= {min_speakers} for {:?}",
                self.loss
            )));
        }
        self.margin.validate()?;
        self.sampling.validate()?;
        self.embedder.validate()
    }

    /// Short key identifying the (sampling, loss, margin) cell.
    pub fn key(&self) -> ConfigKey {
        ConfigKey {
            sampling: self.sampling.display_name().to_string(),
            loss: self.loss.display_name().to_string(),
            margin: self.margin.display_name().to_string(),
        }
    }
}

/// Human-readable (sampling, loss, margin) triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigKey {
    pub sampling: String,
    pub loss: String,
    pub margin: String,
}

/// Record of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// Mean batch loss per step.
    pub loss_curve: Vec<f64>,
    pub wall_seconds: f64,
    /// Path of the saved checkpoint, when one was written.
    pub checkpoint: Option<String>,
    /// Self-consistency token over validation embeddings, when computed.
    pub validation_embedding_hash: Option<String>,
    /// DER on the primary evaluation corpus, when one was supplied.
    pub eval_der: Option<f64>,
}

/// A trained model together with its run record.
pub struct TrainOutcome {
    pub model: EmbedderModel,
    pub record: RunRecord,
}

/// Per-batch margins resolved for loss evaluation.
fn resolve_margins(
    margin: &MarginSpec,
    loss: LossKind,
    embeddings: &[Embedding],
    tuples: &TupleSet,
) -> Result<(f64, f64)> {
    match margin.mode {
        MarginMode::Fixed => Ok((margin.alpha1, margin.alpha2)),
        MarginMode::Adaptive => {
            let d_ap: Vec<f64> = tuples
                .tuples
                .iter()
                .map(|t| sq_dist(&embeddings[t.anchor], &embeddings[t.positive]))
                .collect();
            let d_an: Vec<f64> = tuples
                .tuples
                .iter()
                .map(|t| sq_dist(&embeddings[t.anchor], &embeddings[t.negative]))
                .collect();
            let alpha1 = adaptive_margin(&d_an, &d_ap, margin.floor1)?;
            let alpha2 = match loss {
                LossKind::Triplet => margin.alpha2,
                LossKind::Quadruplet => {
                    let d_qn: Vec<f64> = tuples
                        .tuples
                        .iter()
                        .map(|t| {
                            let q = t.second_negative.expect("quadruplet tuple");
                            sq_dist(&embeddings[q], &embeddings[t.negative])
                        })
                        .collect();
                    adaptive_margin(&d_qn, &d_ap, margin.floor2)?
                }
            };
            Ok((alpha1, alpha2))
        }
    }
}

/// Trains one configuration on a fully labeled corpus. Deterministic given
/// the config seeds.
pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !corpus.fully_labeled() {
        return Err(Error::Validation(
            "training corpus has unlabeled segments".into(),
        ));
    }
    if corpus.dim != cfg.embedder.input_dim {
        return Err(Error::Validation(format!(
            "corpus dim {} does not match embedder input_dim {}",
            corpus.dim, cfg.embedder.input_dim
        )));
    }

    let start = Instant::now();
    let mut model = init_model(&cfg.embedder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let flat = corpus.flat_segments();
    let mut velocity = if cfg.momentum > 0.0 {
        Some(model.params.zeros_like())
    } else {
        None
    };
    let mut loss_curve = Vec::with_capacity(cfg.steps);

    // sampling-time margins: fixed values, or the floors in adaptive mode
    let (sample_alpha1, sample_alpha2) = match cfg.margin.mode {
        MarginMode::Fixed => (cfg.margin.alpha1, cfg.margin.alpha2),
        MarginMode::Adaptive => (cfg.margin.floor1, cfg.margin.floor2),
    };

    for _ in 0..cfg.steps {
        let mut batch = make_pk_batch(corpus, cfg.batch_speakers, cfg.batch_segments, &mut rng)?;
        let embeddings: Vec<Embedding> = batch
            .items()
            .iter()
            .map(|item| forward(&model, &flat[item.segment].features))
            .collect::<Result<_>>()?;
        batch.set_embeddings(embeddings)?;

        let tuples = build_tuples(
            &batch,
            cfg.loss,
            &cfg.sampling,
            sample_alpha1,
            sample_alpha2,
            &mut rng,
        )?;
        if tuples.is_empty() {
            return Err(Error::Capacity("batch produced no tuples".into()));
        }
        let embeddings = batch.embeddings();
        let (alpha1, alpha2) = resolve_margins(&cfg.margin, cfg.loss, embeddings, &tuples)?;

        // mean loss and per-item embedding gradients
        let mut total_loss = 0.0;
        let mut item_grads: Vec<Vec<f64>> =
            vec![vec![0.0; cfg.embedder.embed_dim]; batch.len()];
        for t in &tuples.tuples {
            let out = match cfg.loss {
                LossKind::Triplet => triplet_loss(
                    &embeddings[t.anchor],
                    &embeddings[t.positive],
                    &embeddings[t.negative],
                    alpha1,
                ),
                LossKind::Quadruplet => {
                    let q = t.second_negative.expect("quadruplet tuple");
                    quadruplet_loss(
                        &embeddings[t.anchor],
                        &embeddings[t.positive],
                        &embeddings[t.negative],
                        &embeddings[q],
                        alpha1,
                        alpha2,
                    )
                }
            };
            total_loss += out.value;
            let participants: Vec<usize> = match t.second_negative {
                None => vec![t.anchor, t.positive, t.negative],
                Some(q) => vec![t.anchor, t.positive, t.negative, q],
            };
            for (who, grad) in participants.into_iter().zip(&out.grads) {
                for (acc, g) in item_grads[who].iter_mut().zip(grad) {
                    *acc += g;
                }
            }
        }
        let count = tuples.len() as f64;
        let mean_loss = total_loss / count;
        if !mean_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}",
                loss_curve.len()
            )));
        }
        loss_curve.push(mean_loss);

        // backpropagate mean gradients through the embedder
        let mut grads = model.params.zeros_like();
        for (item, grad) in batch.items().iter().zip(&item_grads) {
            if grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let scaled: Vec<f64> = grad.iter().map(|g| g / count).collect();
            let g = backward(&model, &flat[item.segment].features, &scaled)?;
            grads.axpy(1.0, &g);
        }

        match &mut velocity {
            Some(v) => {
                v.scale(cfg.momentum);
                v.axpy(1.0, &grads);
                model.params.axpy(-cfg.learning_rate, v);
            }
            None => model.params.axpy(-cfg.learning_rate, &grads),
        }
        if !model.params.all_finite() {
            return Err(Error::Numeric(format!(
                "parameters diverged at step {}",
                loss_curve.len()
            )));
        }
    }

    let record = RunRecord {
        config: cfg.clone(),
        loss_curve,
        wall_seconds: start.elapsed().as_secs_f64(),
        checkpoint: None,
        validation_embedding_hash: None,
        eval_der: None,
    };
    Ok(TrainOutcome { model, record })
}

/// Named evaluation corpus for the grid runner.
pub struct EvalSet {
    pub name: String,
    pub corpus: Corpus,
}

/// One grid row: a configuration cell with its run record and per-eval DERs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub key: ConfigKey,
    /// One DER per evaluation set, in [`GridResult::eval_names`] order.
    pub ders: Vec<Option<f64>>,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

/// Result of sweeping a configuration grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    pub eval_names: Vec<String>,
    pub rows: Vec<GridRow>,
}

fn strategy_rank(name: &str) -> usize {
    match name {
        "Random" => 0,
        "Semi-hard" => 1,
        _ => 2,
    }
}

fn key_rank(key: &ConfigKey) -> (usize, usize, usize) {
    (
        strategy_rank(&key.sampling),
        if key.loss == "Triplet" { 0 } else { 1 },
        if key.margin == "Fixed" { 0 } else { 1 },
    )
}

/// Trains every configuration and evaluates DER on each evaluation corpus.
/// Failed runs become rows with an error note instead of aborting the sweep.
/// Rows are ordered by (sampling, loss, margin).
pub fn run_grid(
    grid: &[TrainConfig],
    train_corpus: &Corpus,
    evals: &[EvalSet],
    eval_opts: &EvalOptions,
) -> GridResult {
    let mut rows: Vec<GridRow> = grid
        .par_iter()
        .map(|cfg| {
            let key = cfg.key();
            match train(cfg, train_corpus) {
                Ok(outcome) => {
                    let mut ders = Vec::with_capacity(evals.len());
                    let mut error = None;
                    for eval in evals {
                        let opts = EvalOptions {
                            seed: cfg.seed,
                            ..*eval_opts
                        };
                        match evaluate_model(&outcome.model, &eval.corpus, &opts) {
                            Ok(b) => ders.push(Some(b.der)),
                            Err(e) => {
                                ders.push(None);
                                error = Some(format!("evaluation on {}: {e}", eval.name));
                            }
                        }
                    }
                    let mut record = outcome.record;
                    record.eval_der = ders.first().copied().flatten();
                    GridRow {
                        key,
                        ders,
                        record: Some(record),
                        error,
                    }
                }
                Err(e) => GridRow {
                    key,
                    ders: vec![None; evals.len()],
                    record: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    rows.sort_by_key(|r| key_rank(&r.key));
    GridResult {
        eval_names: evals.iter().map(|e| e.name.clone()).collect(),
        rows,
    }
}

/// Named grid presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridPreset {
    /// All 12 sampling x loss x margin combinations.
    Full,
    /// The 11-row benchmark set (omits semi-hard / quadruplet / fixed).
    Table1,
}

impl std::str::FromStr for GridPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(GridPreset::Full),
            "table1" => Ok(GridPreset::Table1),
            other => Err(Error::Argument(format!(
                "unknown grid preset '{other}' (expected 'full' or 'table1')"
            ))),
        }
    }
}

/// Expands a preset into concrete configurations based on `base` (which
/// supplies the embedder, optimizer, batch shape, and seed).
pub fn grid_preset(preset: GridPreset, base: &TrainConfig) -> Vec<TrainConfig> {
    let strategies = [
        SamplingStrategy::Random,
        SamplingStrategy::SemiHard,
        SamplingStrategy::distance_weighted(),
    ];
    let losses = [LossKind::Triplet, LossKind::Quadruplet];
    let margins = [
        MarginSpec::fixed(0.8, 0.4),
        MarginSpec::adaptive(0.8, 0.4),
    ];
    let mut out = Vec::new();
    for strategy in &strategies {
        for loss in &losses {
            for margin in &margins {
                if preset == GridPreset::Table1
                    && matches!(strategy, SamplingStrategy::SemiHard)
                    && *loss == LossKind::Quadruplet
                    && margin.mode == MarginMode::Fixed
                {
                    continue;
                }
                let mut cfg = base.clone();
                cfg.sampling = *strategy;
                cfg.loss = *loss;
                cfg.margin = *margin;
                out.push(cfg);
            }
        }
    }
    out
}

/// Renders the grid as a fixed-width text table.
pub fn render_grid_table(result: &GridResult) -> String {
    let mut out = String::new();
    let der_headers: Vec<String> = if result.eval_names.len() <= 1 {
        vec!["DER%".to_string()]
    } else {
        result
            .eval_names
            .iter()
            .map(|n| format!("DER%({n})"))
            .collect()
    };
    out.push_str(&format!("{:<11} {:<12} {:<10}", "Sampling", "Loss", "Margin"));
    for h in &der_headers {
        out.push_str(&format!(" {h:>12}"));
    }
    out.push('\n');
    for row in &result.rows {
        out.push_str(&format!(
            "{:<11} {:<12} {:<10}",
            row.key.sampling, row.key.loss, row.key.margin
        ));
        if row.ders.is_empty() {
            out.push_str(&format!(" {:>12}", "-"));
        }
        for der in &row.ders {
            match der {
                Some(v) => out.push_str(&format!(" {:>12.2}", v * 100.0)),
                None => out.push_str(&format!(" {:>12}", "-")),
            }
        }
        if let Some(err) = &row.error {
            out.push_str(&format!("  [{err}]"));
        }
        out.push('\n');
    }
    out
}
