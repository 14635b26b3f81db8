//! Stage helpers shared by the command line and the sweep runner.

use log::info;

use crate::config::RunConfig;
use crate::corpus::{
    build_vocab, load_corpus, load_labeled, load_scored_pairs, tokenize, LabeledSet, ScoredPairSet, SentenceCorpus,
    Vocab,
};
use crate::encoder::{init_model, EncoderWeights, MaskSet};
use crate::error::{Error, Result};
use crate::eval::{eval_sts, linear_probe, EvalReport};
use crate::scoring::{estimate_importance, scoring_pairs, ScoreConfig, ScoreTable, TokenPair};
use crate::train::{pretrain_mlm, train_contrastive, PretrainOutput, TrainLog};

/// Tokenized inputs for every stage. The vocabulary is rebuilt from the
/// corpus each time, which is deterministic.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub corpus: Vec<Vec<u32>>,
    pub score_pairs: Vec<TokenPair>,
    pub score_source: String,
    pub eval_pairs: ScoredPairSet,
    pub probe: Option<(LabeledSet, LabeledSet)>,
}

impl Dataset {
    pub fn new(
        corpus: &SentenceCorpus,
        score: &ScoredPairSet,
        eval: ScoredPairSet,
        probe: Option<(LabeledSet, LabeledSet)>,
        config: &RunConfig,
    ) -> Result<Dataset> {
        let vocab = build_vocab(corpus, config.model.vocab_size)?;
        let tokens = corpus.sentences.iter().map(|s| tokenize(s, &vocab)).collect();
        Ok(Dataset {
            score_pairs: scoring_pairs(score, &vocab, config.score.min_gold)?,
            score_source: "score_pairs".to_string(),
            vocab,
            corpus: tokens,
            eval_pairs: eval,
            probe,
        })
    }

    pub fn load(config: &RunConfig) -> Result<Dataset> {
        let d = &config.data;
        let corpus = load_corpus(&d.corpus)?;
        let score = load_scored_pairs(&d.score_pairs)?;
        let eval = load_scored_pairs(&d.eval_pairs)?;
        let probe = match (&d.probe_train, &d.probe_test) {
            (Some(a), Some(b)) => Some((load_labeled(a)?, load_labeled(b)?)),
            _ => None,
        };
        let mut data = Dataset::new(&corpus, &score, eval, probe, config)?;
        data.score_source = d.score_pairs.display().to_string();
        Ok(data)
    }
}

pub fn pretrain(config: &RunConfig, data: &Dataset) -> Result<PretrainOutput> {
    let weights = init_model::<f32>(&config.model)?;
    pretrain_mlm(weights, &data.corpus, &config.model, &config.train)
}

/// Dense contrastive training.
pub fn train(config: &RunConfig, data: &Dataset, weights: EncoderWeights<f32>) -> Result<(EncoderWeights<f32>, TrainLog)> {
    let masks = MaskSet::ones_for(&weights);
    train_contrastive(weights, &data.corpus, &config.model, &config.train, &masks)
}

/// Importance scores at `lambda`, computed in 64-bit arithmetic.
pub fn score(config: &RunConfig, data: &Dataset, weights: &EncoderWeights<f32>, lambda: f64) -> Result<ScoreTable> {
    let cfg = ScoreConfig {
        lambda,
        ..config.score.clone()
    };
    let w64 = weights.cast::<f64>();
    let table = estimate_importance(&w64, &MaskSet::ones_for(&w64), &data.score_pairs, &cfg, &data.score_source)?;
    info!("scored {} batches at lambda {lambda}", table.batches);
    Ok(table)
}

pub fn evaluate(
    config: &RunConfig,
    data: &Dataset,
    weights: &EncoderWeights<f32>,
    masks: &MaskSet<f32>,
    model: &str,
    sparsity: f64,
    lambda: Option<f64>,
) -> Result<EvalReport> {
    let sts = eval_sts(weights, masks, &data.vocab, &data.eval_pairs, config.score.eps_log)?;
    let probe_accuracy = data
        .probe
        .as_ref()
        .map(|(tr, te)| linear_probe(weights, masks, &data.vocab, tr, te, &config.probe))
        .transpose()?;
    if !sts.spearman.is_finite() {
        return Err(Error::Metric(format!("non-finite Spearman for {model}")));
    }
    Ok(EvalReport {
        model: model.to_string(),
        sparsity,
        lambda,
        spearman: sts.spearman,
        alignment: sts.alignment,
        uniformity: sts.uniformity,
        probe_accuracy,
    })
}
