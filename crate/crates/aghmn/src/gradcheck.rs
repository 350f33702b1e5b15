//! End-to-end gradient verification on a tiny built-in fixture.
//!
//! Every reader x fusion x summarizer combination is run forward on a short
//! fixed conversation, differentiated analytically, and compared against
//! central finite differences over all parameters.

use crate::autodiff::{finite_diff_grad, max_rel_err, Graph, ParamSet, DEFAULT_EPS};
use crate::data::{build_vocab, random_embeddings, Conversation, Utterance};
use crate::error::Result;
use crate::model::{nll_loss_node, Fusion, Model, ModelConfig, Reader, Summarizer};

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckRow {
    pub reader: Reader,
    pub fusion: Fusion,
    pub summarizer: Summarizer,
    pub worst_rel_err: f64,
    pub worst_param: String,
    pub pass: bool,
}

impl GradCheckRow {
    pub fn variant_name(&self) -> String {
        format!("{}/{}-{}", self.reader, self.fusion, self.summarizer)
    }
}

/// Every reader x fusion x summarizer combination.
pub fn all_variants() -> Vec<(Reader, Fusion, Summarizer)> {
    let mut out = Vec::new();
    for reader in [Reader::Bigru, Reader::Cnn] {
        for fusion in [Fusion::Unif, Fusion::Bif] {
            for summarizer in [Summarizer::Soft, Summarizer::Agru, Summarizer::Biagru] {
                out.push((reader, fusion, summarizer));
            }
        }
    }
    out
}

/// Fixed three-utterance conversation over a small vocabulary.
pub fn tiny_conversation() -> Conversation {
    let mk = |speaker: &str, tokens: &[&str], label: usize| Utterance {
        speaker: speaker.to_string(),
        tokens: tokens.iter().map(|t| t.to_string()).collect(),
        label,
    };
    Conversation {
        id: "grad-check".to_string(),
        utterances: vec![
            mk("A", &["well", "that", "was", "loud"], 0),
            mk("B", &["so", "quiet", "now"], 1),
            mk("A", &["loud", "again"], 0),
        ],
    }
}

fn tiny_model(reader: Reader, fusion: Fusion, summarizer: Summarizer) -> Result<(Model, Conversation)> {
    let conv = tiny_conversation();
    let vocab = build_vocab(std::slice::from_ref(&conv), 1);
    let table = random_embeddings(&vocab, 4, 19);
    let config = ModelConfig {
        d_w: 4,
        d1: 3,
        k: 3,
        n_classes: 2,
        reader,
        fusion,
        summarizer,
        dropout_p: 0.3,
    };
    let model = Model::new(config, vocab, table.matrix, 19)?;
    Ok((model, conv))
}

fn loss_of(model_config: &ModelConfig, model: &Model, params: &ParamSet, conv: &Conversation) -> Result<f64> {
    let m = Model::from_parts(model_config.clone(), model.vocab.clone(), params.clone())?;
    let mut g = Graph::new();
    let pass = m.forward_conversation(&mut g, conv, false)?;
    let loss = nll_loss_node(&mut g, &pass.prob_nodes, &pass.golds)?;
    Ok(g.value(loss).item())
}

/// Checks one variant. `corruption` is a test hook: a nonzero value is added
/// to the first analytic gradient entry before comparison, so a deliberately
/// broken backward pass is reported as a failure.
pub fn check_variant(
    reader: Reader,
    fusion: Fusion,
    summarizer: Summarizer,
    eps: f64,
    corruption: f64,
) -> Result<GradCheckRow> {
    let (model, conv) = tiny_model(reader, fusion, summarizer)?;

    let mut g = Graph::new();
    let pass = model.forward_conversation(&mut g, &conv, false)?;
    let loss = nll_loss_node(&mut g, &pass.prob_nodes, &pass.golds)?;
    g.backward(loss)?;
    let mut analytic = g.extract_grads(&pass.bound);
    if corruption != 0.0 {
        if let Some(t) = analytic.get_mut("clf.w") {
            t.data_mut()[0] += corruption;
        }
    }

    let config = model.config.clone();
    let numeric = finite_diff_grad(
        |p| loss_of(&config, &model, p, &conv),
        &model.params,
        eps,
    )?;
    let (worst_rel_err, worst_param) = max_rel_err(&analytic, &numeric);
    Ok(GradCheckRow {
        reader,
        fusion,
        summarizer,
        worst_rel_err,
        worst_param,
        pass: worst_rel_err < GRAD_CHECK_TOLERANCE,
    })
}

/// Runs the check for every variant combination.
pub fn run_all(eps: f64) -> Result<Vec<GradCheckRow>> {
    all_variants()
        .into_iter()
        .map(|(r, f, s)| check_variant(r, f, s, eps, 0.0))
        .collect()
}

pub fn default_eps() -> f64 {
    DEFAULT_EPS
}
