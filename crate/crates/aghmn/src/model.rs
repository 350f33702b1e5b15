//! The full model: utterance readers, fused memory banks, attention
//! weighting, context summarizing, residual refinement, and the classifier.
//!
//! A conversation is processed one utterance at a time. The current
//! utterance is read into a query vector, the most recent `k` historical
//! utterance embeddings are fused into a memory bank, the query attends over
//! the bank, and the summarized context refines the query before
//! classification. Utterance embeddings are computed once and reused as
//! history for later steps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, NodeId, ParamSet, Tensor, LOG_FLOOR};
use crate::cells::{
    agru_summarize, bind_agru, bind_gru, biagru_summarize, bigru_encode, gru_step, register_agru,
    register_gru, AgruParams, GruParams,
};
use crate::data::{Conversation, Vocabulary};
use crate::error::{Error, Result};

pub const CNN_WIDTHS: [usize; 3] = [3, 4, 5];
pub const CNN_MAPS: usize = 64;
/// Shortest utterance the CNN reader accepts; shorter ones are padded with
/// zero vectors.
pub const CNN_MIN_LEN: usize = 5;

macro_rules! variant_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::contract(format!(
                        concat!("unknown ", stringify!($name), " `{}` (expected one of: ",
                                $($text, " ",)+ ")"),
                        other
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let text = match self {
                    $($name::$variant => $text),+
                };
                f.write_str(text)
            }
        }
    };
}

variant_enum!(Reader { Bigru => "bigru", Cnn => "cnn" });
variant_enum!(Fusion { Unif => "unif", Bif => "bif" });
variant_enum!(Summarizer { Soft => "soft", Agru => "agru", Biagru => "biagru" });

/// Architecture selectors and dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Word vector size.
    pub d_w: usize,
    /// Hidden size of every GRU/AGRU and of utterance embeddings.
    pub d1: usize,
    /// Context-window size. Zero disables the memory bank entirely
    /// (history-blind ablation).
    pub k: usize,
    pub n_classes: usize,
    pub reader: Reader,
    pub fusion: Fusion,
    pub summarizer: Summarizer,
    pub dropout_p: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_w == 0 || self.d1 == 0 || self.n_classes == 0 {
            return Err(Error::contract(format!(
                "d_w, d1 and n_classes must be positive (got {}, {}, {})",
                self.d_w, self.d1, self.n_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::contract(format!(
                "dropout rate {} outside [0,1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Ordered fused memory vectors for one query step, oldest first.
pub struct MemoryBank {
    nodes: Vec<NodeId>,
}

impl MemoryBank {
    pub fn empty() -> Self {
        MemoryBank { nodes: Vec::new() }
    }

    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        MemoryBank { nodes }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Per-utterance prediction record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// 1-based utterance index within its conversation.
    pub t: usize,
    /// Attention weights over the memory bank; empty when there is no
    /// history.
    pub weights: Vec<f64>,
    /// Predicted class distribution.
    pub probs: Vec<f64>,
    pub pred: usize,
    pub gold: usize,
}

/// Reader parameters bound into one graph.
pub enum BoundReader {
    Bigru {
        fwd: GruParams,
        bwd: GruParams,
        proj_w: NodeId,
        proj_b: NodeId,
    },
    Cnn {
        /// One (weight, bias) pair per filter width.
        filters: Vec<(NodeId, NodeId)>,
        proj_w: NodeId,
        proj_b: NodeId,
    },
}

/// All model parameters bound into one graph.
pub struct BoundModel {
    pub embed: NodeId,
    pub reader: BoundReader,
    pub fusion_fwd: Option<GruParams>,
    pub fusion_bwd: Option<GruParams>,
    pub summ_fwd: Option<AgruParams>,
    pub summ_bwd: Option<AgruParams>,
    pub clf_w: NodeId,
    pub clf_b: NodeId,
}

impl BoundModel {
    pub fn bind(config: &ModelConfig, bound: &Bound) -> Result<Self> {
        let reader = match config.reader {
            Reader::Bigru => BoundReader::Bigru {
                fwd: bind_gru(bound, "reader.fwd")?,
                bwd: bind_gru(bound, "reader.bwd")?,
                proj_w: bound.node("reader.proj.w")?,
                proj_b: bound.node("reader.proj.b")?,
            },
            Reader::Cnn => BoundReader::Cnn {
                filters: CNN_WIDTHS
                    .iter()
                    .map(|w| {
                        Ok((
                            bound.node(&format!("reader.conv{w}.w"))?,
                            bound.node(&format!("reader.conv{w}.b"))?,
                        ))
                    })
                    .collect::<Result<_>>()?,
                proj_w: bound.node("reader.proj.w")?,
                proj_b: bound.node("reader.proj.b")?,
            },
        };
        let (fusion_fwd, fusion_bwd, summ_fwd, summ_bwd) = if config.k == 0 {
            (None, None, None, None)
        } else {
            let fusion_fwd = Some(bind_gru(bound, "fusion.fwd")?);
            let fusion_bwd = match config.fusion {
                Fusion::Unif => None,
                Fusion::Bif => Some(bind_gru(bound, "fusion.bwd")?),
            };
            let (summ_fwd, summ_bwd) = match config.summarizer {
                Summarizer::Soft => (None, None),
                Summarizer::Agru => (Some(bind_agru(bound, "summ.fwd")?), None),
                Summarizer::Biagru => (
                    Some(bind_agru(bound, "summ.fwd")?),
                    Some(bind_agru(bound, "summ.bwd")?),
                ),
            };
            (fusion_fwd, fusion_bwd, summ_fwd, summ_bwd)
        };
        Ok(BoundModel {
            embed: bound.node("embed.table")?,
            reader,
            fusion_fwd,
            fusion_bwd,
            summ_fwd,
            summ_bwd,
            clf_w: bound.node("clf.w")?,
            clf_b: bound.node("clf.b")?,
        })
    }
}

// ── Readers ──────────────────────────────────────────────────────────

/// BiGRU utterance reader: encode the words in both directions, concatenate
/// the per-step states, max-pool over time, then project through tanh.
pub fn read_utterance_bigru(
    g: &mut Graph,
    words: &[NodeId],
    fwd: &GruParams,
    bwd: &GruParams,
    proj_w: NodeId,
    proj_b: NodeId,
) -> Result<NodeId> {
    if words.is_empty() {
        return Err(Error::contract("read_utterance_bigru on an empty utterance"));
    }
    let (fwd_states, bwd_states) = bigru_encode(g, words, fwd, bwd)?;
    let mut concat_states = Vec::with_capacity(words.len());
    for n in 0..words.len() {
        concat_states.push(g.concat(&[fwd_states[n], bwd_states[n]])?);
    }
    let pooled = g.max_over_time(&concat_states)?;
    let projected = g.matmul(proj_w, pooled)?;
    let shifted = g.add(projected, proj_b)?;
    g.tanh(shifted)
}

/// 1-D CNN utterance reader: three filter widths, each max-pooled over time,
/// concatenated and projected through a relu layer. Utterances shorter than
/// the widest filter are padded with zero vectors.
pub fn read_utterance_cnn(
    g: &mut Graph,
    words: &[NodeId],
    filters: &[(NodeId, NodeId)],
    proj_w: NodeId,
    proj_b: NodeId,
) -> Result<NodeId> {
    if words.is_empty() {
        return Err(Error::contract("read_utterance_cnn on an empty utterance"));
    }
    let d = g.value(words[0]).numel();
    let mut padded = words.to_vec();
    while padded.len() < CNN_MIN_LEN {
        padded.push(g.leaf(Tensor::zeros(&[d])));
    }
    let mut pooled_parts = Vec::with_capacity(filters.len());
    for &(weight, bias) in filters {
        let conv = g.conv1d(weight, bias, &padded)?;
        pooled_parts.push(g.max_over_time(&[conv])?);
    }
    let cat = g.concat(&pooled_parts)?;
    let projected = g.matmul(proj_w, cat)?;
    let shifted = g.add(projected, proj_b)?;
    g.relu(shifted)
}

// ── Memory bank, attention, summarizing ─────────────────────────────

/// Fuses a window of historical utterance embeddings into a memory bank.
///
/// UniF runs a forward GRU over the window and adds each state to its
/// utterance embedding (residual). BiF runs a BiGRU and sums both direction
/// states with the embedding.
pub fn build_memory_bank(
    g: &mut Graph,
    history: &[NodeId],
    fusion: Fusion,
    fwd: &GruParams,
    bwd: Option<&GruParams>,
) -> Result<MemoryBank> {
    if history.is_empty() {
        return Ok(MemoryBank::empty());
    }
    let nodes = match fusion {
        Fusion::Unif => {
            let hidden = g.value(fwd.bz).numel();
            let mut h = g.leaf(Tensor::zeros(&[hidden]));
            let mut nodes = Vec::with_capacity(history.len());
            for &u in history {
                h = gru_step(g, u, h, fwd)?;
                nodes.push(g.add(h, u)?);
            }
            nodes
        }
        Fusion::Bif => {
            let bwd = bwd.ok_or_else(|| Error::contract("bif fusion needs backward GRU params"))?;
            let (fwd_states, bwd_states) = bigru_encode(g, history, fwd, bwd)?;
            let mut nodes = Vec::with_capacity(history.len());
            for (n, &u) in history.iter().enumerate() {
                let sum = g.add(fwd_states[n], bwd_states[n])?;
                nodes.push(g.add(sum, u)?);
            }
            nodes
        }
    };
    Ok(MemoryBank { nodes })
}

/// Dot-product attention with softmax normalization: a_k ∝ exp(q·M_k).
pub fn attention_weights(g: &mut Graph, q: NodeId, bank: &MemoryBank) -> Result<NodeId> {
    if bank.is_empty() {
        return Err(Error::contract("attention_weights on an empty memory bank"));
    }
    let mut logits = Vec::with_capacity(bank.len());
    for &m in bank.nodes() {
        logits.push(g.dot(q, m)?);
    }
    let stacked = g.concat(&logits)?;
    g.softmax(stacked)
}

/// Splits a weight vector node into scalar nodes, one per memory.
pub fn split_weights(g: &mut Graph, weights: NodeId) -> Result<Vec<NodeId>> {
    let k = g.value(weights).numel();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let mut onehot = vec![0.0; k];
        onehot[i] = 1.0;
        let e = g.leaf(Tensor::vector(onehot));
        out.push(g.dot(weights, e)?);
    }
    Ok(out)
}

/// Order-insensitive baseline: the attention-weighted sum of the memories.
pub fn soft_attention(g: &mut Graph, bank: &MemoryBank, weights: NodeId) -> Result<NodeId> {
    if g.value(weights).numel() != bank.len() {
        return Err(Error::dim(
            "weighted-sum",
            format!("{} weights for {} memories", g.value(weights).numel(), bank.len()),
        ));
    }
    g.weighted_sum(weights, bank.nodes())
}

/// Context produced by the configured summarizer for one step.
pub enum ContextSummary {
    /// No history: the query passes through unchanged.
    Empty,
    /// Soft attention or a forward AGRU.
    Single(NodeId),
    /// BiAGRU forward and backward contextual vectors.
    ForwardBackward(NodeId, NodeId),
}

/// Residual refinement of the query by the summarized context.
pub fn refine_query(g: &mut Graph, q: NodeId, summary: &ContextSummary) -> Result<NodeId> {
    match summary {
        ContextSummary::Empty => Ok(q),
        ContextSummary::Single(c) => g.add(q, *c),
        ContextSummary::ForwardBackward(c_f, c_b) => {
            let partial = g.add(q, *c_f)?;
            g.add(partial, *c_b)
        }
    }
}

/// Softmax classifier over the refined query.
pub fn classify(g: &mut Graph, o: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let logits = g.matmul(w, o)?;
    let shifted = g.add(logits, b)?;
    g.softmax(shifted)
}

// ── Loss ─────────────────────────────────────────────────────────────

/// Average negative log-likelihood over a dataset's traces:
/// `-(1/sum T_l) * sum over steps of log p(gold)`, floored at 1e-12.
pub fn nll_loss(traces: &[StepTrace]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for trace in traces {
        total += trace.probs[trace.gold].max(LOG_FLOOR).ln();
        count += 1;
    }
    if count == 0 {
        return 0.0;
    }
    -total / count as f64
}

/// Graph version of the loss for one conversation: mean over its steps.
pub fn nll_loss_node(g: &mut Graph, prob_nodes: &[NodeId], golds: &[usize]) -> Result<NodeId> {
    if prob_nodes.is_empty() || prob_nodes.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} probability nodes for {} gold labels",
            prob_nodes.len(),
            golds.len()
        )));
    }
    let mut logs = Vec::with_capacity(prob_nodes.len());
    for (&probs, &gold) in prob_nodes.iter().zip(golds) {
        let n = g.value(probs).numel();
        if gold >= n {
            return Err(Error::contract(format!("gold label {gold} out of range for {n} classes")));
        }
        let mut onehot = vec![0.0; n];
        onehot[gold] = 1.0;
        let e = g.leaf(Tensor::vector(onehot));
        let p = g.dot(probs, e)?;
        logs.push(g.log(p)?);
    }
    let stacked = g.concat(&logs)?;
    let mean = g.mean(stacked)?;
    let neg = g.scalar(-1.0);
    g.scalar_mul(neg, mean)
}

// ── Model ────────────────────────────────────────────────────────────

/// Output of one conversation forward pass.
pub struct ConversationPass {
    pub bound: Bound,
    pub prob_nodes: Vec<NodeId>,
    pub golds: Vec<usize>,
    pub traces: Vec<StepTrace>,
}

/// Configuration, vocabulary and parameters of one model instance.
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
}

impl Model {
    /// Builds a model with freshly initialized parameters. The embedding
    /// matrix must be aligned with the vocabulary.
    pub fn new(config: ModelConfig, vocab: Vocabulary, embedding: Tensor, seed: u64) -> Result<Self> {
        config.validate()?;
        if embedding.shape() != [vocab.len(), config.d_w] {
            return Err(Error::dim(
                "embedding",
                format!(
                    "table {:?} does not match vocabulary size {} x d_w {}",
                    embedding.shape(),
                    vocab.len(),
                    config.d_w
                ),
            ));
        }
        let mut params = ParamSet::new(seed);
        params.insert("embed.table", embedding)?;
        let d1 = config.d1;
        match config.reader {
            Reader::Bigru => {
                register_gru(&mut params, "reader.fwd", config.d_w, d1)?;
                register_gru(&mut params, "reader.bwd", config.d_w, d1)?;
                let bound = 1.0 / ((2 * d1) as f64).sqrt();
                params.register_uniform("reader.proj.w", &[d1, 2 * d1], bound)?;
                params.register_uniform("reader.proj.b", &[d1], bound)?;
            }
            Reader::Cnn => {
                for w in CNN_WIDTHS {
                    let fan_in = w * config.d_w;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    params.register_uniform(&format!("reader.conv{w}.w"), &[CNN_MAPS, fan_in], bound)?;
                    params.register_uniform(&format!("reader.conv{w}.b"), &[CNN_MAPS], bound)?;
                }
                let fan_in = CNN_MAPS * CNN_WIDTHS.len();
                let bound = 1.0 / (fan_in as f64).sqrt();
                params.register_uniform("reader.proj.w", &[d1, fan_in], bound)?;
                params.register_uniform("reader.proj.b", &[d1], bound)?;
            }
        }
        if config.k > 0 {
            register_gru(&mut params, "fusion.fwd", d1, d1)?;
            if config.fusion == Fusion::Bif {
                register_gru(&mut params, "fusion.bwd", d1, d1)?;
            }
            match config.summarizer {
                Summarizer::Soft => {}
                Summarizer::Agru => register_agru(&mut params, "summ.fwd", d1, d1)?,
                Summarizer::Biagru => {
                    register_agru(&mut params, "summ.fwd", d1, d1)?;
                    register_agru(&mut params, "summ.bwd", d1, d1)?;
                }
            }
        }
        let bound = 1.0 / (d1 as f64).sqrt();
        params.register_uniform("clf.w", &[config.n_classes, d1], bound)?;
        params.register_uniform("clf.b", &[config.n_classes], bound)?;
        Ok(Model { config, vocab, params })
    }

    /// Rebuilds a model from checkpointed parts.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParamSet) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, vocab, params })
    }

    /// Reads one utterance into its embedding vector, applying dropout to
    /// the word vectors when training.
    fn read_utterance(
        &self,
        g: &mut Graph,
        bm: &BoundModel,
        tokens: &[String],
        train: bool,
    ) -> Result<NodeId> {
        let mut words = Vec::with_capacity(tokens.len());
        for token in tokens {
            let idx = self.vocab.index_of(token);
            let looked_up = g.embed(bm.embed, idx)?;
            words.push(g.dropout(looked_up, self.config.dropout_p, train)?);
        }
        match &bm.reader {
            BoundReader::Bigru { fwd, bwd, proj_w, proj_b } => {
                read_utterance_bigru(g, &words, fwd, bwd, *proj_w, *proj_b)
            }
            BoundReader::Cnn { filters, proj_w, proj_b } => {
                read_utterance_cnn(g, &words, filters, *proj_w, *proj_b)
            }
        }
    }

    /// Full forward pass over a conversation.
    pub fn forward_conversation(
        &self,
        g: &mut Graph,
        conv: &Conversation,
        train: bool,
    ) -> Result<ConversationPass> {
        if conv.is_empty() {
            return Err(Error::contract(format!("conversation `{}` is empty", conv.id)));
        }
        let bound = g.bind(&self.params);
        let bm = BoundModel::bind(&self.config, &bound)?;
        let k = self.config.k;

        let mut embeds: Vec<NodeId> = Vec::with_capacity(conv.len());
        let mut prob_nodes = Vec::with_capacity(conv.len());
        let mut golds = Vec::with_capacity(conv.len());
        let mut traces = Vec::with_capacity(conv.len());

        for (t, utt) in conv.utterances.iter().enumerate() {
            if utt.label >= self.config.n_classes {
                return Err(Error::contract(format!(
                    "label {} out of range in conversation `{}`",
                    utt.label, conv.id
                )));
            }
            let q = self.read_utterance(g, &bm, &utt.tokens, train)?;
            let window = &embeds[t.saturating_sub(k)..t];
            let bank = match &bm.fusion_fwd {
                Some(fwd) if !window.is_empty() => {
                    build_memory_bank(g, window, self.config.fusion, fwd, bm.fusion_bwd.as_ref())?
                }
                _ => MemoryBank::empty(),
            };

            let (o, weight_values) = if bank.is_empty() {
                (refine_query(g, q, &ContextSummary::Empty)?, Vec::new())
            } else {
                let weights = attention_weights(g, q, &bank)?;
                let weight_values = g.value(weights).data().to_vec();
                let summary = match self.config.summarizer {
                    Summarizer::Soft => ContextSummary::Single(soft_attention(g, &bank, weights)?),
                    Summarizer::Agru => {
                        let parts = split_weights(g, weights)?;
                        let cell = bm.summ_fwd.as_ref().expect("agru params bound");
                        ContextSummary::Single(agru_summarize(g, bank.nodes(), &parts, cell)?)
                    }
                    Summarizer::Biagru => {
                        let parts = split_weights(g, weights)?;
                        let fwd = bm.summ_fwd.as_ref().expect("biagru params bound");
                        let bwd = bm.summ_bwd.as_ref().expect("biagru params bound");
                        let (c_f, c_b) = biagru_summarize(g, bank.nodes(), &parts, fwd, bwd)?;
                        ContextSummary::ForwardBackward(c_f, c_b)
                    }
                };
                (refine_query(g, q, &summary)?, weight_values)
            };

            let o = g.dropout(o, self.config.dropout_p, train)?;
            let probs = classify(g, o, bm.clf_w, bm.clf_b)?;
            let prob_values = g.value(probs).data().to_vec();
            let pred = argmax(&prob_values);
            traces.push(StepTrace {
                t: t + 1,
                weights: weight_values,
                probs: prob_values,
                pred,
                gold: utt.label,
            });
            prob_nodes.push(probs);
            golds.push(utt.label);
            embeds.push(q);
        }

        Ok(ConversationPass { bound, prob_nodes, golds, traces })
    }

    /// Deterministic inference pass (dropout off).
    pub fn run_conversation(&self, conv: &Conversation) -> Result<Vec<StepTrace>> {
        let mut g = Graph::with_seed(0);
        let pass = self.forward_conversation(&mut g, conv, false)?;
        Ok(pass.traces)
    }

    /// Zeroes gradient entries for frozen parameters (the unknown-word
    /// embedding row).
    pub fn zero_frozen_grads(&self, grads: &mut crate::autodiff::GradMap) {
        if let Some(table) = grads.get_mut("embed.table") {
            let d_w = self.config.d_w;
            for v in &mut table.data_mut()[..d_w] {
                *v = 0.0;
            }
        }
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
