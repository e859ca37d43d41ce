//! Siamese cross-encoder and the dual cross-attention decoder.
//!
//! Blocks are pre-norm. In each decoder layer the masked self-attention output
//! (with its residual) is `h_self`; the relevant and irrelevant cross-attention
//! outputs are taken raw, and `h_combine = h_self + (h_rel - h_irrel)` feeds a
//! residual feed-forward sublayer. The vocabulary distribution is read from the
//! last layer's output after a final layer norm.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax, Matrix, Tape, Var};
use crate::corpus::Vocabulary;
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled from the vocabulary when left at 0.
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub dropout: f64,
    pub seed: u64,
    /// One projection for all three disentangling streams, or one per stream.
    pub shared_disentangle_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            max_source_len: 256,
            max_target_len: 64,
            dropout: 0.0,
            seed: 0,
            shared_disentangle_projection: true,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 16,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 32,
            max_source_len: 32,
            max_target_len: 16,
            dropout: 0.0,
            seed: 0,
            shared_disentangle_projection: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::arg(format!("model `{name}` must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::arg(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_source_len < 2 || self.max_target_len < 2 {
            return Err(Error::arg("maximum lengths must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamStore {
    fn add(&mut self, name: String, m: Matrix) -> usize {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Matrix {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }
}

#[derive(Clone, Debug)]
struct LnIds {
    g: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct EncLayerIds {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct DecLayerIds {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross_rel: AttnIds,
    cross_irrel: AttnIds,
    ln3: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc: Vec<EncLayerIds>,
    enc_ln: LnIds,
    dec: Vec<DecLayerIds>,
    dec_ln: LnIds,
    out_w: usize,
    rep: (usize, usize),
    /// self, rel, irrel; identical ids when the projection is shared.
    dis: [(usize, usize); 3],
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect();
        self.store.add(name, Matrix::new(rows, cols, data))
    }

    fn embedding(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let normal = Normal::new(0.0, 0.5).expect("valid std");
        let data = (0..rows * cols).map(|_| normal.sample(&mut self.rng)).collect();
        self.store.add(name, Matrix::new(rows, cols, data))
    }

    fn zeros(&mut self, name: String, cols: usize) -> usize {
        self.store.add(name, Matrix::zeros(1, cols))
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds {
            g: self.store.add(format!("{prefix}.g"), Matrix::new(1, d, vec![1.0; d])),
            b: self.zeros(format!("{prefix}.b"), d),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.weight(format!("{prefix}.wq"), d, d),
            bq: self.zeros(format!("{prefix}.bq"), d),
            wk: self.weight(format!("{prefix}.wk"), d, d),
            bk: self.zeros(format!("{prefix}.bk"), d),
            wv: self.weight(format!("{prefix}.wv"), d, d),
            bv: self.zeros(format!("{prefix}.bv"), d),
            wo: self.weight(format!("{prefix}.wo"), d, d),
            bo: self.zeros(format!("{prefix}.bo"), d),
        }
    }

    fn copy_attn(&mut self, from: &AttnIds, prefix: &str) -> AttnIds {
        let mut copy = |suffix: &str, i: usize| {
            let m = self.store.tensor(i).clone();
            self.store.add(format!("{prefix}.{suffix}"), m)
        };
        AttnIds {
            wq: copy("wq", from.wq),
            bq: copy("bq", from.bq),
            wk: copy("wk", from.wk),
            bk: copy("bk", from.bk),
            wv: copy("wv", from.wv),
            bv: copy("bv", from.bv),
            wo: copy("wo", from.wo),
            bo: copy("bo", from.bo),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIds {
        FfnIds {
            w1: self.weight(format!("{prefix}.w1"), d, f),
            b1: self.zeros(format!("{prefix}.b1"), f),
            w2: self.weight(format!("{prefix}.w2"), f, d),
            b2: self.zeros(format!("{prefix}.b2"), d),
        }
    }

    fn projection(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        (
            self.weight(format!("{prefix}.w"), d, d),
            self.zeros(format!("{prefix}.b"), d),
        )
    }
}

impl Layout {
    fn build(cfg: &ModelConfig, store: &mut ParamStore) -> Self {
        let d = cfg.d_model;
        let mut init = Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let tok_emb = init.embedding("tok_emb".into(), cfg.vocab_size, d);
        let enc_pos = init.embedding("enc_pos".into(), cfg.max_source_len, d);
        let dec_pos = init.embedding("dec_pos".into(), cfg.max_target_len, d);
        let enc = (0..cfg.encoder_layers)
            .map(|l| EncLayerIds {
                ln1: init.ln(&format!("enc.{l}.ln1"), d),
                attn: init.attn(&format!("enc.{l}.attn"), d),
                ln2: init.ln(&format!("enc.{l}.ln2"), d),
                ffn: init.ffn(&format!("enc.{l}.ffn"), d, cfg.ffn_dim),
            })
            .collect();
        let enc_ln = init.ln("enc.ln_f", d);
        let dec = (0..cfg.decoder_layers)
            .map(|l| {
                let ln1 = init.ln(&format!("dec.{l}.ln1"), d);
                let self_attn = init.attn(&format!("dec.{l}.self_attn"), d);
                let ln2 = init.ln(&format!("dec.{l}.ln2"), d);
                let cross_rel = init.attn(&format!("dec.{l}.cross_rel"), d);
                let cross_irrel = init.copy_attn(&cross_rel, &format!("dec.{l}.cross_irrel"));
                DecLayerIds {
                    ln1,
                    self_attn,
                    ln2,
                    cross_rel,
                    cross_irrel,
                    ln3: init.ln(&format!("dec.{l}.ln3"), d),
                    ffn: init.ffn(&format!("dec.{l}.ffn"), d, cfg.ffn_dim),
                }
            })
            .collect();
        let dec_ln = init.ln("dec.ln_f", d);
        let out_w = init.weight("out.w".into(), d, cfg.vocab_size);
        let rep = init.projection("rep", d);
        let dis = if cfg.shared_disentangle_projection {
            let p = init.projection("dis", d);
            [p, p, p]
        } else {
            [
                init.projection("dis_self", d),
                init.projection("dis_rel", d),
                init.projection("dis_irrel", d),
            ]
        };
        Layout {
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_w,
            rep,
            dis,
        }
    }
}

/// Encoder input ids plus the `[start, end)` span of every document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceInput {
    pub tokens: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
}

/// Lays out `[BOS] query [SEP] doc₁ [SEP] doc₂ … [EOS]` within `max_len`.
///
/// The query is never truncated. Documents are cut from the right: the tail of
/// the last document goes first, and documents that no longer fit are dropped.
pub fn build_source(query: &[u32], docs: &[Vec<u32>], max_len: usize) -> Result<SourceInput> {
    if docs.is_empty() {
        return Err(Error::arg("encoder input needs at least one document"));
    }
    if docs.iter().any(Vec::is_empty) {
        return Err(Error::arg("document with no tokens"));
    }
    if query.len() + 4 > max_len {
        return Err(Error::arg(format!(
            "query of {} tokens leaves no room for a document within {max_len}",
            query.len()
        )));
    }
    let mut tokens = Vec::with_capacity(max_len);
    tokens.push(Vocabulary::BOS);
    tokens.extend_from_slice(query);
    let mut budget = max_len - tokens.len() - 1;
    let mut spans = Vec::with_capacity(docs.len());
    for doc in docs {
        if budget < 2 {
            break;
        }
        let take = doc.len().min(budget - 1);
        tokens.push(Vocabulary::SEP);
        let start = tokens.len();
        tokens.extend_from_slice(&doc[..take]);
        spans.push((start, tokens.len()));
        budget -= take + 1;
    }
    tokens.push(Vocabulary::EOS);
    Ok(SourceInput { tokens, spans })
}

/// Final encoder states for one `(query; documents)` input.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Matrix,
    pub tokens: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
}

/// What the irrelevant cross-attention stream attends to.
#[derive(Clone, Copy, Debug)]
pub enum IrrelevantInput<'a> {
    Encoded(&'a EncoderOutput),
    /// `h_irrel` is the zero tensor at every layer.
    Null,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates {
    pub h_self: Matrix,
    pub h_rel: Matrix,
    pub h_irrel: Matrix,
    pub h_combine: Matrix,
    /// Layer output after the feed-forward sublayer.
    pub output: Matrix,
    /// Per head, `[target × source]`; present when capture was requested.
    pub rel_attention: Option<Vec<Matrix>>,
    pub irrel_attention: Option<Vec<Matrix>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStates {
    pub layers: Vec<LayerStates>,
    pub final_hidden: Matrix,
    pub logits: Matrix,
}

impl DecoderStates {
    pub fn last(&self) -> &LayerStates {
        self.layers.last().expect("decoder has at least one layer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledEmbeddings {
    pub f_c: EmbeddingVector,
    pub f_r: EmbeddingVector,
    pub f_i: EmbeddingVector,
}

/// A sample tokenized for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedSample {
    pub id: String,
    pub query: Vec<u32>,
    /// Relevant documents in fusion order.
    pub relevant: Vec<Vec<u32>>,
    pub negative: Option<Vec<u32>>,
    /// Intent ids without BOS/EOS.
    pub target: Vec<u32>,
}

impl PreparedSample {
    /// `[BOS] target` and `target [EOS]`, truncated to `max_target_len`.
    pub fn decoder_io(&self, max_target_len: usize) -> (Vec<u32>, Vec<u32>) {
        let keep = self.target.len().min(max_target_len - 1);
        let mut input = vec![Vocabulary::BOS];
        input.extend_from_slice(&self.target[..keep]);
        let mut labels = self.target[..keep].to_vec();
        labels.push(Vocabulary::EOS);
        (input, labels)
    }
}

/// Everything one teacher-forced pass produces for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherForcedOutput {
    pub logits: Matrix,
    pub labels: Vec<u32>,
    pub states: DecoderStates,
    pub disentangled: DisentangledEmbeddings,
    pub doc_reps: Vec<EmbeddingVector>,
    pub irrelevant_rep: EmbeddingVector,
}

pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
    layout: Layout,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("vocab", &self.vocab.len())
            .field("params", &self.params.element_count())
            .finish()
    }
}

pub(crate) struct TapeEncoding {
    pub hidden: Var,
    pub spans: Vec<(usize, usize)>,
}

pub(crate) struct TapeLayer {
    pub h_self: Var,
    pub h_rel: Var,
    pub h_irrel: Var,
    pub h_combine: Var,
    pub output: Var,
    pub rel_attn: Vec<Var>,
    pub irrel_attn: Vec<Var>,
}

pub(crate) struct TapeDecoding {
    pub layers: Vec<TapeLayer>,
    pub final_hidden: Var,
    pub logits: Var,
}

pub(crate) enum Cross {
    Dual { rel: Var, irrel: Option<Var> },
    SelfOnly,
}

/// One forward pass of a model on a fresh tape.
pub(crate) struct Session<'m> {
    model: &'m Model,
    pub tape: Tape,
    vars: Vec<Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let vars = model
            .params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self {
            model,
            tape,
            vars,
            dropout: None,
        }
    }

    pub fn with_dropout(mut self, seed: u64) -> Self {
        if self.model.config.dropout > 0.0 {
            self.dropout = Some((self.model.config.dropout, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn param_var(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn p(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn drop(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let (r, c) = self.tape.shape(x);
        let keep = 1.0 / (1.0 - *rate);
        let mask = (0..r * c)
            .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep })
            .collect();
        let m = self.tape.constant(Matrix::new(r, c, mask));
        self.tape.mul(x, m)
    }

    fn ln(&mut self, ids: &LnIds, x: Var) -> Var {
        let (g, b) = (self.p(ids.g), self.p(ids.b));
        self.tape.layer_norm(x, g, b)
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Var {
        let (w, b) = (self.p(w), self.p(b));
        self.tape.linear(x, w, b)
    }

    fn attention(&mut self, ids: &AttnIds, q_in: Var, kv_in: Var, causal: bool) -> (Var, Vec<Var>) {
        let heads = self.model.config.heads;
        let dh = self.model.config.d_model / heads;
        let q = self.linear(q_in, ids.wq, ids.bq);
        let k = self.linear(kv_in, ids.wk, ids.bk);
        let v = self.linear(kv_in, ids.wv, ids.bv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut contexts = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.tape.slice_cols(q, h * dh, dh),
                    self.tape.slice_cols(k, h * dh, dh),
                    self.tape.slice_cols(v, h * dh, dh),
                )
            };
            let scores = self.tape.matmul_bt(qh, kh);
            let scores = self.tape.scale(scores, scale);
            let a = self.tape.softmax_rows(scores, causal);
            contexts.push(self.tape.matmul(a, vh));
            weights.push(a);
        }
        let ctx = if heads == 1 {
            contexts[0]
        } else {
            self.tape.concat_cols(&contexts)
        };
        (self.linear(ctx, ids.wo, ids.bo), weights)
    }

    fn ffn(&mut self, ids: &FfnIds, x: Var) -> Var {
        let h = self.linear(x, ids.w1, ids.b1);
        let h = self.tape.gelu(h);
        self.linear(h, ids.w2, ids.b2)
    }

    fn embed(&mut self, tokens: &[u32], pos_table: usize) -> Var {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let (tok, pos) = (self.p(self.model.layout.tok_emb), self.p(pos_table));
        let t = self.tape.gather(tok, &ids);
        let p = self.tape.gather(pos, &positions);
        let x = self.tape.add(t, p);
        self.drop(x)
    }

    pub fn encode(&mut self, source: &SourceInput) -> TapeEncoding {
        let layout = &self.model.layout;
        let mut x = self.embed(&source.tokens, layout.enc_pos);
        for layer in &layout.enc {
            let a = self.ln(&layer.ln1, x);
            let (att, _) = self.attention(&layer.attn, a, a, false);
            let att = self.drop(att);
            x = self.tape.add(x, att);
            let b = self.ln(&layer.ln2, x);
            let f = self.ffn(&layer.ffn, b);
            let f = self.drop(f);
            x = self.tape.add(x, f);
        }
        TapeEncoding {
            hidden: self.ln(&layout.enc_ln, x),
            spans: source.spans.clone(),
        }
    }

    /// Encoder states computed elsewhere, inserted as constants.
    pub fn encoding_constant(&mut self, out: &EncoderOutput) -> Var {
        self.tape.constant(out.hidden.clone())
    }

    pub fn decode(&mut self, prefix: &[u32], cross: Cross) -> TapeDecoding {
        let layout = &self.model.layout;
        let d = self.model.config.d_model;
        let mut x = self.embed(prefix, layout.dec_pos);
        let mut layers = Vec::with_capacity(layout.dec.len());
        for layer in &layout.dec {
            let a = self.ln(&layer.ln1, x);
            let (sa, _) = self.attention(&layer.self_attn, a, a, true);
            let sa = self.drop(sa);
            let h_self = self.tape.add(x, sa);
            let zeros = Matrix::zeros(prefix.len(), d);
            let (h_rel, rel_attn, h_irrel, irrel_attn) = match cross {
                Cross::Dual { rel, irrel } => {
                    let q = self.ln(&layer.ln2, h_self);
                    let (h_rel, rel_attn) = self.attention(&layer.cross_rel, q, rel, false);
                    let (h_irrel, irrel_attn) = match irrel {
                        Some(irrel) => self.attention(&layer.cross_irrel, q, irrel, false),
                        None => (self.tape.constant(zeros), Vec::new()),
                    };
                    (h_rel, rel_attn, h_irrel, irrel_attn)
                }
                Cross::SelfOnly => {
                    let z = self.tape.constant(zeros);
                    (z, Vec::new(), z, Vec::new())
                }
            };
            let contrast = self.tape.sub(h_rel, h_irrel);
            let h_combine = self.tape.add(h_self, contrast);
            let c = self.ln(&layer.ln3, h_combine);
            let f = self.ffn(&layer.ffn, c);
            let f = self.drop(f);
            let output = self.tape.add(h_combine, f);
            layers.push(TapeLayer {
                h_self,
                h_rel,
                h_irrel,
                h_combine,
                output,
                rel_attn,
                irrel_attn,
            });
            x = output;
        }
        let final_hidden = self.ln(&layout.dec_ln, x);
        let w = self.p(layout.out_w);
        let logits = self.tape.matmul(final_hidden, w);
        TapeDecoding {
            layers,
            final_hidden,
            logits,
        }
    }

    /// Representation-space embedding of every span: project, then average.
    pub fn span_reps(&mut self, enc: &TapeEncoding) -> Vec<Var> {
        let (w, b) = self.model.layout.rep;
        let proj = self.linear(enc.hidden, w, b);
        enc.spans
            .iter()
            .map(|&(s, e)| self.tape.mean_rows(proj, &(s..e).collect::<Vec<_>>()))
            .collect()
    }

    /// Disentangling-space embeddings `(f_c, f_r, f_i)` of the last layer.
    pub fn disentangled(&mut self, dec: &TapeDecoding, positions: &[usize]) -> [Var; 3] {
        let last = dec.layers.last().expect("decoder layers");
        let streams = [last.h_self, last.h_rel, last.h_irrel];
        let dis = self.model.layout.dis;
        std::array::from_fn(|i| {
            let proj = self.linear(streams[i], dis[i].0, dis[i].1);
            self.tape.mean_rows(proj, positions)
        })
    }

    fn states(&self, dec: &TapeDecoding, capture: bool) -> DecoderStates {
        let v = |x: Var| self.tape.value(x).clone();
        let grab = |ws: &[Var]| {
            (capture && !ws.is_empty()).then(|| ws.iter().map(|&w| v(w)).collect())
        };
        DecoderStates {
            layers: dec
                .layers
                .iter()
                .map(|l| LayerStates {
                    h_self: v(l.h_self),
                    h_rel: v(l.h_rel),
                    h_irrel: v(l.h_irrel),
                    h_combine: v(l.h_combine),
                    output: v(l.output),
                    rel_attention: grab(&l.rel_attn),
                    irrel_attention: grab(&l.irrel_attn),
                })
                .collect(),
            final_hidden: v(dec.final_hidden),
            logits: v(dec.logits),
        }
    }
}

fn to_embedding(m: &Matrix) -> EmbeddingVector {
    EmbeddingVector::new(m.data().to_vec()).unwrap_or_else(|_| EmbeddingVector::zeros(m.cols()))
}

/// `mean_{r ∈ span}(hidden_r · w + b)` for every span.
pub fn pool_spans(hidden: &Matrix, spans: &[(usize, usize)], w: &Matrix, b: &Matrix) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let (h, w, b) = (
        tape.constant(hidden.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let proj = tape.linear(h, w, b);
    spans
        .iter()
        .map(|&(s, e)| {
            if s >= e || e > hidden.rows() {
                return Err(Error::arg(format!("invalid span ({s}, {e})")));
            }
            let m = tape.mean_rows(proj, &(s..e).collect::<Vec<_>>());
            Ok(tape.value(m).data().to_vec())
        })
        .collect()
}

/// Mean of `rows · w + b` over positions where `mask` is true.
pub fn pool_masked(rows: &Matrix, mask: &[bool], w: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if mask.len() != rows.rows() {
        return Err(Error::arg("mask length differs from target length"));
    }
    let positions: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if positions.is_empty() {
        return Err(Error::arg("mask selects no target position"));
    }
    let mut tape = Tape::new();
    let (h, w, b) = (
        tape.constant(rows.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let proj = tape.linear(h, w, b);
    let m = tape.mean_rows(proj, &positions);
    Ok(tape.value(m).data().to_vec())
}

/// `softmax(hidden · W)` for one decoder position.
pub fn vocab_distribution(output_weight: &Matrix, hidden: &[f64]) -> Vec<f64> {
    let h = Matrix::row_vector(hidden.to_vec());
    softmax(h.matmul(output_weight).data())
}

const CHECKPOINT_FORMAT: &str = "quids-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vocabulary,
    params: Vec<NamedTensor>,
}

impl Model {
    pub fn new(mut config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        if config.vocab_size == 0 {
            config.vocab_size = vocab.len();
        }
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::arg(format!(
                "config vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut params = ParamStore::default();
        let layout = Layout::build(&config, &mut params);
        Ok(Self {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn output_weight(&self) -> &Matrix {
        self.params.tensor(self.layout.out_w)
    }

    /// Names of the representation-space projection parameters.
    pub fn representation_param_names(&self) -> [&str; 2] {
        [self.params.name(self.layout.rep.0), self.params.name(self.layout.rep.1)]
    }

    /// Names of the disentangling-space projection parameters.
    pub fn disentangle_param_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .layout
            .dis
            .iter()
            .flat_map(|&(w, b)| [self.params.name(w), self.params.name(b)])
            .collect();
        names.dedup();
        names.sort_unstable();
        names.dedup();
        names
    }

    /// Copies the relevant-stream cross-attention weights into the irrelevant stream.
    pub fn tie_cross_attention(&mut self) {
        for layer in &self.layout.dec {
            let (r, i) = (&layer.cross_rel, &layer.cross_irrel);
            for (from, to) in [
                (r.wq, i.wq),
                (r.bq, i.bq),
                (r.wk, i.wk),
                (r.bk, i.bk),
                (r.wv, i.wv),
                (r.bv, i.bv),
                (r.wo, i.wo),
                (r.bo, i.bo),
            ] {
                let m = self.params.tensor(from).clone();
                *self.params.tensor_mut(to) = m;
            }
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(t) => Err(Error::arg(format!("token id {t} outside vocabulary"))),
            None => Ok(()),
        }
    }

    pub fn build_source(&self, query: &[u32], docs: &[Vec<u32>]) -> Result<SourceInput> {
        self.check_tokens(query)?;
        for d in docs {
            self.check_tokens(d)?;
        }
        build_source(query, docs, self.config.max_source_len)
    }

    /// Jointly encodes the query with its documents. Both Siamese sides call this.
    pub fn encode_pair(&self, query: &[u32], docs: &[Vec<u32>]) -> Result<EncoderOutput> {
        let source = self.build_source(query, docs)?;
        let mut s = Session::new(self, false);
        let enc = s.encode(&source);
        Ok(EncoderOutput {
            hidden: s.tape.value(enc.hidden).clone(),
            tokens: source.tokens,
            spans: source.spans,
        })
    }

    /// One representation-space vector per document span.
    pub fn pool_document_reps(&self, out: &EncoderOutput) -> Result<Vec<EmbeddingVector>> {
        let (w, b) = self.layout.rep;
        pool_spans(&out.hidden, &out.spans, self.params.tensor(w), self.params.tensor(b))?
            .into_iter()
            .map(EmbeddingVector::new)
            .collect()
    }

    fn check_encoding(&self, out: &EncoderOutput) -> Result<()> {
        if out.hidden.cols() != self.config.d_model || out.hidden.rows() != out.tokens.len() {
            return Err(Error::arg(format!(
                "encoder output of shape {:?} for {} tokens does not match d_model {}",
                out.hidden.shape(),
                out.tokens.len(),
                self.config.d_model
            )));
        }
        Ok(())
    }

    fn check_prefix(&self, prefix: &[u32]) -> Result<()> {
        if prefix.is_empty() || prefix.len() > self.config.max_target_len {
            return Err(Error::arg(format!(
                "target prefix length {} outside 1..={}",
                prefix.len(),
                self.config.max_target_len
            )));
        }
        self.check_tokens(prefix)
    }

    pub fn decoder_forward(
        &self,
        prefix: &[u32],
        rel: &EncoderOutput,
        irrel: IrrelevantInput<'_>,
        capture_attention: bool,
    ) -> Result<DecoderStates> {
        self.check_prefix(prefix)?;
        self.check_encoding(rel)?;
        let mut s = Session::new(self, false);
        let rel_var = s.encoding_constant(rel);
        let irrel_var = match irrel {
            IrrelevantInput::Encoded(out) => {
                self.check_encoding(out)?;
                Some(s.encoding_constant(out))
            }
            IrrelevantInput::Null => None,
        };
        let dec = s.decode(
            prefix,
            Cross::Dual {
                rel: rel_var,
                irrel: irrel_var,
            },
        );
        Ok(s.states(&dec, capture_attention))
    }

    /// Reference decoder without either cross-attention stream.
    pub fn self_only_forward(&self, prefix: &[u32]) -> Result<DecoderStates> {
        self.check_prefix(prefix)?;
        let mut s = Session::new(self, false);
        let dec = s.decode(prefix, Cross::SelfOnly);
        Ok(s.states(&dec, false))
    }

    /// `P^vocab` at position `z` of a decoder pass.
    pub fn vocab_distribution(&self, states: &DecoderStates, z: usize) -> Vec<f64> {
        vocab_distribution(self.output_weight(), states.final_hidden.row(z))
    }

    pub fn pool_disentangled(&self, states: &DecoderStates, mask: &[bool]) -> Result<DisentangledEmbeddings> {
        let last = states.last();
        let pool = |m: &Matrix, (w, b): (usize, usize)| {
            pool_masked(m, mask, self.params.tensor(w), self.params.tensor(b))
                .and_then(EmbeddingVector::new)
        };
        Ok(DisentangledEmbeddings {
            f_c: pool(&last.h_self, self.layout.dis[0])?,
            f_r: pool(&last.h_rel, self.layout.dis[1])?,
            f_i: pool(&last.h_irrel, self.layout.dis[2])?,
        })
    }

    /// Teacher-forced pass over a batch; samples are processed independently.
    pub fn forward_teacher_forced(&self, batch: &[PreparedSample]) -> Result<Vec<TeacherForcedOutput>> {
        batch
            .iter()
            .map(|sample| {
                let negative = sample.negative.as_ref().ok_or_else(|| {
                    Error::arg(format!("sample `{}` has no irrelevant document", sample.id))
                })?;
                let rel_src = self.build_source(&sample.query, &sample.relevant)?;
                let irr_src = self.build_source(&sample.query, std::slice::from_ref(negative))?;
                let (input, labels) = sample.decoder_io(self.config.max_target_len);
                self.check_tokens(&input)?;
                let mut s = Session::new(self, false);
                let rel = s.encode(&rel_src);
                let irr = s.encode(&irr_src);
                let dec = s.decode(
                    &input,
                    Cross::Dual {
                        rel: rel.hidden,
                        irrel: Some(irr.hidden),
                    },
                );
                let positions: Vec<usize> = (0..input.len()).collect();
                let dis = s.disentangled(&dec, &positions);
                let reps = s.span_reps(&rel);
                let irr_rep = s.span_reps(&irr);
                let emb = |v: Var| to_embedding(s.tape.value(v));
                Ok(TeacherForcedOutput {
                    logits: s.tape.value(dec.logits).clone(),
                    labels,
                    states: s.states(&dec, true),
                    disentangled: DisentangledEmbeddings {
                        f_c: emb(dis[0]),
                        f_r: emb(dis[1]),
                        f_i: emb(dis[2]),
                    },
                    doc_reps: reps.iter().map(|&v| emb(v)).collect(),
                    irrelevant_rep: emb(irr_rep[0]),
                })
            })
            .collect()
    }

    /// Writes a versioned checkpoint (config, vocabulary, named tensors).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self
                .params
                .iter()
                .map(|(name, m)| NamedTensor {
                    name: name.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                    data: m.data().to_vec(),
                })
                .collect(),
        };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(&file)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let mut model = Model::new(file.config, file.vocab).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if file.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, config implies {}",
                file.params.len(),
                model.params.len()
            )));
        }
        for t in file.params {
            let slot = model
                .params
                .get_mut(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", t.name)))?;
            if slot.shape() != (t.rows, t.cols) || t.data.len() != t.rows * t.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {}x{}, expected {:?}",
                    t.name,
                    t.rows,
                    t.cols,
                    slot.shape()
                )));
            }
            *slot = Matrix::new(t.rows, t.cols, t.data);
        }
        Ok(model)
    }

    /// Loads and checks that config and vocabulary match what the caller expects.
    pub fn load_expecting(path: impl AsRef<Path>, config: &ModelConfig, vocab: &Vocabulary) -> Result<Self> {
        let model = Self::load(path)?;
        if &model.config != config {
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint {:?}, expected {:?}",
                model.config, config
            )));
        }
        if &model.vocab != vocab {
            return Err(Error::Checkpoint(format!(
                "vocabulary mismatch: checkpoint has {} tokens, expected {}",
                model.vocab.len(),
                vocab.len()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let vocab = Vocabulary::from_words((0..59).map(|i| format!("w{i}")));
        Model::new(ModelConfig::tiny(64), vocab).unwrap()
    }

    #[test]
    fn source_layout_and_spans() {
        let src = build_source(&[10, 11, 12], &[vec![20, 21, 22, 23, 24]], 32).unwrap();
        assert_eq!(src.tokens.len(), 11);
        assert_eq!(src.spans, vec![(5, 10)]);
        assert_eq!(src.tokens[0], Vocabulary::BOS);
        assert_eq!(src.tokens[4], Vocabulary::SEP);
        assert_eq!(*src.tokens.last().unwrap(), Vocabulary::EOS);
    }

    #[test]
    fn truncation_drops_from_the_right() {
        let src = build_source(&[10], &[vec![20; 5], vec![30; 5]], 12).unwrap();
        assert_eq!(src.tokens.len(), 12);
        assert_eq!(src.spans, vec![(3, 8), (9, 11)]);
        let src = build_source(&[10], &[vec![20; 9], vec![30; 5]], 12).unwrap();
        assert_eq!(src.spans, vec![(3, 11)]);
        assert!(build_source(&[10; 9], &[vec![20]], 12).is_err());
        assert!(build_source(&[10], &[], 12).is_err());
    }

    #[test]
    fn encoder_shapes_and_siamese_sharing() {
        let m = tiny();
        let out = m.encode_pair(&[10, 11, 12], &[vec![20, 21, 22, 23, 24]]).unwrap();
        assert_eq!(out.hidden.shape(), (11, 16));
        assert_eq!(out.spans, vec![(5, 10)]);
        let again = m.encode_pair(&[10, 11, 12], &[vec![20, 21, 22, 23, 24]]).unwrap();
        assert_eq!(out, again);
        assert_eq!(m.pool_document_reps(&out).unwrap().len(), 1);
    }

    #[test]
    fn pool_spans_identity() {
        let hidden = Matrix::from_rows(&[vec![9.0, 9.0], vec![1.0, 1.0], vec![3.0, 3.0]]);
        let id = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let zero = Matrix::zeros(1, 2);
        let reps = pool_spans(&hidden, &[(1, 3), (0, 1)], &id, &zero).unwrap();
        assert_eq!(reps, vec![vec![2.0, 2.0], vec![9.0, 9.0]]);
        assert!(pool_spans(&hidden, &[(2, 2)], &id, &zero).is_err());
    }

    #[test]
    fn pool_masked_excludes_positions() {
        let rows = Matrix::from_rows(&[vec![1.0, 2.0], vec![5.0, 8.0]]);
        let id = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let zero = Matrix::zeros(1, 2);
        assert_eq!(pool_masked(&rows, &[true, true], &id, &zero).unwrap(), vec![3.0, 5.0]);
        assert_eq!(pool_masked(&rows, &[true, false], &id, &zero).unwrap(), vec![1.0, 2.0]);
        assert!(pool_masked(&rows, &[false, false], &id, &zero).is_err());
    }

    #[test]
    fn zero_output_weight_gives_uniform() {
        let p = vocab_distribution(&Matrix::zeros(4, 8), &[1.0, -2.0, 3.0, 0.5]);
        assert!(p.iter().all(|&x| (x - 0.125).abs() < 1e-15));
    }

    #[test]
    fn decoder_states_shapes_and_normalization() {
        let m = tiny();
        let rel = m.encode_pair(&[10, 11], &[vec![20, 21, 22], vec![23, 24]]).unwrap();
        let irr = m.encode_pair(&[10, 11], &[vec![30, 31, 32, 33]]).unwrap();
        let s = m
            .decoder_forward(&[Vocabulary::BOS, 40, 41], &rel, IrrelevantInput::Encoded(&irr), true)
            .unwrap();
        assert_eq!(s.layers.len(), 2);
        assert_eq!(s.logits.shape(), (3, 64));
        for layer in &s.layers {
            for w in layer.rel_attention.as_ref().unwrap() {
                assert_eq!(w.shape(), (3, rel.tokens.len()));
                for r in 0..3 {
                    assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
            assert_eq!(layer.irrel_attention.as_ref().unwrap()[0].shape(), (3, irr.tokens.len()));
        }
        let p = m.vocab_distribution(&s, 2);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let m = tiny();
        let mut rel = m.encode_pair(&[10], &[vec![20]]).unwrap();
        rel.hidden = Matrix::zeros(rel.tokens.len(), 8);
        assert!(matches!(
            m.decoder_forward(&[Vocabulary::BOS], &rel, IrrelevantInput::Null, false),
            Err(Error::Argument(_))
        ));
        let ok = m.encode_pair(&[10], &[vec![20]]).unwrap();
        assert!(m.decoder_forward(&[Vocabulary::BOS; 17], &ok, IrrelevantInput::Null, false).is_err());
        assert!(m.decoder_forward(&[99], &ok, IrrelevantInput::Null, false).is_err());
    }

    #[test]
    fn null_mode_zeroes_irrelevant_stream() {
        let m = tiny();
        let rel = m.encode_pair(&[10], &[vec![20, 21]]).unwrap();
        let s = m.decoder_forward(&[Vocabulary::BOS, 40], &rel, IrrelevantInput::Null, true).unwrap();
        for l in &s.layers {
            assert!(l.h_irrel.data().iter().all(|&v| v == 0.0));
            assert!(l.irrel_attention.is_none());
            assert_eq!(l.h_combine.data(), Matrix::new(2, 16, l.h_self.data().iter().zip(l.h_rel.data()).map(|(a, b)| a + b).collect()).data());
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.params(), m.params());
        let mut other = m.config().clone();
        other.heads = 4;
        assert!(matches!(
            Model::load_expecting(&path, &other, m.vocab()),
            Err(Error::Checkpoint(_))
        ));
        let small = Vocabulary::from_words(["x"]);
        assert!(Model::load_expecting(&path, m.config(), &small).is_err());
    }
}
