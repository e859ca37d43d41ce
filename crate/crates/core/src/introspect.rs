//! Cross-attention export and heatmap rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::corpus::Vocabulary;
use crate::decoding::{DecodeMode, Generation};
use crate::error::{Error, Result};
use crate::model::DecoderStates;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    Mean,
    Head(usize),
}

/// Which layer and heads an exported matrix comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregation {
    /// 0-based; `None` means the last decoder layer.
    pub layer: Option<usize>,
    pub heads: HeadPolicy,
}

impl Default for Aggregation {
    fn default() -> Self {
        Self {
            layer: None,
            heads: HeadPolicy::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub sample_id: String,
    pub mode: DecodeMode,
    pub layer: usize,
    pub heads: HeadPolicy,
    /// Emitted tokens, BOS excluded.
    pub generated_tokens: Vec<String>,
    pub relevant_tokens: Vec<String>,
    pub irrelevant_tokens: Option<Vec<String>>,
    /// `[generated × relevant input]`.
    pub relevant: Matrix,
    /// `[generated × irrelevant input]`; absent in null mode.
    pub irrelevant: Option<Matrix>,
}

fn token_strings(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or("<?>").to_string())
        .collect()
}

fn aggregate(per_head: &[Matrix], heads: HeadPolicy) -> Result<Matrix> {
    match heads {
        HeadPolicy::Head(h) => per_head
            .get(h)
            .cloned()
            .ok_or_else(|| Error::arg(format!("head {h} out of range ({} heads)", per_head.len()))),
        HeadPolicy::Mean => {
            let mut acc = Matrix::zeros(per_head[0].rows(), per_head[0].cols());
            for m in per_head {
                acc.add_assign(m);
            }
            let k = per_head.len() as f64;
            Ok(acc.map(|v| v / k))
        }
    }
}

/// Builds the record from decoder states captured over the emitted prefix.
///
/// Row `j` of each matrix is the attention used to emit `generated[j]`.
pub fn export_attention(
    sample_id: &str,
    mode: DecodeMode,
    generated: &[u32],
    states: &DecoderStates,
    relevant_input: &[u32],
    irrelevant_input: Option<&[u32]>,
    vocab: &Vocabulary,
    aggregation: Aggregation,
) -> Result<AttentionRecord> {
    let layer = aggregation.layer.unwrap_or(states.layers.len() - 1);
    let ls = states
        .layers
        .get(layer)
        .ok_or_else(|| Error::arg(format!("layer {layer} out of range")))?;
    let missing = || Error::arg("decoder states carry no attention; decode with capture enabled");
    let rel_heads = ls.rel_attention.as_ref().ok_or_else(missing)?;
    let relevant = aggregate(rel_heads, aggregation.heads)?;
    if relevant.rows() != generated.len() || relevant.cols() != relevant_input.len() {
        return Err(Error::arg(format!(
            "relevant attention {:?} does not match {} generated × {} input tokens",
            relevant.shape(),
            generated.len(),
            relevant_input.len()
        )));
    }
    let irrelevant = match (mode, irrelevant_input) {
        (DecodeMode::NullIrrelevant, _) | (_, None) => None,
        (_, Some(input)) => {
            let m = aggregate(ls.irrel_attention.as_ref().ok_or_else(missing)?, aggregation.heads)?;
            if m.rows() != generated.len() || m.cols() != input.len() {
                return Err(Error::arg("irrelevant attention does not match token lists"));
            }
            Some(m)
        }
    };
    Ok(AttentionRecord {
        sample_id: sample_id.to_string(),
        mode,
        layer,
        heads: aggregation.heads,
        generated_tokens: token_strings(generated, vocab),
        relevant_tokens: token_strings(relevant_input, vocab),
        irrelevant_tokens: irrelevant.as_ref().and(irrelevant_input).map(|i| token_strings(i, vocab)),
        relevant,
        irrelevant,
    })
}

/// [`export_attention`] for a generation decoded with capture.
pub fn export_generation(gen: &Generation, vocab: &Vocabulary, aggregation: Aggregation) -> Result<AttentionRecord> {
    let states = gen
        .states
        .as_ref()
        .ok_or_else(|| Error::arg("generation has no captured states; decode with capture enabled"))?;
    export_attention(
        &gen.id,
        gen.mode,
        gen.hypothesis.generated(),
        states,
        &gen.relevant_input,
        gen.irrelevant_input.as_deref(),
        vocab,
        aggregation,
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const CELL_W: usize = 64;
const CELL_H: usize = 22;

fn render_stream(svg: &mut String, y: usize, title: &str, tokens: &[String], weights: &[f64]) -> usize {
    let max = weights.iter().copied().fold(0.0, f64::max);
    let _ = writeln!(svg, r#"<text x="4" y="{}" font-size="12">{}</text>"#, y + 14, escape(title));
    let y = y + CELL_H;
    for (i, (tok, &w)) in tokens.iter().zip(weights).enumerate() {
        let shade = if max > 0.0 { w / max } else { 0.0 };
        let x = 4 + i * CELL_W;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="rgb(220,40,40)" fill-opacity="{shade:.4}" stroke="gray"><title>{} {w:.6}</title></rect>"#,
            escape(tok)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="10">{}</text>"#,
            x + 3,
            y + 15,
            escape(tok)
        );
    }
    y + CELL_H + 8
}

/// Self-contained SVG: one heatmap row per stream, colored by the focus
/// token's weights relative to that row's maximum.
pub fn render_attention(record: &AttentionRecord, focus: usize) -> Result<String> {
    if focus >= record.generated_tokens.len() {
        return Err(Error::arg(format!(
            "focus token {focus} out of range ({} generated)",
            record.generated_tokens.len()
        )));
    }
    let width_tokens = record
        .relevant_tokens
        .len()
        .max(record.irrelevant_tokens.as_ref().map_or(0, Vec::len));
    let streams = if record.irrelevant.is_some() { 2 } else { 1 };
    let width = 8 + width_tokens * CELL_W;
    let height = 30 + streams * (2 * CELL_H + 8);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="4" y="16" font-size="13">{} · token {} `{}` · layer {} · {}</text>"#,
        escape(&record.sample_id),
        focus,
        escape(&record.generated_tokens[focus]),
        record.layer,
        record.mode.label()
    );
    let mut y = 24;
    y = render_stream(&mut svg, y, "relevant", &record.relevant_tokens, record.relevant.row(focus));
    if let (Some(m), Some(toks)) = (&record.irrelevant, &record.irrelevant_tokens) {
        render_stream(&mut svg, y, "irrelevant", toks, m.row(focus));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Mean over generated rows of the relevant-stream weight on tokens for which
/// `is_distractor` holds.
pub fn distractor_attention_mass(record: &AttentionRecord, is_distractor: impl Fn(&str) -> bool) -> f64 {
    let cols: Vec<usize> = (0..record.relevant_tokens.len())
        .filter(|&c| is_distractor(&record.relevant_tokens[c]))
        .collect();
    let rows = record.relevant.rows();
    if rows == 0 {
        return 0.0;
    }
    let total: f64 = (0..rows)
        .map(|r| cols.iter().map(|&c| record.relevant.get(r, c)).sum::<f64>())
        .sum();
    total / rows as f64
}
