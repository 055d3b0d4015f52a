//! Held-out evaluation: supervised-token accuracy, greedy answer-span
//! exact match, and perplexity over supervised positions.

use crate::data::{collate, vocab, Sample, TokenBatch, Vocab};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::objectives::token_losses;
use crate::tensor::Tape;

const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub token_accuracy: f64,
    pub answer_em: f64,
    pub perplexity: f64,
    pub supervised_tokens: usize,
}

/// Greedy continuation of `bos·prompt` until eos or `max_len` total
/// positions; returns only the generated tail. Argmax ties resolve to the
/// lowest token id.
pub fn decode_greedy(
    model: &TransformerModel,
    prompt_ids: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut seq = Vec::with_capacity(max_len);
    seq.push(vocab::BOS);
    seq.extend_from_slice(prompt_ids);
    if seq.len() >= max_len {
        return Err(Error::Data(format!(
            "decode_greedy: prompt length {} leaves no room under max_len {max_len}",
            seq.len()
        )));
    }
    let start = seq.len();
    while seq.len() < max_len {
        let t = seq.len();
        let batch = TokenBatch {
            input_ids: vec![seq.clone()],
            labels: vec![vec![vocab::PAD; t]],
            prompt_mask: vec![vec![true; t]],
            pad_mask: vec![vec![false; t]],
            t_b: vec![t],
            resp_start: vec![0],
            row_sample: vec![0],
            row_ref: vec![0],
            sample_ids: vec!["decode".to_string()],
        };
        let tape = Tape::new();
        let logits = model.forward(&tape, &batch)?.logits.value();
        let v = logits.last_dim();
        let row = &logits.data()[(t - 1) * v..t * v];
        let mut best = 0;
        for (i, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = i;
            }
        }
        seq.push(best);
        if best == vocab::EOS {
            break;
        }
    }
    Ok(seq[start..].to_vec())
}

/// Token following the first marker token, if any.
fn answer_token(tokens: &[usize], marker: usize) -> Option<usize> {
    tokens
        .windows(2)
        .find(|w| w[0] == marker)
        .map(|w| w[1])
}

/// Answer-span exact match for one sample: greedy-decode the prompt, then
/// compare the token after the first "=" against the reference's. A
/// missing marker on either side scores 0.
fn answer_match(
    model: &TransformerModel,
    sample: &Sample,
    vocab: &Vocab,
    max_len: usize,
) -> Result<bool> {
    let Some(marker) = vocab.id("=") else {
        return Ok(false);
    };
    let reference = vocab.encode(&sample.responses[0]);
    let Some(expected) = answer_token(&reference, marker) else {
        return Ok(false);
    };
    let generated = decode_greedy(model, &vocab.encode(&sample.prompt), max_len)?;
    Ok(answer_token(&generated, marker) == Some(expected))
}

/// Metrics over a held-out set. The caller is responsible for keeping
/// `heldout` disjoint from training samples by id.
pub fn evaluate(
    model: &TransformerModel,
    heldout: &[Sample],
    vocab: &Vocab,
    max_len: usize,
) -> Result<EvalMetrics> {
    if vocab.size() != model.config.vocab_size {
        return Err(Error::Contract(format!(
            "vocabulary size {} does not match the model's {}",
            vocab.size(),
            model.config.vocab_size
        )));
    }
    if heldout.is_empty() {
        return Err(Error::Data("evaluate: empty held-out set".into()));
    }
    let mut correct = 0usize;
    let mut supervised = 0usize;
    let mut nll_sum = 0.0;
    for chunk in heldout.chunks(EVAL_CHUNK) {
        let batch = collate(chunk, vocab, max_len)?;
        let tape = Tape::new();
        let logits = model.forward(&tape, &batch)?.logits.value();
        let v = logits.last_dim();
        let labels = batch.flat_labels();
        let losses = token_losses(&logits, &labels)?;
        let t = batch.seq_len();
        for bi in 0..batch.batch_size() {
            for ti in 0..t {
                if !batch.supervised(bi, ti) {
                    continue;
                }
                let flat = bi * t + ti;
                let row = &logits.data()[flat * v..(flat + 1) * v];
                let mut best = 0;
                for (i, &z) in row.iter().enumerate() {
                    if z > row[best] {
                        best = i;
                    }
                }
                if best == labels[flat] {
                    correct += 1;
                }
                nll_sum += losses[flat];
                supervised += 1;
            }
        }
    }
    let mut matches = 0usize;
    for sample in heldout {
        if answer_match(model, sample, vocab, max_len)? {
            matches += 1;
        }
    }
    Ok(EvalMetrics {
        token_accuracy: correct as f64 / supervised as f64,
        answer_em: matches as f64 / heldout.len() as f64,
        perplexity: (nll_sum / supervised as f64).exp(),
        supervised_tokens: supervised,
    })
}
