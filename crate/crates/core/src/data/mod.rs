//! Corpus types, tokenization, and batching with prompt-loss masking.

pub mod jsonl;
pub mod synthetic;
pub mod vocab;

pub use jsonl::{load_jsonl, load_labels, save_jsonl, save_labels, LabelEntry};
pub use synthetic::{gen_synthetic, SyntheticSpec};
pub use vocab::Vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic role of a supervised token position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Core,
    Trivial,
    Unlabeled,
}

/// One prompt with one or more reference responses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub prompt: String,
    pub responses: Vec<String>,
}

impl Sample {
    pub fn new(id: String, prompt: String, responses: Vec<String>) -> Result<Self> {
        if responses.is_empty() {
            return Err(Error::Data(format!("sample {id}: no responses")));
        }
        if vocab::normalize(&prompt).is_empty()
            || responses.iter().any(|r| vocab::normalize(r).is_empty())
        {
            return Err(Error::Data(format!(
                "sample {id}: empty text after normalization"
            )));
        }
        Ok(Self {
            id,
            prompt,
            responses,
        })
    }
}

/// Collated rows ready for the model. Each row is bos·prompt·response·eos,
/// right-padded to the longest row.
///
/// Positions are classified by the label they predict: `prompt_mask` marks
/// positions whose next token is still part of the prompt, `pad_mask` marks
/// positions with no real next-token label (the trailing eos input and all
/// padding). Supervised positions are the remainder; their labels run
/// r_1..r_m then eos, and `t_b` counts them per row.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub input_ids: Vec<Vec<usize>>,
    pub labels: Vec<Vec<usize>>,
    pub prompt_mask: Vec<Vec<bool>>,
    pub pad_mask: Vec<Vec<bool>>,
    /// Per-row supervised length T = |y*| (response tokens + eos).
    pub t_b: Vec<usize>,
    /// First supervised position per row (= number of prompt tokens).
    pub resp_start: Vec<usize>,
    /// Row provenance: index of the source sample and of the response used.
    pub row_sample: Vec<usize>,
    pub row_ref: Vec<usize>,
    pub sample_ids: Vec<String>,
}

impl TokenBatch {
    pub fn batch_size(&self) -> usize {
        self.input_ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.input_ids.first().map_or(0, Vec::len)
    }

    pub fn supervised(&self, b: usize, t: usize) -> bool {
        !self.prompt_mask[b][t] && !self.pad_mask[b][t]
    }

    /// Total supervised positions in the batch.
    pub fn supervised_count(&self) -> usize {
        self.t_b.iter().sum()
    }

    /// Row-major token ids for embedding lookups.
    pub fn flat_input_ids(&self) -> Vec<usize> {
        self.input_ids.iter().flatten().copied().collect()
    }

    pub fn flat_labels(&self) -> Vec<usize> {
        self.labels.iter().flatten().copied().collect()
    }
}

/// Vocabulary over every prompt and response in `samples`.
pub fn vocab_from_samples(samples: &[Sample], max_size: usize) -> Result<Vocab> {
    Vocab::build(
        samples
            .iter()
            .flat_map(|s| std::iter::once(s.prompt.as_str()).chain(s.responses.iter().map(String::as_str))),
        max_size,
    )
}

/// Tokenize, wrap, truncate, and pad `samples` into one batch. Every
/// response of every sample becomes its own row, in input order.
pub fn collate(samples: &[Sample], vocab: &Vocab, max_len: usize) -> Result<TokenBatch> {
    if samples.is_empty() {
        return Err(Error::Contract("collate: empty batch request".to_string()));
    }
    if max_len < 4 {
        return Err(Error::Contract(format!(
            "collate: max_len must be at least 4, got {max_len}"
        )));
    }
    let mut rows: Vec<(Vec<usize>, usize)> = Vec::new(); // (sequence, prompt token count)
    let mut row_sample = Vec::new();
    let mut row_ref = Vec::new();
    let mut sample_ids = Vec::new();
    for (si, sample) in samples.iter().enumerate() {
        let prompt_ids = vocab.encode(&sample.prompt);
        for (ri, response) in sample.responses.iter().enumerate() {
            let mut seq = Vec::with_capacity(max_len);
            seq.push(vocab::BOS);
            seq.extend_from_slice(&prompt_ids);
            seq.extend(vocab.encode(response));
            seq.push(vocab::EOS);
            seq.truncate(max_len);
            // At least one response label must survive truncation:
            // position k (the last prompt token) predicts r_1 at k+1.
            let k = prompt_ids.len();
            if seq.len() < k + 2 {
                return Err(Error::Data(format!(
                    "sample {}: response fully truncated at max_len {max_len}",
                    sample.id
                )));
            }
            rows.push((seq, k));
            row_sample.push(si);
            row_ref.push(ri);
            sample_ids.push(sample.id.clone());
        }
    }
    let t = rows.iter().map(|(s, _)| s.len()).max().unwrap();
    let b = rows.len();
    let mut batch = TokenBatch {
        input_ids: vec![vec![vocab::PAD; t]; b],
        labels: vec![vec![vocab::PAD; t]; b],
        prompt_mask: vec![vec![false; t]; b],
        pad_mask: vec![vec![false; t]; b],
        t_b: vec![0; b],
        resp_start: Vec::with_capacity(b),
        row_sample,
        row_ref,
        sample_ids,
    };
    for (bi, (seq, k)) in rows.into_iter().enumerate() {
        let l = seq.len();
        batch.input_ids[bi][..l].copy_from_slice(&seq);
        for ti in 0..t {
            if ti + 1 < l {
                batch.labels[bi][ti] = seq[ti + 1];
            }
            if ti < k {
                batch.prompt_mask[bi][ti] = true;
            } else if ti + 1 >= l {
                batch.pad_mask[bi][ti] = true;
            }
        }
        batch.t_b[bi] = l - 1 - k;
        batch.resp_start.push(k);
    }
    Ok(batch)
}

/// One batch per reference index for multi-reference objectives: batch i
/// holds every sample's i-th response, so rows align across batches.
/// Samples with more than `k` responses contribute their first `k`.
pub fn collate_multi(
    samples: &[Sample],
    k: usize,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<TokenBatch>> {
    if k == 0 {
        return Err(Error::Contract(
            "collate_multi: reference count must be positive".to_string(),
        ));
    }
    for sample in samples {
        if sample.responses.len() < k {
            return Err(Error::Data(format!(
                "sample {}: has {} references, multi-reference objective needs {k}",
                sample.id,
                sample.responses.len()
            )));
        }
    }
    (0..k)
        .map(|ri| {
            let slice: Vec<Sample> = samples
                .iter()
                .map(|s| Sample {
                    id: s.id.clone(),
                    prompt: s.prompt.clone(),
                    responses: vec![s.responses[ri].clone()],
                })
                .collect();
            collate(&slice, vocab, max_len)
        })
        .collect()
}
