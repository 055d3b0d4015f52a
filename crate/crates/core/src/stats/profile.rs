//! Forward-pass probability profiling of supervised tokens, tagged with
//! core/trivial categories from a label file.

use std::collections::HashMap;

use crate::data::{collate, Category, LabelEntry, Sample, TokenBatch, Vocab};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::objectives::token_losses;
use crate::tensor::{kernels, Tape};

/// Rows collated per forward pass while profiling.
const PROFILE_CHUNK: usize = 16;

#[derive(Debug, Clone)]
pub struct TokenRecord {
    pub sample_id: String,
    /// Response-token index (0 = first response token), matching the
    /// position convention of label files.
    pub position: usize,
    pub token_id: usize,
    pub p: f64,
    pub entropy: f64,
    pub category: Category,
}

struct CategoryIndex {
    by_sample: HashMap<String, HashMap<usize, Category>>,
}

impl CategoryIndex {
    fn new(labels: &[LabelEntry]) -> Self {
        let mut by_sample: HashMap<String, HashMap<usize, Category>> = HashMap::new();
        for entry in labels {
            let slot = by_sample.entry(entry.sample_id.clone()).or_default();
            for &pos in &entry.positions {
                slot.insert(pos, entry.category);
            }
        }
        CategoryIndex { by_sample }
    }

    fn lookup(&self, sample_id: &str, position: usize) -> Category {
        self.by_sample
            .get(sample_id)
            .and_then(|m| m.get(&position).copied())
            .unwrap_or(Category::Unlabeled)
    }
}

fn profile_batch(
    model: &TransformerModel,
    batch: &TokenBatch,
    index: &CategoryIndex,
    out: &mut Vec<TokenRecord>,
) -> Result<()> {
    let tape = Tape::new();
    let logits = model.forward(&tape, batch)?.logits.value();
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
            let mut probs = logits.data()[flat * v..(flat + 1) * v].to_vec();
            kernels::softmax_row_inplace(&mut probs);
            let position = ti - batch.resp_start[bi];
            let sample_id = &batch.sample_ids[bi];
            out.push(TokenRecord {
                sample_id: sample_id.clone(),
                position,
                token_id: labels[flat],
                p: (-losses[flat]).exp(),
                entropy: kernels::row_entropy(&probs),
                category: index.lookup(sample_id, position),
            });
        }
    }
    Ok(())
}

/// One record per supervised position, in dataset order.
pub fn profile_tokens(
    model: &TransformerModel,
    samples: &[Sample],
    vocab: &Vocab,
    labels: &[LabelEntry],
    max_len: usize,
) -> Result<Vec<TokenRecord>> {
    if vocab.size() != model.config.vocab_size {
        return Err(Error::Contract(format!(
            "vocabulary size {} does not match the model's {}",
            vocab.size(),
            model.config.vocab_size
        )));
    }
    let index = CategoryIndex::new(labels);
    let mut records = Vec::new();
    for chunk in samples.chunks(PROFILE_CHUNK) {
        let batch = collate(chunk, vocab, max_len)?;
        profile_batch(model, &batch, &index, &mut records)?;
    }
    Ok(records)
}

pub const PROFILE_HEADER: &str = "sample_id,position,token_id,p,entropy,category";

pub fn profile_csv(records: &[TokenRecord]) -> String {
    let mut out = String::from(PROFILE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sample_id,
            r.position,
            r.token_id,
            r.p,
            r.entropy,
            match r.category {
                Category::Core => "core",
                Category::Trivial => "trivial",
                Category::Unlabeled => "unlabeled",
            }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, vocab_from_samples, SyntheticSpec};
    use crate::model::{init_model, ModelConfig};

    fn lab_setup() -> (TransformerModel, Vec<Sample>, Vocab, Vec<LabelEntry>) {
        let spec = SyntheticSpec {
            samples: 6,
            ..SyntheticSpec::default()
        };
        let (samples, labels) = gen_synthetic(&spec, 3).unwrap();
        let vocab = vocab_from_samples(&samples, 256).unwrap();
        let model = init_model(&ModelConfig {
            vocab_size: vocab.size(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 64,
            seed: 5,
        })
        .unwrap();
        (model, samples, vocab, labels)
    }

    #[test]
    fn records_cover_every_supervised_position_with_valid_stats() {
        let (model, samples, vocab, labels) = lab_setup();
        let records = profile_tokens(&model, &samples, &vocab, &labels, 64).unwrap();
        let expected: usize = samples
            .iter()
            .map(|s| vocab.encode(&s.responses[0]).len() + 1)
            .sum();
        assert_eq!(records.len(), expected);
        let ln_v = (vocab.size() as f64).ln();
        for r in &records {
            assert!((0.0..=1.0).contains(&r.p), "p = {}", r.p);
            assert!(r.entropy.is_finite() && r.entropy >= 0.0 && r.entropy <= ln_v + 1e-9);
        }
    }

    #[test]
    fn categories_follow_the_label_file() {
        let (model, samples, vocab, labels) = lab_setup();
        let records = profile_tokens(&model, &samples, &vocab, &labels, 64).unwrap();
        let index = CategoryIndex::new(&labels);
        for r in &records {
            assert_eq!(r.category, index.lookup(&r.sample_id, r.position));
        }
        // The synthetic labels bipartition every response position.
        assert!(records.iter().all(|r| r.category != Category::Unlabeled));
        assert!(records.iter().any(|r| r.category == Category::Core));
        assert!(records.iter().any(|r| r.category == Category::Trivial));
    }

    #[test]
    fn determinism_across_invocations() {
        let (model, samples, vocab, labels) = lab_setup();
        let a = profile_csv(&profile_tokens(&model, &samples, &vocab, &labels, 64).unwrap());
        let b = profile_csv(&profile_tokens(&model, &samples, &vocab, &labels, 64).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn vocabulary_mismatch_is_a_contract_error() {
        let (model, samples, vocab, labels) = lab_setup();
        let bigger = {
            let mut texts = samples.clone();
            texts.push(Sample {
                id: "extra".into(),
                prompt: "zzz unseen words qqq".into(),
                responses: vec!["xxx yyy".into()],
            });
            vocab_from_samples(&texts, 512).unwrap()
        };
        assert_ne!(bigger.size(), vocab.size());
        let err = profile_tokens(&model, &samples, &bigger, &labels, 64).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
