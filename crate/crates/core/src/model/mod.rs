//! Tiny decoder-only transformer: pre-norm RMS blocks, causal multi-head
//! attention, GELU feed-forward, sinusoidal positions, untied output head.
//!
//! Parameters live as plain [`TensorData`] between steps. Each forward pass
//! binds them onto a fresh tape — trainable ones as leaves, frozen ones as
//! constants — and returns the leaf handles so an optimizer can read
//! gradients by name.

mod checkpoint;
mod lora;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use lora::LoraAdapter;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tape, Tensor, TensorData};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: TensorData,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub(crate) params: Vec<Param>,
    pub(crate) adapters: Vec<LoraAdapter>,
    /// Sinusoidal table [max_seq_len × d_model]; derived, never trained.
    pos: TensorData,
}

/// One bound forward pass: the logits node plus every trainable leaf.
pub struct Forward {
    pub logits: Tensor,
    pub bound: Vec<(String, Tensor)>,
}

pub fn init_model(config: &ModelConfig) -> Result<TransformerModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
    let mut params = Vec::new();
    let matrix = |rng: &mut ChaCha8Rng, name: String, rows: usize, cols: usize| Param {
        name,
        value: normal(rng, &[rows, cols], 1.0 / (rows as f64).sqrt()),
        trainable: true,
    };
    params.push(Param {
        name: "embed.tokens".into(),
        value: normal(&mut rng, &[v, d], 0.5),
        trainable: true,
    });
    for l in 0..config.n_layers {
        params.push(ones_param(format!("layer{l}.attn.norm"), d));
        for w in ["wq", "wk", "wv", "wo"] {
            params.push(matrix(&mut rng, format!("layer{l}.attn.{w}"), d, d));
        }
        params.push(ones_param(format!("layer{l}.ff.norm"), d));
        params.push(matrix(&mut rng, format!("layer{l}.ff.w1"), d, f));
        params.push(matrix(&mut rng, format!("layer{l}.ff.w2"), f, d));
    }
    params.push(ones_param("final.norm".into(), d));
    params.push(matrix(&mut rng, "output.proj".into(), d, v));
    Ok(TransformerModel {
        pos: sinusoid_table(config.max_seq_len, d),
        config: config.clone(),
        params,
        adapters: Vec::new(),
    })
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], sigma: f64) -> TensorData {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    TensorData::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

fn ones_param(name: String, d: usize) -> Param {
    Param {
        name,
        value: TensorData::new(vec![d], vec![1.0; d]).expect("shape/data agree"),
        trainable: true,
    }
}

fn sinusoid_table(max_len: usize, d: usize) -> TensorData {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d.div_ceil(2) {
            let omega = (10000f64).powf(-2.0 * i as f64 / d as f64);
            let angle = pos as f64 * omega;
            data[pos * d + 2 * i] = angle.sin();
            if 2 * i + 1 < d {
                data[pos * d + 2 * i + 1] = angle.cos();
            }
        }
    }
    TensorData::new(vec![max_len, d], data).expect("shape/data agree")
}

impl TransformerModel {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Mutable access to any stored array, base or adapter, by bound name.
    pub fn array_mut(&mut self, name: &str) -> Option<&mut TensorData> {
        if let Some(p) = self.params.iter_mut().find(|p| p.name == name) {
            return Some(&mut p.value);
        }
        self.adapters.iter_mut().find_map(|a| {
            if name == lora::a_name(&a.target) {
                Some(&mut a.a)
            } else if name == lora::b_name(&a.target) {
                Some(&mut a.b)
            } else {
                None
            }
        })
    }

    /// Names that bind as leaves, in binding order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect();
        for a in &self.adapters {
            names.push(lora::a_name(&a.target));
            names.push(lora::b_name(&a.target));
        }
        names
    }

    pub fn total_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum::<usize>()
            + self
                .adapters
                .iter()
                .map(|a| a.a.numel() + a.b.numel())
                .sum::<usize>()
    }

    fn adapter_for(&self, name: &str) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == name)
    }

    /// Bind parameters and run the causal forward pass.
    pub fn forward(&self, tape: &Tape, batch: &TokenBatch) -> Result<Forward> {
        let (b, t) = (batch.batch_size(), batch.seq_len());
        if t > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let mut bound = Vec::new();
        let mut bind = |p: &Param| -> Tensor {
            if p.trainable {
                let leaf = tape.leaf(p.value.clone());
                bound.push((p.name.clone(), leaf.clone()));
                leaf
            } else {
                tape.constant(p.value.clone())
            }
        };
        // Bind in parameter order so optimizer traversal is fixed.
        let handles: Vec<Tensor> = self.params.iter().map(&mut bind).collect();
        drop(bind);
        let mut adapter_handles = Vec::new();
        for a in &self.adapters {
            let ha = tape.leaf(a.a.clone());
            let hb = tape.leaf(a.b.clone());
            bound.push((lora::a_name(&a.target), ha.clone()));
            bound.push((lora::b_name(&a.target), hb.clone()));
            adapter_handles.push((a.target.clone(), ha, hb, a.scale()));
        }
        let handle = |name: &str| -> Tensor {
            let idx = self.params.iter().position(|p| p.name == name).unwrap();
            handles[idx].clone()
        };
        // Projection through a (possibly adapted) weight matrix.
        let proj = |x: &Tensor, name: &str| -> Result<Tensor> {
            let base = x.matmul(&handle(name))?;
            match self.adapter_for(name) {
                None => Ok(base),
                Some(_) => {
                    let (_, ha, hb, scale) = adapter_handles
                        .iter()
                        .find(|(target, ..)| target == name)
                        .expect("adapter bound above");
                    base.add(&x.matmul(ha)?.matmul(hb)?.scale(*scale))
                }
            }
        };

        let ids = batch.flat_input_ids();
        let embed = handle("embed.tokens").embed(&ids, &[b, t])?;
        let pos = tape.constant(tile_positions(&self.pos, b, t));
        let mut x = embed.add(&pos)?;
        for l in 0..self.config.n_layers {
            let h = x.rms_norm(&handle(&format!("layer{l}.attn.norm")), RMS_EPS)?;
            let q = proj(&h, &format!("layer{l}.attn.wq"))?;
            let k = proj(&h, &format!("layer{l}.attn.wk"))?;
            let v = proj(&h, &format!("layer{l}.attn.wv"))?;
            let attn = q.causal_attention(&k, &v, self.config.n_heads)?;
            x = x.add(&proj(&attn, &format!("layer{l}.attn.wo"))?)?;
            let h = x.rms_norm(&handle(&format!("layer{l}.ff.norm")), RMS_EPS)?;
            let f = proj(&h, &format!("layer{l}.ff.w1"))?.gelu();
            x = x.add(&proj(&f, &format!("layer{l}.ff.w2"))?)?;
        }
        let h = x.rms_norm(&handle("final.norm"), RMS_EPS)?;
        let logits = proj(&h, "output.proj")?;
        Ok(Forward { logits, bound })
    }

    /// Detached target probabilities p_t = softmax(z_t)[label_t] per
    /// position; pad positions report 0.
    pub fn sequence_probs(&self, batch: &TokenBatch) -> Result<TensorData> {
        let tape = Tape::new();
        let logits = self.forward(&tape, batch)?.logits.value();
        let (b, t) = (batch.batch_size(), batch.seq_len());
        let v = self.config.vocab_size;
        let mut out = vec![0.0; b * t];
        let mut row = vec![0.0; v];
        for bi in 0..b {
            for ti in 0..t {
                if batch.pad_mask[bi][ti] {
                    continue;
                }
                row.copy_from_slice(&logits.data()[(bi * t + ti) * v..][..v]);
                kernels::softmax_row_inplace(&mut row);
                out[bi * t + ti] = row[batch.labels[bi][ti]];
            }
        }
        TensorData::new(vec![b, t], out)
    }
}

fn tile_positions(pos: &TensorData, b: usize, t: usize) -> TensorData {
    let d = pos.shape()[1];
    let mut data = Vec::with_capacity(b * t * d);
    for _ in 0..b {
        data.extend_from_slice(&pos.data()[..t * d]);
    }
    TensorData::new(vec![b, t, d], data).expect("shape/data agree")
}

/// The conventional adapter placement: attention query and value
/// projections of every layer.
pub fn default_lora_targets(config: &ModelConfig) -> Vec<String> {
    (0..config.n_layers)
        .flat_map(|l| [format!("layer{l}.attn.wq"), format!("layer{l}.attn.wv")])
        .collect()
}
