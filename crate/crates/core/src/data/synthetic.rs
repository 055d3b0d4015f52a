//! Labeled synthetic corpus: templated arithmetic tasks whose answers are
//! deterministic functions of the prompt, wrapped in interchangeable filler.
//!
//! Every response reads `intro = answer outro`. The marker, the answer, and
//! eos are Core: given the prompt they admit exactly one continuation. The
//! filler phrases are Trivial: drawn uniformly from pools whose members open
//! with distinct words, so no model can drive their probability high.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{jsonl::LabelEntry, vocab::tokenize, Category, Sample};
use crate::error::{Error, Result};

/// Prompt skeletons; `{op}`, `{a}`, `{b}` are substituted per sample.
const TEMPLATES: [&str; 10] = [
    "{op} of {a} and {b}",
    "what is the {op} of {a} and {b} ?",
    "compute the {op} of {a} and {b}",
    "find the {op} of {a} and {b} please",
    "give me the {op} of {a} and {b}",
    "work out the {op} of {a} and {b}",
    "tell me the {op} for {a} and {b}",
    "what is the {op} between {a} and {b} ?",
    "state the {op} of {a} and {b}",
    "now report the {op} of {a} and {b}",
];

/// Arithmetic tasks with their interchangeable surface forms.
const OPS: [(&str, &[&str]); 4] = [
    ("sum", &["sum", "total", "addition"]),
    ("max", &["max", "maximum", "larger"]),
    ("min", &["min", "minimum", "smaller"]),
    ("gap", &["gap", "difference", "spread"]),
];

const INTROS: [&str; 24] = [
    "well",
    "okay then",
    "right",
    "so",
    "now then",
    "alright",
    "hmm",
    "listen",
    "look here",
    "indeed",
    "surely",
    "certainly",
    "fine",
    "good question",
    "yes",
    "truly",
    "ah",
    "very well",
    "sure thing",
    "granted",
    "understood",
    "checking this",
    "one moment",
    "let us see",
];

const OUTROS: [&str; 24] = [
    "there",
    "you see",
    "done",
    "easy",
    "simple",
    "clear enough",
    "no doubt",
    "that settles it",
    "as shown",
    "plainly",
    "evidently",
    "naturally",
    "obviously",
    "quite so",
    "job finished",
    "case closed",
    "beyond dispute",
    "without question",
    "straightforward really",
    "nothing more",
    "all sorted",
    "end of story",
    "moving on",
    "happy to help",
];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub samples: usize,
    /// How many of the prompt templates to draw from.
    pub templates: usize,
    /// Arguments range over 0..=max_arg; sums reach 2·max_arg.
    pub max_arg: u32,
    pub id_prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 2000,
            templates: TEMPLATES.len(),
            max_arg: 20,
            id_prefix: "syn".to_string(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("synthetic: samples must be positive".into()));
        }
        if self.templates == 0 || self.templates > TEMPLATES.len() {
            return Err(Error::Config(format!(
                "synthetic: templates must be in 1..={}, got {}",
                TEMPLATES.len(),
                self.templates
            )));
        }
        if self.max_arg == 0 {
            return Err(Error::Config("synthetic: max_arg must be positive".into()));
        }
        if self.id_prefix.is_empty() {
            return Err(Error::Config("synthetic: id_prefix must be non-empty".into()));
        }
        Ok(())
    }
}

/// The answer function Core tokens are accountable to.
pub fn answer(op: &str, a: u32, b: u32) -> u32 {
    match op {
        "sum" => a + b,
        "max" => a.max(b),
        "min" => a.min(b),
        "gap" => a.abs_diff(b),
        other => unreachable!("unknown op {other}"),
    }
}

/// Generate `spec.samples` labeled samples, bit-identical per seed.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Vec<Sample>, Vec<LabelEntry>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(2 * spec.samples);
    let width = (spec.samples.saturating_sub(1)).max(1).ilog10() as usize + 1;
    for i in 0..spec.samples {
        let template = TEMPLATES[rng.gen_range(0..spec.templates)];
        let (op, surfaces) = OPS[rng.gen_range(0..OPS.len())];
        let surface = surfaces[rng.gen_range(0..surfaces.len())];
        let a = rng.gen_range(0..=spec.max_arg);
        let b = rng.gen_range(0..=spec.max_arg);
        let intro = INTROS[rng.gen_range(0..INTROS.len())];
        let outro = OUTROS[rng.gen_range(0..OUTROS.len())];

        let prompt = template
            .replace("{op}", surface)
            .replace("{a}", &a.to_string())
            .replace("{b}", &b.to_string());
        let response = format!("{intro} = {} {outro}", answer(op, a, b));

        let id = format!("{}-{:0width$}", spec.id_prefix, i);
        let intro_len = tokenize(intro).len();
        let outro_len = tokenize(outro).len();
        // Response tokens: intro, "=", answer, outro; eos sits one past them.
        let marker = intro_len;
        let eos = intro_len + 2 + outro_len;
        let trivial: Vec<usize> = (0..marker).chain(marker + 2..eos).collect();
        labels.push(LabelEntry {
            sample_id: id.clone(),
            positions: vec![marker, marker + 1, eos],
            category: Category::Core,
        });
        labels.push(LabelEntry {
            sample_id: id.clone(),
            positions: trivial,
            category: Category::Trivial,
        });
        samples.push(Sample::new(id, prompt, vec![response])?);
    }
    Ok((samples, labels))
}
