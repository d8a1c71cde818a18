//! A toy captioning task whose captions contain tokens fixed by words that
//! come *later* in the sentence: the verb ("is/are", "sits/sit") agrees with
//! a quantity word that follows it, and "a/an" depends on the next colour.
//! Region features carry the attributes plus noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::CaptionRecord;
use crate::error::{Error, Result};
use crate::vocab::SPECIAL_NAMES;

const FIXED_WORDS: [&str; 11] = ["there", "is", "are", "a", "an", "two", "three", "sits", "sit", "on", "the"];
const TABLE: &str = "table";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    /// `(singular, plural)` pairs.
    pub objects: Vec<(String, String)>,
    pub colors: Vec<String>,
    /// Quantities, each in `1..=3`.
    pub counts: Vec<u8>,
    pub n_templates: usize,
    pub n_patch: usize,
    pub d_feat: usize,
    /// Noise on the object and distractor regions.
    pub noise: f64,
    /// Noise on the layout region, which picks the opening words.
    pub template_noise: f64,
    /// Noise on the colour region, which drives the article choice.
    pub color_noise: f64,
    /// Noise on the quantity region, which drives verb agreement.
    pub count_noise: f64,
    pub max_vocab: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        let objects = [("cat", "cats"), ("dog", "dogs"), ("bird", "birds"), ("car", "cars"), ("apple", "apples")];
        Self {
            objects: objects.iter().map(|(s, p)| (s.to_string(), p.to_string())).collect(),
            colors: ["red", "blue", "orange", "amber"].iter().map(|s| s.to_string()).collect(),
            counts: vec![1, 2, 3],
            n_templates: 2,
            n_patch: 4,
            d_feat: 16,
            noise: 0.5,
            template_noise: 1.5,
            color_noise: 2.0,
            count_noise: 1.5,
            max_vocab: 120,
            seed: 1,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
        }
    }
}

/// Latent content of one synthetic image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Attributes {
    pub template: usize,
    pub object: usize,
    pub color: usize,
    pub count: u8,
}

fn starts_with_vowel(w: &str) -> bool {
    w.starts_with(['a', 'e', 'i', 'o', 'u'])
}

/// Vocabulary and realisation rules derived from a [`SyntheticTaskSpec`].
#[derive(Debug, Clone)]
pub struct Grammar {
    spec: SyntheticTaskSpec,
    words: Vec<String>,
}

pub struct Corpus {
    pub train: Vec<CaptionRecord>,
    pub val: Vec<CaptionRecord>,
    pub test: Vec<CaptionRecord>,
}

impl Grammar {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        if spec.objects.is_empty() || spec.colors.is_empty() || spec.counts.is_empty() {
            return Err(Error::Spec("attribute inventories must be non-empty".into()));
        }
        if spec.n_train == 0 || spec.n_val == 0 || spec.n_test == 0 {
            return Err(Error::Spec("split sizes must be at least 1".into()));
        }
        if !(1..=2).contains(&spec.n_templates) {
            return Err(Error::Spec("n_templates must be 1 or 2".into()));
        }
        if spec.counts.iter().any(|c| !(1..=3).contains(c)) {
            return Err(Error::Spec("counts must lie in 1..=3".into()));
        }
        if spec.n_patch < 4 || spec.d_feat == 0 {
            return Err(Error::Spec("need at least 4 patches and a positive feature dim".into()));
        }
        let noise = [spec.noise, spec.template_noise, spec.color_noise, spec.count_noise];
        if noise.iter().any(|n| !n.is_finite() || *n < 0.0) {
            return Err(Error::Spec("noise levels must be finite and non-negative".into()));
        }
        // The verb of both templates precedes the quantity word it agrees
        // with; without both numbers it would carry no future dependency.
        if !spec.counts.contains(&1) || !spec.counts.iter().any(|&c| c > 1) {
            return Err(Error::Spec("counts must include 1 and a plural quantity".into()));
        }
        let mut words: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        words.extend(FIXED_WORDS.iter().map(|s| s.to_string()));
        words.push(TABLE.into());
        words.extend(spec.colors.iter().cloned());
        for (s, p) in &spec.objects {
            words.push(s.clone());
            words.push(p.clone());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(w) = words.iter().find(|w| !seen.insert(w.as_str())) {
            return Err(Error::Spec(format!("word {w:?} appears twice in the inventory")));
        }
        if words.len() > spec.max_vocab {
            return Err(Error::Spec(format!("vocabulary of {} words exceeds max_vocab {}", words.len(), spec.max_vocab)));
        }
        Ok(Self { spec, words })
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn id(&self, word: &str) -> usize {
        self.words.iter().position(|w| w == word).expect("word in vocabulary")
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.words.get(t).map_or("<unk>", String::as_str)).collect::<Vec<_>>().join(" ")
    }

    /// The unique gold caption for a set of attributes, without `<eos>`.
    pub fn realize(&self, a: &Attributes) -> Vec<usize> {
        let color = &self.spec.colors[a.color];
        let (sg, pl) = &self.spec.objects[a.object];
        let quantity = match a.count {
            1 if starts_with_vowel(color) => "an",
            1 => "a",
            2 => "two",
            _ => "three",
        };
        let noun = if a.count == 1 { sg } else { pl };
        let words: Vec<&str> = match a.template {
            0 => vec!["there", if a.count == 1 { "is" } else { "are" }, quantity, color, noun],
            _ => vec!["on", "the", TABLE, if a.count == 1 { "sits" } else { "sit" }, quantity, color, noun],
        };
        words.into_iter().map(|w| self.id(w)).collect()
    }

    /// Inverse of [`Grammar::realize`]; `None` for anything it cannot emit.
    pub fn parse(&self, tokens: &[usize]) -> Option<Attributes> {
        let w: Vec<&str> = tokens.iter().map(|&t| self.words.get(t).map(String::as_str)).collect::<Option<_>>()?;
        let (template, rest) = match w.first() {
            Some(&"there") => (0, w.get(2..5)?),
            Some(&"on") => (1, w.get(4..7)?),
            _ => return None,
        };
        let color = self.spec.colors.iter().position(|c| c == rest[1])?;
        let count = match rest[0] {
            "a" | "an" => 1,
            "two" => 2,
            "three" => 3,
            _ => return None,
        };
        let object = self.spec.objects.iter().position(|(s, p)| (count == 1 && s == rest[2]) || (count > 1 && p == rest[2]))?;
        let a = Attributes { template, object, color, count };
        (self.realize(&a) == tokens && self.spec.counts.contains(&count) && template < self.spec.n_templates).then_some(a)
    }

    /// Every attribute combination, in a fixed order.
    pub fn enumerate(&self) -> Vec<Attributes> {
        let mut out = Vec::new();
        for template in 0..self.spec.n_templates {
            for object in 0..self.spec.objects.len() {
                for color in 0..self.spec.colors.len() {
                    for &count in &self.spec.counts {
                        out.push(Attributes { template, object, color, count });
                    }
                }
            }
        }
        out
    }

    fn sample(&self, rng: &mut impl Rng) -> Attributes {
        Attributes {
            template: rng.random_range(0..self.spec.n_templates),
            object: rng.random_range(0..self.spec.objects.len()),
            color: rng.random_range(0..self.spec.colors.len()),
            count: self.spec.counts[rng.random_range(0..self.spec.counts.len())],
        }
    }

    /// Generates the three splits. Same spec, same bytes.
    pub fn generate(&self) -> Corpus {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let mut proto = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..s.d_feat).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect()
        };
        let protos = Prototypes {
            template: proto(s.n_templates),
            object: proto(s.objects.len()),
            color: proto(s.colors.len()),
            count: proto(3),
            distractor: proto(1).remove(0),
        };
        let split = |name: &str, n: usize, stream: u64| -> Vec<CaptionRecord> {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            rng.set_stream(stream);
            (0..n)
                .map(|i| {
                    let a = self.sample(&mut rng);
                    let features = self.features(&a, &protos, &mut rng);
                    CaptionRecord { id: format!("{name}-{i:05}"), features, references: vec![self.realize(&a)] }
                })
                .collect()
        };
        Corpus { train: split("train", s.n_train, 1), val: split("val", s.n_val, 2), test: split("test", s.n_test, 3) }
    }

    fn features(&self, a: &Attributes, p: &Prototypes, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let s = &self.spec;
        let mut noisy = |base: &[f64], sigma: f64| -> Vec<f64> {
            base.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let mut patches = vec![
            noisy(&p.template[a.template], s.template_noise),
            noisy(&p.object[a.object], s.noise),
            noisy(&p.color[a.color], s.color_noise),
            noisy(&p.count[a.count as usize - 1], s.count_noise),
        ];
        while patches.len() < s.n_patch {
            patches.push(noisy(&p.distractor, s.noise));
        }
        patches.shuffle(rng);
        patches
    }
}

struct Prototypes {
    template: Vec<Vec<f64>>,
    object: Vec<Vec<f64>>,
    color: Vec<Vec<f64>>,
    count: Vec<Vec<f64>>,
    distractor: Vec<f64>,
}

/// Convenience wrapper: validate `spec` and generate its corpus.
pub fn generate_corpus(spec: &SyntheticTaskSpec) -> Result<Corpus> {
    Ok(Grammar::new(spec.clone())?.generate())
}

