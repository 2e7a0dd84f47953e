use std::fmt;
use std::str::FromStr;

use crate::branch::Labels;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Flow,
    Obj,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Flow, Modality::Obj];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
            Modality::Obj => "obj",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality `{s}` (expected rgb, flow or obj)")))
    }
}

/// `N x D` snippet features, row-major (one row per snippet, oldest first).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    snippets: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(snippets: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if snippets == 0 || dim == 0 || data.len() != snippets * dim {
            return Err(Error::shape(
                "FeatureSequence",
                format!("{snippets} x {dim} with {} values", data.len()),
            ));
        }
        Ok(Self { snippets, dim, data })
    }

    pub fn snippets(&self) -> usize {
        self.snippets
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// rgb, flow, obj.
    pub features: [FeatureSequence; 3],
    pub action: usize,
    pub verb: usize,
    pub noun: usize,
}

impl Sample {
    pub fn modality(&self, m: Modality) -> &FeatureSequence {
        &self.features[m.index()]
    }

    pub fn snippets(&self) -> usize {
        self.features[0].snippets
    }
}

/// Class counts per head, inferred as `max label + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub actions: usize,
    pub verbs: usize,
    pub nouns: usize,
}

impl ClassCounts {
    pub fn cover(&self, other: &ClassCounts) -> ClassCounts {
        ClassCounts {
            actions: self.actions.max(other.actions),
            verbs: self.verbs.max(other.verbs),
            nouns: self.nouns.max(other.nouns),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    /// Checks that every sample shares the same `N` and per-modality widths.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let n = first.snippets();
            let dims = first.features.each_ref().map(|f| f.dim);
            for s in &samples {
                for (m, f) in Modality::ALL.iter().zip(&s.features) {
                    if f.snippets != n {
                        return Err(Error::Dataset(format!(
                            "sample `{}`: {m} has {} snippets, expected {n}",
                            s.id, f.snippets
                        )));
                    }
                    if f.dim != dims[m.index()] {
                        return Err(Error::Dataset(format!(
                            "sample `{}`: {m} features have width {}, expected {}",
                            s.id,
                            f.dim,
                            dims[m.index()]
                        )));
                    }
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn snippets(&self) -> Option<usize> {
        self.samples.first().map(Sample::snippets)
    }

    pub fn dim(&self, m: Modality) -> Option<usize> {
        self.samples.first().map(|s| s.modality(m).dim)
    }

    pub fn class_counts(&self) -> ClassCounts {
        let max = |f: fn(&Sample) -> usize| self.samples.iter().map(f).max().map_or(0, |m| m + 1);
        ClassCounts {
            actions: max(|s| s.action),
            verbs: max(|s| s.verb),
            nouns: max(|s| s.noun),
        }
    }

    /// Features of samples `idx` as a `[B, D, n]` tensor holding the most
    /// recent `n` snippets.
    pub fn batch<T: Scalar>(&self, m: Modality, idx: &[usize], n: usize) -> Result<Tensor<T>> {
        let total = self.snippets().ok_or_else(|| Error::Dataset("empty dataset".into()))?;
        if n == 0 || n > total {
            return Err(Error::SequenceTooShort { got: total, required: n });
        }
        let d = self.dim(m).expect("non-empty");
        let skip = total - n;
        let mut out = vec![T::zero(); idx.len() * d * n];
        for (b, &i) in idx.iter().enumerate() {
            let seq = self
                .samples
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))?
                .modality(m);
            let block = &mut out[b * d * n..(b + 1) * d * n];
            for t in 0..n {
                for (c, &v) in seq.row(skip + t).iter().enumerate() {
                    block[c * n + t] = T::from_f64(v as f64);
                }
            }
        }
        Tensor::new(vec![idx.len(), d, n], out)
    }

    pub fn labels(&self, idx: &[usize]) -> Labels {
        Labels {
            action: idx.iter().map(|&i| self.samples[i].action).collect(),
            verb: idx.iter().map(|&i| self.samples[i].verb).collect(),
            noun: idx.iter().map(|&i| self.samples[i].noun).collect(),
        }
    }

    pub fn all_labels(&self) -> Labels {
        self.labels(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Keeps the first `per_class` samples of every action class.
    pub fn take_per_class(&self, per_class: usize) -> Dataset {
        let mut seen = std::collections::HashMap::new();
        let samples = self
            .samples
            .iter()
            .filter(|s| {
                let c = seen.entry(s.action).or_insert(0usize);
                *c += 1;
                *c <= per_class
            })
            .cloned()
            .collect();
        Dataset { samples }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize, d: usize, offset: f32) -> FeatureSequence {
        FeatureSequence::new(n, d, (0..n * d).map(|i| offset + i as f32).collect()).unwrap()
    }

    fn sample(id: &str, n: usize, action: usize) -> Sample {
        Sample {
            id: id.into(),
            features: [seq(n, 2, 0.0), seq(n, 3, 100.0), seq(n, 1, 200.0)],
            action,
            verb: action % 2,
            noun: action / 2,
        }
    }

    #[test]
    fn batch_transposes_and_keeps_recent() {
        let ds = Dataset::new(vec![sample("a", 4, 0), sample("b", 4, 3)]).unwrap();
        let x: Tensor<f64> = ds.batch(Modality::Rgb, &[1], 2).unwrap();
        assert_eq!(x.shape(), &[1, 2, 2]);
        // rows 2 and 3 of a 4 x 2 sequence: [[4, 5], [6, 7]]
        assert_eq!(x.data(), &[4.0, 6.0, 5.0, 7.0]);
        assert!(ds.batch::<f32>(Modality::Rgb, &[0], 5).is_err());
        assert_eq!(
            ds.class_counts(),
            ClassCounts {
                actions: 4,
                verbs: 2,
                nouns: 2
            }
        );
    }

    #[test]
    fn rejects_ragged_samples() {
        assert!(Dataset::new(vec![sample("a", 4, 0), sample("b", 3, 0)]).is_err());
        let mut bad = sample("c", 4, 0);
        bad.features[1] = seq(4, 5, 0.0);
        assert!(Dataset::new(vec![sample("a", 4, 0), bad]).is_err());
    }

    #[test]
    fn per_class_subset() {
        let ds = Dataset::new((0..9).map(|i| sample(&i.to_string(), 2, i % 3)).collect()).unwrap();
        let sub = ds.take_per_class(2);
        assert_eq!(sub.len(), 6);
        assert_eq!(sub.samples()[5].id, "5");
    }
}
