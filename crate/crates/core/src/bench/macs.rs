//! Analytic multiply-accumulate counts of one forward pass.

use super::lstm::LstmConfig;
use crate::branch::BranchConfig;
use crate::error::Result;

/// MACs of one sample, split into sequence processing and classifier heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MacCount {
    pub sequence: u64,
    pub heads: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.sequence + self.heads
    }
}

/// One convolution layer producing `n_out` steps.
pub fn conv_macs(c_in: usize, c_out: usize, kernel: usize, n_out: usize) -> u64 {
    (c_in * c_out * kernel * n_out) as u64
}

/// TCN branch on an `n`-step input: embedding plus every block over its
/// full output length, then the three linear heads.
pub fn tcn_macs(config: &BranchConfig, n: usize) -> Result<MacCount> {
    let c = config.channels;
    let mut sequence = conv_macs(config.input_dim, c, 1, n);
    for len in config.block_lengths(n)? {
        sequence += conv_macs(c, c, config.kernel, len);
    }
    let heads = (c * (config.num_actions + config.num_verbs + config.num_nouns)) as u64;
    Ok(MacCount { sequence, heads })
}

/// Encoder over `n` steps and decoder over `decoder_steps`, four gates each.
pub fn lstm_macs(config: &LstmConfig, n: usize) -> MacCount {
    let h = config.hidden;
    let encoder = n * 4 * h * (config.input_dim + h);
    let decoder = config.decoder_steps * 4 * h * (h + h);
    MacCount {
        sequence: (encoder + decoder) as u64,
        heads: (h * config.num_classes) as u64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Tcn { config: BranchConfig, snippets: usize },
    Lstm { config: LstmConfig, snippets: usize },
}

pub fn count_macs(model: &ModelSpec) -> Result<MacCount> {
    match model {
        ModelSpec::Tcn { config, snippets } => tcn_macs(config, *snippets),
        ModelSpec::Lstm { config, snippets } => Ok(lstm_macs(config, *snippets)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::LstmBaseline;
    use crate::branch::Branch;
    use crate::tensor::{Counted, Rng, Tensor};

    #[test]
    fn reference_counts() {
        let tcn = tcn_macs(&BranchConfig::new(1024, 10, 5, 7), 21).unwrap();
        assert_eq!(tcn.sequence, 22_020_096 + 138_412_032);
        assert_eq!(tcn.heads, 1024 * 22);
        let lstm = lstm_macs(&LstmConfig::new(1024, 1024, 10), 21);
        assert_eq!(lstm.sequence, 176_160_768 + 67_108_864);
        assert_eq!(conv_macs(1, 1, 1, 1), 1);
    }

    #[test]
    fn short_input_rejected() {
        assert!(tcn_macs(&BranchConfig::new(8, 2, 2, 2), 20).is_err());
    }

    #[test]
    fn matches_counting_scalar() {
        let mut rng = Rng::new(11);
        let config = BranchConfig {
            channels: 6,
            dilations: vec![1, 2],
            ..BranchConfig::new(5, 4, 3, 2)
        };
        let branch = Branch::<Counted>::new(config.clone(), &mut rng).unwrap();
        let x = Tensor::<Counted>::normal(&mut rng, 0.0, 1.0, [1, 5, 9]).unwrap();
        let want = tcn_macs(&config, 9).unwrap();
        let (f, seq) = Counted::measure(|| branch.features(&x).unwrap());
        assert_eq!(seq, want.sequence);
        let (_, heads) = Counted::measure(|| {
            for h in &branch.heads {
                h.fc.apply(&f).unwrap();
            }
        });
        assert_eq!(heads, want.heads);

        let lc = LstmConfig::new(5, 4, 3);
        let lstm = LstmBaseline::<Counted>::new(lc.clone(), &mut rng).unwrap();
        let (_, all) = Counted::measure(|| lstm.infer(&x).unwrap());
        assert_eq!(all, lstm_macs(&lc, 9).total());
    }
}
