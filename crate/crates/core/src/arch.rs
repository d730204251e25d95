//! Architecture space: which depths, widths, and kernels a subnet may pick,
//! and the concrete per-subnet choices.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Fixed stem convolution in front of the elastic stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Classifier head: global average pool, optional dropout, linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Dropout probability applied to pooled features in training mode only.
    #[serde(default)]
    pub dropout: f64,
}

/// One elastic stage: a run of conv blocks sharing a maximal width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub max_depth: usize,
    pub depth_choices: Vec<usize>,
    pub max_width: usize,
    pub width_fraction_choices: Vec<f64>,
    pub kernel_choices: Vec<usize>,
    /// Stride of the first block; later blocks use stride 1.
    pub stride: usize,
}

/// The full architecture space: every subnet is one choice per elastic
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpace {
    pub input_channels: usize,
    pub num_classes: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
    /// Input resolutions; a single entry by default.
    pub resolution_choices: Vec<usize>,
}

fn sorted_ascending<T: PartialOrd>(xs: &[T]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

impl ArchSpace {
    /// Check the structural invariants of the space.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Validation(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.stem.kernel % 2 == 0 || self.stem.stride == 0 {
            return Err(Error::Validation(
                "stem kernel must be odd and stride >= 1".into(),
            ));
        }
        if self.stages.is_empty() {
            return Err(Error::Validation("space needs at least one stage".into()));
        }
        if self.resolution_choices.is_empty() || !sorted_ascending(&self.resolution_choices) {
            return Err(Error::Validation(
                "resolution_choices must be non-empty and sorted ascending".into(),
            ));
        }
        for (si, st) in self.stages.iter().enumerate() {
            let dim = |what: &str, msg: String| {
                Err(Error::Validation(format!("stage {si} {what}: {msg}")))
            };
            if st.depth_choices.is_empty() || !sorted_ascending(&st.depth_choices) {
                return dim("depth_choices", "must be non-empty and sorted ascending".into());
            }
            if st.depth_choices[0] < 1 || *st.depth_choices.last().unwrap() != st.max_depth {
                return dim(
                    "depth_choices",
                    format!("must lie in [1, max_depth] with max == max_depth {}", st.max_depth),
                );
            }
            if st.width_fraction_choices.is_empty()
                || !sorted_ascending(&st.width_fraction_choices)
            {
                return dim(
                    "width_fraction_choices",
                    "must be non-empty and sorted ascending".into(),
                );
            }
            if st.width_fraction_choices[0] <= 0.0
                || (st.width_fraction_choices.last().unwrap() - 1.0).abs() > 1e-12
            {
                return dim(
                    "width_fraction_choices",
                    "must lie in (0, 1] with max == 1".into(),
                );
            }
            if st.kernel_choices.is_empty() || !sorted_ascending(&st.kernel_choices) {
                return dim("kernel_choices", "must be non-empty and sorted ascending".into());
            }
            if st.kernel_choices.iter().any(|&k| !matches!(k, 1 | 3 | 5)) {
                return dim("kernel_choices", "must be a subset of {1, 3, 5}".into());
            }
            if st.stride == 0 {
                return dim("stride", "must be >= 1".into());
            }
            if st.max_width == 0 {
                return dim("max_width", "must be >= 1".into());
            }
        }
        if self.cardinality() < 2.0 {
            return Err(Error::Validation(
                "space must contain at least 2 architectures".into(),
            ));
        }
        Ok(())
    }

    /// |A| as f64 (product of choice counts over every elastic dimension).
    pub fn cardinality(&self) -> f64 {
        let mut n = self.resolution_choices.len() as f64;
        for st in &self.stages {
            n *= st.depth_choices.len() as f64;
            for _ in 0..st.max_depth {
                n *= (st.width_fraction_choices.len() * st.kernel_choices.len()) as f64;
            }
        }
        n
    }

    /// Largest architecture: the max of every choice list.
    pub fn a_full(&self) -> ArchConfig {
        self.pick(|choices_len| choices_len - 1)
    }

    /// Smallest architecture: the min of every choice list.
    pub fn a_min(&self) -> ArchConfig {
        self.pick(|_| 0)
    }

    fn pick(&self, f: impl Fn(usize) -> usize) -> ArchConfig {
        ArchConfig {
            depth: self
                .stages
                .iter()
                .map(|s| s.depth_choices[f(s.depth_choices.len())])
                .collect(),
            width_frac: self
                .stages
                .iter()
                .map(|s| {
                    (0..s.max_depth)
                        .map(|_| s.width_fraction_choices[f(s.width_fraction_choices.len())])
                        .collect()
                })
                .collect(),
            kernel: self
                .stages
                .iter()
                .map(|s| {
                    (0..s.max_depth)
                        .map(|_| s.kernel_choices[f(s.kernel_choices.len())])
                        .collect()
                })
                .collect(),
            resolution: self.resolution_choices[f(self.resolution_choices.len())],
        }
    }

    /// Validate that `config` is a member of this space; errors name the
    /// offending dimension.
    pub fn validate_config(&self, config: &ArchConfig) -> Result<()> {
        if config.depth.len() != self.stages.len()
            || config.width_frac.len() != self.stages.len()
            || config.kernel.len() != self.stages.len()
        {
            return Err(Error::Validation(format!(
                "config has {} stages, space has {}",
                config.depth.len(),
                self.stages.len()
            )));
        }
        if !self.resolution_choices.contains(&config.resolution) {
            return Err(Error::Validation(format!(
                "resolution {} not in {:?}",
                config.resolution, self.resolution_choices
            )));
        }
        for (si, st) in self.stages.iter().enumerate() {
            if !st.depth_choices.contains(&config.depth[si]) {
                return Err(Error::Validation(format!(
                    "stage {si} depth {} not in {:?}",
                    config.depth[si], st.depth_choices
                )));
            }
            if config.width_frac[si].len() != st.max_depth
                || config.kernel[si].len() != st.max_depth
            {
                return Err(Error::Validation(format!(
                    "stage {si} needs {} per-layer entries",
                    st.max_depth
                )));
            }
            for l in 0..st.max_depth {
                let w = config.width_frac[si][l];
                if !st.width_fraction_choices.iter().any(|&c| c == w) {
                    return Err(Error::Validation(format!(
                        "stage {si} layer {l} width_fraction {w} not in {:?}",
                        st.width_fraction_choices
                    )));
                }
                let k = config.kernel[si][l];
                if !st.kernel_choices.contains(&k) {
                    return Err(Error::Validation(format!(
                        "stage {si} layer {l} kernel {k} not in {:?}",
                        st.kernel_choices
                    )));
                }
            }
        }
        Ok(())
    }

    /// Draw one config with every elastic dimension uniform over its choices.
    pub fn sample_one(&self, rng: &mut ChaCha20Rng) -> ArchConfig {
        ArchConfig {
            depth: self
                .stages
                .iter()
                .map(|s| s.depth_choices[rng.gen_range(0..s.depth_choices.len())])
                .collect(),
            width_frac: self
                .stages
                .iter()
                .map(|s| {
                    (0..s.max_depth)
                        .map(|_| {
                            s.width_fraction_choices
                                [rng.gen_range(0..s.width_fraction_choices.len())]
                        })
                        .collect()
                })
                .collect(),
            kernel: self
                .stages
                .iter()
                .map(|s| {
                    (0..s.max_depth)
                        .map(|_| s.kernel_choices[rng.gen_range(0..s.kernel_choices.len())])
                        .collect()
                })
                .collect(),
            resolution: self.resolution_choices
                [rng.gen_range(0..self.resolution_choices.len())],
        }
    }

    /// Draw `k` independent uniform configs.
    pub fn sample_uniform(&self, k: usize, rng: &mut ChaCha20Rng) -> Vec<ArchConfig> {
        (0..k).map(|_| self.sample_one(rng)).collect()
    }

    /// Draw one uniform config from `A \ {a_full}` by rejection. Fails on
    /// (near-)degenerate spaces where the full model dominates the mass.
    pub fn sample_one_excluding_full(&self, rng: &mut ChaCha20Rng) -> Result<ArchConfig> {
        let full = self.a_full();
        for _ in 0..10_000 {
            let c = self.sample_one(rng);
            if c != full {
                return Ok(c);
            }
        }
        Err(Error::Validation(
            "could not sample a non-full architecture (degenerate space)".into(),
        ))
    }

    /// Sandwich rule: `[a_full, a_min, r1, r2]` with the random pair drawn
    /// uniformly from the whole space.
    pub fn sandwich_sample(&self, rng: &mut ChaCha20Rng) -> Vec<ArchConfig> {
        vec![
            self.a_full(),
            self.a_min(),
            self.sample_one(rng),
            self.sample_one(rng),
        ]
    }

    /// Enumerate every config of the space, or `None` when |A| exceeds
    /// `limit`.
    pub fn enumerate_all(&self, limit: usize) -> Option<Vec<ArchConfig>> {
        if self.cardinality() > limit as f64 {
            return None;
        }
        let mut configs = vec![self.a_min()];
        // Cartesian product, one elastic dimension at a time.
        let extend = |configs: Vec<ArchConfig>,
                      apply: &dyn Fn(&ArchConfig, usize) -> ArchConfig,
                      n: usize| {
            let mut out = Vec::with_capacity(configs.len() * n);
            for c in &configs {
                for i in 0..n {
                    out.push(apply(c, i));
                }
            }
            out
        };
        for (si, st) in self.stages.iter().enumerate() {
            configs = extend(
                configs,
                &|c, i| {
                    let mut c = c.clone();
                    c.depth[si] = st.depth_choices[i];
                    c
                },
                st.depth_choices.len(),
            );
            for l in 0..st.max_depth {
                configs = extend(
                    configs,
                    &|c, i| {
                        let mut c = c.clone();
                        c.width_frac[si][l] = st.width_fraction_choices[i];
                        c
                    },
                    st.width_fraction_choices.len(),
                );
                configs = extend(
                    configs,
                    &|c, i| {
                        let mut c = c.clone();
                        c.kernel[si][l] = st.kernel_choices[i];
                        c
                    },
                    st.kernel_choices.len(),
                );
            }
        }
        configs = extend(
            configs,
            &|c, i| {
                let mut c = c.clone();
                c.resolution = self.resolution_choices[i];
                c
            },
            self.resolution_choices.len(),
        );
        Some(configs)
    }
}

/// One concrete architecture: per-stage depth plus per-layer width fraction
/// and kernel size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub depth: Vec<usize>,
    pub width_frac: Vec<Vec<f64>>,
    pub kernel: Vec<Vec<usize>>,
    pub resolution: usize,
}

impl ArchConfig {
    /// Canonical digest string, also parseable back via `FromStr`.
    pub fn digest(&self) -> String {
        self.to_string()
    }

    /// True when `other` is elementwise >= in every elastic dimension.
    pub fn dominated_by(&self, other: &ArchConfig) -> bool {
        self.resolution <= other.resolution
            && self.depth.iter().zip(&other.depth).all(|(a, b)| a <= b)
            && self
                .width_frac
                .iter()
                .flatten()
                .zip(other.width_frac.iter().flatten())
                .all(|(a, b)| a <= b)
            && self
                .kernel
                .iter()
                .flatten()
                .zip(other.kernel.iter().flatten())
                .all(|(a, b)| a <= b)
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join =
            |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let joinf =
            |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        write!(
            f,
            "d={};w={};k={};r={}",
            join(&self.depth),
            self.width_frac
                .iter()
                .map(|s| joinf(s))
                .collect::<Vec<_>>()
                .join("|"),
            self.kernel
                .iter()
                .map(|s| join(s))
                .collect::<Vec<_>>()
                .join("|"),
            self.resolution
        )
    }
}

impl FromStr for ArchConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Validation(format!("bad config digest {s:?}: {msg}"));
        let mut depth = None;
        let mut width = None;
        let mut kernel = None;
        let mut resolution = None;
        for part in s.split(';') {
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| bad("expected key=value parts"))?;
            match key {
                "d" => {
                    depth = Some(
                        val.split(',')
                            .map(|x| x.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| bad("depth"))?,
                    )
                }
                "w" => {
                    width = Some(
                        val.split('|')
                            .map(|stage| {
                                stage
                                    .split(',')
                                    .map(|x| x.parse::<f64>())
                                    .collect::<std::result::Result<Vec<_>, _>>()
                            })
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| bad("width"))?,
                    )
                }
                "k" => {
                    kernel = Some(
                        val.split('|')
                            .map(|stage| {
                                stage
                                    .split(',')
                                    .map(|x| x.parse::<usize>())
                                    .collect::<std::result::Result<Vec<_>, _>>()
                            })
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| bad("kernel"))?,
                    )
                }
                "r" => resolution = Some(val.parse::<usize>().map_err(|_| bad("resolution"))?),
                _ => return Err(bad("unknown key")),
            }
        }
        Ok(ArchConfig {
            depth: depth.ok_or_else(|| bad("missing d="))?,
            width_frac: width.ok_or_else(|| bad("missing w="))?,
            kernel: kernel.ok_or_else(|| bad("missing k="))?,
            resolution: resolution.ok_or_else(|| bad("missing r="))?,
        })
    }
}

/// A small two-stage space used across the test suites.
pub fn demo_space() -> ArchSpace {
    ArchSpace {
        input_channels: 1,
        num_classes: 10,
        stem: StemSpec {
            out_channels: 4,
            kernel: 3,
            stride: 1,
        },
        stages: vec![
            StageSpec {
                max_depth: 2,
                depth_choices: vec![1, 2],
                max_width: 8,
                width_fraction_choices: vec![0.5, 1.0],
                kernel_choices: vec![3, 5],
                stride: 2,
            },
            StageSpec {
                max_depth: 2,
                depth_choices: vec![1, 2],
                max_width: 16,
                width_fraction_choices: vec![0.5, 1.0],
                kernel_choices: vec![3, 5],
                stride: 2,
            },
        ],
        head: HeadSpec { dropout: 0.0 },
        resolution_choices: vec![16],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn demo_space_is_valid() {
        demo_space().validate().unwrap();
    }

    #[test]
    fn full_and_min_select_extremes() {
        let space = demo_space();
        let full = space.a_full();
        assert_eq!(full.depth, vec![2, 2]);
        assert_eq!(full.width_frac[0], vec![1.0, 1.0]);
        assert_eq!(full.kernel[1], vec![5, 5]);
        let min = space.a_min();
        assert_eq!(min.depth, vec![1, 1]);
        assert_eq!(min.width_frac[1], vec![0.5, 0.5]);
        assert_eq!(min.kernel[0], vec![3, 3]);
    }

    #[test]
    fn config_validation_names_dimension() {
        let space = demo_space();
        let mut c = space.a_full();
        c.width_frac[1][0] = 0.3;
        let err = space.validate_config(&c).unwrap_err();
        assert!(err.to_string().contains("stage 1 layer 0 width_fraction"));
    }

    #[test]
    fn digest_round_trips() {
        let space = demo_space();
        let mut rng = stream(3, "digest");
        for _ in 0..20 {
            let c = space.sample_one(&mut rng);
            let parsed: ArchConfig = c.digest().parse().unwrap();
            assert_eq!(parsed, c);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let space = demo_space();
        let a = space.sample_uniform(5, &mut stream(9, "s"));
        let b = space.sample_uniform(5, &mut stream(9, "s"));
        assert_eq!(a, b);
    }

    #[test]
    fn sandwich_layout() {
        let space = demo_space();
        let mut rng = stream(1, "sw");
        let s = space.sandwich_sample(&mut rng);
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], space.a_full());
        assert_eq!(s[1], space.a_min());
    }

    #[test]
    fn degenerate_space_sandwich_is_all_full() {
        let mut space = demo_space();
        for st in &mut space.stages {
            st.depth_choices = vec![st.max_depth];
            st.width_fraction_choices = vec![1.0];
            st.kernel_choices = vec![3];
        }
        let mut rng = stream(1, "sw");
        let s = space.sandwich_sample(&mut rng);
        let full = space.a_full();
        assert!(s.iter().all(|c| *c == full));
    }

    #[test]
    fn uniform_frequency_two_choice_dimension() {
        // 10k draws of the stage-0 depth (2 choices) land in [0.47, 0.53].
        let space = demo_space();
        let mut rng = stream(42, "freq");
        let mut count = 0usize;
        let n = 10_000;
        for _ in 0..n {
            if space.sample_one(&mut rng).depth[0] == 1 {
                count += 1;
            }
        }
        let f = count as f64 / n as f64;
        assert!((0.47..=0.53).contains(&f), "frequency {f}");
    }

    #[test]
    fn enumerate_matches_cardinality() {
        let space = demo_space();
        // 2 stages: depth 2 choices, 2 layers x (2 widths x 2 kernels) each.
        let expect = (2.0f64 * 16.0) * (2.0 * 16.0);
        assert_eq!(space.cardinality(), expect);
        assert!(space.enumerate_all(64).is_none());
        let all = space.enumerate_all(2000).unwrap();
        assert_eq!(all.len(), expect as usize);
        // No duplicates.
        let mut digests: Vec<String> = all.iter().map(|c| c.digest()).collect();
        digests.sort();
        digests.dedup();
        assert_eq!(digests.len(), all.len());
    }
}
