//! Rollout features for the value probe.
//!
//! A rollout is summarized by mean-pooled hidden states from one layer
//! (prompt segment and reasoning segment separately) plus three entropy
//! statistics. With hidden width d and every block enabled this gives the
//! 2d + 3 layout the probe expects; an optional scalar response-length
//! block exists for ablations and stays off by default.

use crate::error::{CoreError, Result};
use crate::numerics;
use crate::policy::{entropy_stats, RolloutRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMask {
    pub prompt: bool,
    pub reasoning: bool,
    pub entropy: bool,
    pub length: bool,
}

impl FeatureMask {
    pub fn full() -> Self {
        FeatureMask {
            prompt: true,
            reasoning: true,
            entropy: true,
            length: false,
        }
    }

    pub fn any(self) -> bool {
        self.prompt || self.reasoning || self.entropy || self.length
    }

    /// Stable label used in ablation reports, e.g. "prompt+entropy".
    pub fn label(self) -> String {
        let mut parts = Vec::new();
        if self.prompt {
            parts.push("prompt");
        }
        if self.reasoning {
            parts.push("reasoning");
        }
        if self.entropy {
            parts.push("entropy");
        }
        if self.length {
            parts.push("length");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }

    /// Inverse of [`FeatureMask::label`]: parses "full" or a '+'-joined
    /// block list such as "prompt+entropy".
    pub fn from_label(label: &str) -> Result<Self> {
        if label == "full" {
            return Ok(FeatureMask::full());
        }
        let mut mask = FeatureMask {
            prompt: false,
            reasoning: false,
            entropy: false,
            length: false,
        };
        for part in label.split('+') {
            match part {
                "prompt" => mask.prompt = true,
                "reasoning" => mask.reasoning = true,
                "entropy" => mask.entropy = true,
                "length" => mask.length = true,
                other => {
                    return Err(CoreError::Parse(format!(
                        "unknown feature block {other:?}; expected prompt, reasoning, entropy, or length"
                    )))
                }
            }
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureConfig {
    /// Probe layer, 1-based.
    pub layer: usize,
    /// Prompt pooling window: mean of the last `prompt_pool` prompt positions.
    pub prompt_pool: usize,
    /// Reasoning pooling window, same convention.
    pub reasoning_pool: usize,
    pub mask: FeatureMask,
}

impl FeatureConfig {
    /// Last layer, last-10 pooling, hidden-state and entropy blocks on.
    pub fn default_for_layers(num_layers: usize) -> Self {
        FeatureConfig {
            layer: num_layers.max(1),
            prompt_pool: 10,
            reasoning_pool: 10,
            mask: FeatureMask::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer == 0 {
            return Err(CoreError::InvalidConfig("feature layer is 1-based".into()));
        }
        if self.prompt_pool == 0 || self.reasoning_pool == 0 {
            return Err(CoreError::InvalidConfig("pooling windows must be positive".into()));
        }
        if !self.mask.any() {
            return Err(CoreError::InvalidConfig("feature mask selects nothing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub source_rollout_id: u64,
}

impl FeatureVector {
    /// CSV serialization: id first, then the values with full precision.
    pub fn csv_line(&self) -> String {
        let mut line = self.source_rollout_id.to_string();
        for v in &self.values {
            line.push(',');
            line.push_str(&numerics::fmt_f64(*v));
        }
        line
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let mut parts = line.split(',');
        let id = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| CoreError::Parse("empty feature row".into()))?;
        let source_rollout_id = id
            .parse()
            .map_err(|e| CoreError::Parse(format!("feature row id {id:?}: {e}")))?;
        let values = parts
            .map(|p| p.parse().map_err(|e| CoreError::Parse(format!("feature value {p:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        Ok(FeatureVector {
            values,
            source_rollout_id,
        })
    }
}

/// Dimension of a feature vector under this config for hidden width d.
pub fn feature_dim(cfg: &FeatureConfig, hidden_dim: usize) -> usize {
    let mut dim = 0;
    if cfg.mask.prompt {
        dim += hidden_dim;
    }
    if cfg.mask.reasoning {
        dim += hidden_dim;
    }
    if cfg.mask.entropy {
        dim += 3;
    }
    if cfg.mask.length {
        dim += 1;
    }
    dim
}

fn pool(positions: &[usize], layer: usize, record: &RolloutRecord, window: usize) -> Vec<f64> {
    let take = window.min(positions.len());
    let tail = &positions[positions.len() - take..];
    let dim = record.trace.hidden[0][layer].len();
    let mut acc = vec![0.0; dim];
    for &t in tail {
        for (slot, v) in acc.iter_mut().zip(&record.trace.hidden[t][layer]) {
            *slot += v;
        }
    }
    for slot in &mut acc {
        *slot /= take as f64;
    }
    acc
}

/// Pooled-hidden-state and entropy features for one rollout.
///
/// Rollouts that never opened a reasoning segment reuse the prompt pooling
/// for the reasoning block, so the probe input dimension never varies.
pub fn extract_features(record: &RolloutRecord, cfg: &FeatureConfig) -> Result<FeatureVector> {
    cfg.validate()?;
    let num_layers = record
        .trace
        .hidden
        .first()
        .map(Vec::len)
        .ok_or(CoreError::EmptyRollout)?;
    if cfg.layer > num_layers {
        return Err(CoreError::InvalidLayer {
            layer: cfg.layer,
            layers: num_layers,
        });
    }
    let layer = cfg.layer - 1;
    let prompt_len = record.trace.hidden.len() - record.generated.len();
    let prompt_positions: Vec<usize> = (0..prompt_len).collect();
    let reasoning_positions: Vec<usize> =
        (0..record.reasoning_end).map(|i| prompt_len + i).collect();

    let mut values = Vec::new();
    let h_p = pool(&prompt_positions, layer, record, cfg.prompt_pool);
    if cfg.mask.prompt {
        values.extend_from_slice(&h_p);
    }
    if cfg.mask.reasoning {
        if reasoning_positions.is_empty() {
            values.extend_from_slice(&h_p);
        } else {
            values.extend(pool(&reasoning_positions, layer, record, cfg.reasoning_pool));
        }
    }
    if cfg.mask.entropy {
        let stats = entropy_stats(record)?;
        values.push(stats.mean);
        values.push(stats.std);
        values.push(stats.last);
    }
    if cfg.mask.length {
        values.push(record.generated.len() as f64);
    }
    Ok(FeatureVector {
        values,
        source_rollout_id: record.prompt.id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::PromptInstance;
    use crate::policy::HiddenTrace;

    // A hand-built two-layer trace: hidden[t][l][i] = base(t, l) + i/10.
    fn synthetic_record(reasoning_end: usize) -> RolloutRecord {
        let prompt_len = 3;
        let gen_len = 3;
        let dim = 2;
        let hidden: Vec<Vec<Vec<f64>>> = (0..prompt_len + gen_len)
            .map(|t| {
                (0..2)
                    .map(|l| (0..dim).map(|i| (t * 10 + l * 100) as f64 + i as f64 / 10.0).collect())
                    .collect()
            })
            .collect();
        RolloutRecord {
            prompt: PromptInstance {
                id: 42,
                tokens: vec![0, 1, 2],
                ground_truth: 0,
            },
            generated: vec![3, 4, 5],
            reasoning_end,
            trace: HiddenTrace {
                hidden,
                entropies: vec![0.5, 0.7, 0.3],
                logprobs: vec![-1.0, -1.0, -1.0],
            },
            reward: 1.0,
            behavior_logprobs: vec![-1.0, -1.0, -1.0],
        }
    }

    #[test]
    fn full_mask_dimension_is_2d_plus_3() {
        let cfg = FeatureConfig::default_for_layers(2);
        assert_eq!(feature_dim(&cfg, 32), 67);
        assert_eq!(feature_dim(&cfg, 2560), 5123);
        let with_length = FeatureConfig {
            mask: FeatureMask { length: true, ..FeatureMask::full() },
            ..cfg
        };
        assert_eq!(feature_dim(&with_length, 32), 68);
    }

    #[test]
    fn pooled_means_match_hand_computed_averages() {
        let record = synthetic_record(2);
        let cfg = FeatureConfig {
            layer: 1,
            prompt_pool: 2,
            reasoning_pool: 5,
            mask: FeatureMask::full(),
        };
        let fv = extract_features(&record, &cfg).unwrap();
        assert_eq!(fv.values.len(), 2 + 2 + 3);
        // Prompt: mean of positions 1 and 2 at layer 0 -> (10 + 20) / 2.
        assert_eq!(fv.values[0], 15.0);
        assert!((fv.values[1] - 15.1).abs() < 1e-12);
        // Reasoning: window larger than the 2 reasoning positions (3, 4).
        assert_eq!(fv.values[2], 35.0);
        assert!((fv.values[3] - 35.1).abs() < 1e-12);
        // Entropy stats over reasoning entropies [0.5, 0.7].
        assert!((fv.values[4] - 0.6).abs() < 1e-15);
        assert!((fv.values[5] - 0.1).abs() < 1e-12);
        assert!((fv.values[6] - 0.7).abs() < 1e-15);
        assert_eq!(fv.source_rollout_id, 42);

        let layer2 = FeatureConfig { layer: 2, ..cfg };
        let fv2 = extract_features(&record, &layer2).unwrap();
        assert_eq!(fv2.values[0], 115.0);
    }

    #[test]
    fn empty_reasoning_falls_back_to_prompt_pooling() {
        let record = synthetic_record(0);
        let cfg = FeatureConfig {
            layer: 1,
            prompt_pool: 3,
            reasoning_pool: 3,
            mask: FeatureMask::full(),
        };
        let fv = extract_features(&record, &cfg).unwrap();
        // h_r block equals h_p block.
        assert_eq!(fv.values[0], fv.values[2]);
        assert_eq!(fv.values[1], fv.values[3]);
    }

    #[test]
    fn layer_out_of_range_is_an_error() {
        let record = synthetic_record(2);
        let cfg = FeatureConfig {
            layer: 3,
            prompt_pool: 2,
            reasoning_pool: 2,
            mask: FeatureMask::full(),
        };
        assert!(matches!(
            extract_features(&record, &cfg),
            Err(CoreError::InvalidLayer { layer: 3, layers: 2 })
        ));
    }

    #[test]
    fn mask_controls_blocks() {
        let record = synthetic_record(2);
        let entropy_only = FeatureConfig {
            layer: 1,
            prompt_pool: 2,
            reasoning_pool: 2,
            mask: FeatureMask {
                prompt: false,
                reasoning: false,
                entropy: true,
                length: false,
            },
        };
        let fv = extract_features(&record, &entropy_only).unwrap();
        assert_eq!(fv.values.len(), 3);

        let nothing = FeatureConfig {
            mask: FeatureMask {
                prompt: false,
                reasoning: false,
                entropy: false,
                length: false,
            },
            ..entropy_only
        };
        assert!(extract_features(&record, &nothing).is_err());

        let with_length = FeatureConfig {
            mask: FeatureMask {
                prompt: false,
                reasoning: false,
                entropy: false,
                length: true,
            },
            ..entropy_only
        };
        let fv = extract_features(&record, &with_length).unwrap();
        assert_eq!(fv.values, vec![3.0]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let fv = FeatureVector {
            values: vec![1.0 / 3.0, -2.5e-17, 7.0],
            source_rollout_id: 9,
        };
        let parsed = FeatureVector::from_csv_line(&fv.csv_line()).unwrap();
        assert_eq!(parsed.source_rollout_id, 9);
        for (a, b) in fv.values.iter().zip(&parsed.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(FeatureVector::from_csv_line("").is_err());
        assert!(FeatureVector::from_csv_line("x,1.0").is_err());
    }

    #[test]
    fn mask_labels_are_stable() {
        assert_eq!(FeatureMask::full().label(), "prompt+reasoning+entropy");
        let none = FeatureMask {
            prompt: false,
            reasoning: false,
            entropy: false,
            length: false,
        };
        assert_eq!(none.label(), "none");
    }

    #[test]
    fn mask_labels_round_trip() {
        let masks = [
            FeatureMask::full(),
            FeatureMask { prompt: true, reasoning: false, entropy: false, length: false },
            FeatureMask { prompt: false, reasoning: true, entropy: true, length: false },
            FeatureMask { prompt: true, reasoning: true, entropy: true, length: true },
        ];
        for mask in masks {
            assert_eq!(FeatureMask::from_label(&mask.label()).unwrap(), mask);
        }
        assert_eq!(FeatureMask::from_label("full").unwrap(), FeatureMask::full());
        assert!(FeatureMask::from_label("prompt+bogus").is_err());
    }
}
