//! Training-only heads attached to backbone stages.
//!
//! Each attached stage gets an independent set of three layers:
//!
//! * `lio.<side>.mask`  1x1 conv `C -> 1` (object-extent mask)
//! * `lio.<side>.proj`  1x1 conv `C -> C1` (spatial-context projection)
//! * `lio.<side>.polar` dense `2*C1 -> 2` (polar coordinate regression)
//!
//! where `<side>` is the stage's grid side. None of these tensors is read at
//! inference.

use crate::backbone::{bias_name, weight_name, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Params};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub const HEAD_PREFIX: &str = "lio.";

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Grid sides of the stages carrying heads, e.g. `[8]` or `[16, 8]`.
    pub stages: Vec<usize>,
    /// Channels of the spatial-context projection.
    pub proj_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            stages: vec![8],
            proj_channels: 32,
        }
    }
}

/// Parameter names of the head-set on one stage.
#[derive(Clone, Debug)]
pub struct HeadNames {
    pub side: usize,
    pub mask: String,
    pub proj: String,
    pub polar: String,
}

impl HeadNames {
    pub fn new(side: usize) -> Self {
        Self {
            side,
            mask: format!("{HEAD_PREFIX}{side}.mask"),
            proj: format!("{HEAD_PREFIX}{side}.proj"),
            polar: format!("{HEAD_PREFIX}{side}.polar"),
        }
    }
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

/// Learnable scalars of one head-set on a stage with `channels` channels.
pub fn head_parameter_count(channels: usize, proj_channels: usize) -> usize {
    (channels + 1) + (channels * proj_channels + proj_channels) + (2 * proj_channels * 2 + 2)
}

impl HeadConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::contract("at least one stage must carry heads"));
        }
        if self.proj_channels == 0 {
            return Err(Error::contract("projection channels must be positive"));
        }
        let mut seen = Vec::new();
        for &side in &self.stages {
            backbone.stage_index(side)?;
            if seen.contains(&side) {
                return Err(Error::contract(format!("stage {side} attached twice")));
            }
            seen.push(side);
        }
        Ok(())
    }

    pub fn parameter_count(&self, backbone: &BackboneConfig) -> Result<usize> {
        self.validate(backbone)?;
        self.stages
            .iter()
            .map(|&side| {
                let c = backbone.stage_channels(backbone.stage_index(side)?);
                Ok(head_parameter_count(c, self.proj_channels))
            })
            .sum()
    }

    /// Fresh head parameters. Each stage draws from its own stream so the
    /// backbone initialization is unaffected by which heads exist.
    pub fn init_params(&self, backbone: &BackboneConfig) -> Result<Params> {
        self.validate(backbone)?;
        let mut params = Params::new();
        for &side in &self.stages {
            let c = backbone.stage_channels(backbone.stage_index(side)?);
            let c1 = self.proj_channels;
            let names = HeadNames::new(side);
            let mut rng = Rng::new(derive_seed(backbone.seed, 1000 + side as u64));
            params.insert(weight_name(&names.mask), fan_in_uniform(&[1, 1, c, 1], c, &mut rng));
            params.insert(bias_name(&names.mask), Tensor::zeros(&[1]));
            params.insert(weight_name(&names.proj), fan_in_uniform(&[1, 1, c, c1], c, &mut rng));
            params.insert(bias_name(&names.proj), Tensor::zeros(&[c1]));
            params.insert(weight_name(&names.polar), fan_in_uniform(&[2 * c1, 2], 2 * c1, &mut rng));
            params.insert(bias_name(&names.polar), Tensor::zeros(&[2]));
        }
        Ok(params)
    }
}

/// Backbone parameter count, plus heads when `heads` is given.
pub fn parameter_count(backbone: &BackboneConfig, heads: Option<&HeadConfig>) -> Result<usize> {
    let base = backbone.parameter_count();
    Ok(match heads {
        Some(h) => base + h.parameter_count(backbone)?,
        None => base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_stage_head_count_closed_form() {
        let b = BackboneConfig::default();
        let h = HeadConfig::default();
        // C = 32 at the 8x8 stage, C1 = 32
        assert_eq!(h.parameter_count(&b).unwrap(), (32 + 1) + (32 * 32 + 32) + (2 * 32 * 2 + 2));
        assert_eq!(h.init_params(&b).unwrap().scalar_count(), 1219);
    }

    #[test]
    fn with_minus_without_equals_heads() {
        let b = BackboneConfig::default();
        let h = HeadConfig::default();
        let with = parameter_count(&b, Some(&h)).unwrap();
        let without = parameter_count(&b, None).unwrap();
        assert_eq!(with - without, h.parameter_count(&b).unwrap());
    }

    #[test]
    fn each_added_stage_adds_one_head_set() {
        let b = BackboneConfig::default();
        let one = HeadConfig { stages: vec![8], ..HeadConfig::default() };
        let two = HeadConfig { stages: vec![16, 8], ..HeadConfig::default() };
        let diff = two.parameter_count(&b).unwrap() - one.parameter_count(&b).unwrap();
        assert_eq!(diff, head_parameter_count(16, 32));
    }

    #[test]
    fn invalid_stage_rejected() {
        let b = BackboneConfig::default();
        let h = HeadConfig { stages: vec![7], ..HeadConfig::default() };
        assert!(matches!(h.validate(&b), Err(Error::Contract(_))));
        let empty = HeadConfig { stages: vec![], ..HeadConfig::default() };
        assert!(empty.validate(&b).is_err());
    }
}
