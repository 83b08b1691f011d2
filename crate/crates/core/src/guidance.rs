//! Classifier-free and spatiotemporal skip guidance.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::LoraAdapter;
use crate::denoiser::{ConditioningSignal, Denoiser};
use crate::error::{Error, Result};
use crate::video::LatentTensor;

pub const DEFAULT_CFG_SCALE: f64 = 3.0;
/// CFG scale used with the larger backbone profile.
pub const HIGH_CFG_SCALE: f64 = 6.0;
pub const DEFAULT_STG_SCALE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    Cfg,
    Stg,
}

impl GuidanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::Stg => "stg",
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GuidanceMode::None),
            "cfg" => Ok(GuidanceMode::Cfg),
            "stg" => Ok(GuidanceMode::Stg),
            other => Err(Error::InvalidGuidance(format!("unknown guidance mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub scale: f64,
    /// Blocks dropped for the STG weak branch; `None` means the middle third.
    pub skip_layers: Option<BTreeSet<usize>>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::cfg(DEFAULT_CFG_SCALE)
    }
}

impl GuidanceConfig {
    pub fn none() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::None,
            scale: 0.0,
            skip_layers: None,
        }
    }

    pub fn cfg(scale: f64) -> Self {
        GuidanceConfig {
            mode: GuidanceMode::Cfg,
            scale,
            skip_layers: None,
        }
    }

    pub fn stg(scale: f64) -> Self {
        GuidanceConfig {
            mode: GuidanceMode::Stg,
            scale,
            skip_layers: None,
        }
    }

    /// The mode's default scale.
    pub fn for_mode(mode: GuidanceMode) -> Self {
        match mode {
            GuidanceMode::None => Self::none(),
            GuidanceMode::Cfg => Self::cfg(DEFAULT_CFG_SCALE),
            GuidanceMode::Stg => Self::stg(DEFAULT_STG_SCALE),
        }
    }

    /// Resolved skip set for a model with `layers` blocks.
    pub fn resolved_skip_layers(&self, layers: usize) -> BTreeSet<usize> {
        match &self.skip_layers {
            Some(s) => s.clone(),
            None => middle_third(layers),
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(Error::InvalidGuidance(format!(
                "scale {} must be finite and non-negative",
                self.scale
            )));
        }
        if self.mode == GuidanceMode::Stg {
            let skip = self.resolved_skip_layers(layers);
            if skip.is_empty() {
                return Err(Error::InvalidGuidance("STG needs a non-empty skip set".into()));
            }
            if let Some(&index) = skip.iter().find(|&&l| l >= layers) {
                return Err(Error::InvalidLayerIndex { index, layers });
            }
        }
        Ok(())
    }
}

/// STG's default weak branch: the middle third of the blocks.
pub fn middle_third(layers: usize) -> BTreeSet<usize> {
    let start = layers / 3;
    let end = ((2 * layers + 2) / 3).max(start + 1).min(layers);
    (start..end).collect()
}

/// Anything that predicts a velocity field; lets samplers be tested with
/// analytic fields.
pub trait VelocityModel {
    fn velocity(
        &self,
        x_t: &LatentTensor,
        t: f64,
        cond: &ConditioningSignal,
        skip_layers: &BTreeSet<usize>,
    ) -> Result<LatentTensor>;

    fn layers(&self) -> usize;
}

/// A denoiser with an optional adapter applied.
#[derive(Clone, Copy)]
pub struct AdaptedDenoiser<'a> {
    pub denoiser: &'a Denoiser,
    pub adapter: Option<&'a LoraAdapter>,
}

impl<'a> AdaptedDenoiser<'a> {
    pub fn new(denoiser: &'a Denoiser, adapter: Option<&'a LoraAdapter>) -> Self {
        AdaptedDenoiser { denoiser, adapter }
    }
}

impl VelocityModel for AdaptedDenoiser<'_> {
    fn velocity(
        &self,
        x_t: &LatentTensor,
        t: f64,
        cond: &ConditioningSignal,
        skip_layers: &BTreeSet<usize>,
    ) -> Result<LatentTensor> {
        self.denoiser.denoise(self.adapter, x_t, t, cond, skip_layers)
    }

    fn layers(&self) -> usize {
        self.denoiser.layers()
    }
}

/// Wraps a model and counts forward passes.
pub struct CountingModel<M> {
    pub inner: M,
    calls: Cell<usize>,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        CountingModel {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<M: VelocityModel> VelocityModel for CountingModel<M> {
    fn velocity(
        &self,
        x_t: &LatentTensor,
        t: f64,
        cond: &ConditioningSignal,
        skip_layers: &BTreeSet<usize>,
    ) -> Result<LatentTensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.velocity(x_t, t, cond, skip_layers)
    }

    fn layers(&self) -> usize {
        self.inner.layers()
    }
}

/// `v_u + s · (v_c − v_u)`, evaluated as `(1 − s) · v_u + s · v_c` so that
/// scales 0 and 1 return the branches bit for bit.
pub fn cfg_combine(v_cond: &LatentTensor, v_uncond: &LatentTensor, scale: f64) -> Result<LatentTensor> {
    v_cond.ensure_same_shape(v_uncond)?;
    let out = v_uncond.data() * (1.0 - scale) + &(v_cond.data() * scale);
    LatentTensor::new(out)
}

/// `v_c + s · (v_c − v_skip)`.
pub fn stg_combine(v_cond: &LatentTensor, v_skip: &LatentTensor, scale: f64) -> Result<LatentTensor> {
    v_cond.ensure_same_shape(v_skip)?;
    let out = v_cond.data() + &((v_cond.data() - v_skip.data()) * scale);
    LatentTensor::new(out)
}

/// One guided velocity evaluation.
///
/// `None` costs one forward pass, CFG and STG two each.
pub fn guided_velocity<M: VelocityModel + ?Sized>(
    model: &M,
    x_t: &LatentTensor,
    t: f64,
    cond: &ConditioningSignal,
    guidance: &GuidanceConfig,
) -> Result<LatentTensor> {
    let layers = model.layers();
    guidance.validate(layers)?;
    let full = BTreeSet::new();
    let v_cond = model.velocity(x_t, t, cond, &full)?;
    match guidance.mode {
        GuidanceMode::None => Ok(v_cond),
        GuidanceMode::Cfg => {
            let v_uncond = model.velocity(x_t, t, &cond.unconditional(), &full)?;
            cfg_combine(&v_cond, &v_uncond, guidance.scale)
        }
        GuidanceMode::Stg => {
            let skip = guidance.resolved_skip_layers(layers);
            let v_skip = model.velocity(x_t, t, cond, &skip)?;
            stg_combine(&v_cond, &v_skip, guidance.scale)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn filled(v: f64) -> LatentTensor {
        LatentTensor::from_elem((1, 2, 2, 1), v)
    }

    /// Returns `1` for the null condition, `3` otherwise, minus the number of
    /// skipped layers.
    struct Analytic;

    impl VelocityModel for Analytic {
        fn velocity(
            &self,
            x_t: &LatentTensor,
            _t: f64,
            cond: &ConditioningSignal,
            skip: &BTreeSet<usize>,
        ) -> Result<LatentTensor> {
            let base = if cond.classes.is_some() { 3.0 } else { 1.0 };
            Ok(LatentTensor::from_elem(x_t.shape(), base - skip.len() as f64))
        }

        fn layers(&self) -> usize {
            6
        }
    }

    fn cond() -> ConditioningSignal {
        ConditioningSignal::text(crate::dataset::ClassTriple::from_index(3).unwrap())
    }

    #[test]
    fn combine_formulas() {
        let g = cfg_combine(&filled(2.0), &filled(1.0), 3.0).unwrap();
        assert!(g.data().iter().all(|v| (*v - 4.0).abs() < 1e-12));
        let unit = cfg_combine(&filled(2.0), &filled(1.0), 1.0).unwrap();
        assert_eq!(unit, filled(2.0));
        let zero = cfg_combine(&filled(2.0), &filled(1.0), 0.0).unwrap();
        assert_eq!(zero, filled(1.0));
        let s = stg_combine(&filled(2.0), &filled(1.5), 1.0).unwrap();
        assert!(s.data().iter().all(|v| (*v - 2.5).abs() < 1e-12));
        assert_eq!(stg_combine(&filled(2.0), &filled(1.5), 0.0).unwrap(), filled(2.0));
        let other = LatentTensor::new(Array4::zeros((1, 2, 3, 1))).unwrap();
        assert!(cfg_combine(&filled(1.0), &other, 1.0).is_err());
    }

    #[test]
    fn forward_pass_counts() {
        let x = filled(0.0);
        for (g, expected_calls, expected_value) in [
            (GuidanceConfig::none(), 1, 3.0),
            (GuidanceConfig::cfg(3.0), 2, 1.0 + 3.0 * 2.0),
            (GuidanceConfig::stg(1.0), 2, 3.0 + (3.0 - 1.0)),
        ] {
            let model = CountingModel::new(Analytic);
            let v = guided_velocity(&model, &x, 0.5, &cond(), &g).unwrap();
            assert_eq!(model.calls(), expected_calls, "{:?}", g.mode);
            assert!(v.data().iter().all(|e| (*e - expected_value).abs() < 1e-12), "{:?}", g.mode);
        }
    }

    #[test]
    fn middle_third_skip_set() {
        let g = GuidanceConfig::stg(1.0);
        assert_eq!(g.resolved_skip_layers(6), [2, 3].into_iter().collect());
        assert_eq!(g.resolved_skip_layers(4), [1, 2].into_iter().collect());
        assert_eq!(g.resolved_skip_layers(28), (9..19).collect());
        assert_eq!(middle_third(1), [0].into_iter().collect());
        assert_eq!(middle_third(3), [1].into_iter().collect());
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(GuidanceConfig::cfg(-1.0).validate(4), Err(Error::InvalidGuidance(_))));
        assert!(matches!(GuidanceConfig::cfg(f64::NAN).validate(4), Err(Error::InvalidGuidance(_))));
        let mut g = GuidanceConfig::stg(1.0);
        g.skip_layers = Some([7].into_iter().collect());
        assert!(matches!(g.validate(4), Err(Error::InvalidLayerIndex { index: 7, layers: 4 })));
        g.skip_layers = Some(BTreeSet::new());
        assert!(matches!(g.validate(4), Err(Error::InvalidGuidance(_))));
        assert!("xyz".parse::<GuidanceMode>().is_err());
        assert_eq!("stg".parse::<GuidanceMode>().unwrap(), GuidanceMode::Stg);
    }
}
