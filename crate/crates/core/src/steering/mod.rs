//! In-context latent refinement: pulling a generation's hidden states
//! toward a reference's locally pooled hidden states during denoising.

mod config;
mod ops;

use std::collections::BTreeSet;
use std::fmt;

pub use config::{
    parse_layer_map, Stage, SteerConfig, SteerMode, SteeringSpan, StepSpec, DEFAULT_KERNEL,
    DEFAULT_WAVE_FREQ,
};
pub use ops::{
    adaptive_downsample, avg_pool_1d, ilrr_update, linear_upsample, modulation_wave,
    spatially_modulated_update, PoolNorm, Waveform,
};

use crate::error::{Error, Result};
use crate::model::{HookContext, InterventionHook};
use crate::numerics::Matrix;

/// Hook applying one layer's refinement update.
#[derive(Clone, Debug)]
pub struct SteerHook {
    layer: usize,
    alpha: f32,
    kernel: usize,
    mode: SteerMode,
    wave_freq: f64,
    waveform: Waveform,
    pool_norm: PoolNorm,
    span: SteeringSpan,
}

impl SteerHook {
    pub fn alpha(&self) -> f32 {
        self.alpha
    }
}

impl InterventionHook for SteerHook {
    fn layer(&self) -> usize {
        self.layer
    }

    fn apply(&self, ctx: &HookContext<'_>, activations: &mut Matrix) -> Result<()> {
        let companion = ctx.companion.ok_or_else(|| {
            Error::Contract(format!(
                "steering hook at layer {} has no reference activations",
                self.layer
            ))
        })?;
        let (gen_start, ref_start) = match self.span {
            SteeringSpan::Response => (ctx.prompt_len, companion.prompt_len),
            SteeringSpan::Full => (0, 0),
        };
        let h_x = activations.slice_rows(gen_start, activations.rows());
        let h_y = companion
            .activations
            .slice_rows(ref_start, companion.activations.rows());
        if h_x.rows() == 0 {
            return Ok(());
        }
        let updated = match self.mode {
            SteerMode::Standard => {
                if h_x.rows() != h_y.rows() {
                    return Err(Error::Contract(format!(
                        "standard steering needs equal lengths (generation {}, reference {}); use spatial mode",
                        h_x.rows(),
                        h_y.rows()
                    )));
                }
                ilrr_update(&h_x, &h_y, self.alpha, self.kernel, self.pool_norm)?
            }
            SteerMode::Spatial => {
                let w = modulation_wave(self.alpha, self.wave_freq, h_x.rows(), self.waveform);
                spatially_modulated_update(&h_x, &h_y, &w, self.kernel, self.pool_norm)?
            }
        };
        activations.write_rows(gen_start, &updated)
    }
}

/// One hook per configured layer, in ascending layer order.
pub fn make_hooks(cfg: &SteerConfig, num_layers: usize) -> Result<Vec<SteerHook>> {
    cfg.validate(num_layers)?;
    Ok(cfg
        .layers
        .iter()
        .map(|(&layer, &alpha)| SteerHook {
            layer,
            alpha,
            kernel: cfg.kernel,
            mode: cfg.mode,
            wave_freq: cfg.wave_freq,
            waveform: cfg.waveform,
            pool_norm: cfg.pool_norm,
            span: cfg.span,
        })
        .collect())
}

/// A steering configuration bound to a model depth and step count.
pub struct Steering {
    mode: SteerMode,
    span: SteeringSpan,
    steps: BTreeSet<usize>,
    hooks: Vec<Box<dyn InterventionHook>>,
}

impl fmt::Debug for Steering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Steering")
            .field("mode", &self.mode)
            .field("steps", &self.steps)
            .field(
                "layers",
                &self.hooks.iter().map(|h| h.layer()).collect::<Vec<_>>(),
            )
            .finish()
    }
}

impl Steering {
    pub fn new(cfg: &SteerConfig, num_layers: usize, total_steps: usize) -> Result<Self> {
        let steps = cfg.steps.resolve(total_steps)?;
        let hooks = make_hooks(cfg, num_layers)?
            .into_iter()
            .map(|h| Box::new(h) as Box<dyn InterventionHook>)
            .collect();
        Ok(Steering {
            mode: cfg.mode,
            span: cfg.span,
            steps,
            hooks,
        })
    }

    /// Arbitrary hooks driven by the paired reference pass.
    pub fn custom(
        mode: SteerMode,
        steps: BTreeSet<usize>,
        hooks: Vec<Box<dyn InterventionHook>>,
    ) -> Self {
        Steering {
            mode,
            span: SteeringSpan::Response,
            steps,
            hooks,
        }
    }

    /// True when step `step` gets a reference pass and hooked generation.
    pub fn is_active(&self, step: usize) -> bool {
        !self.hooks.is_empty() && self.steps.contains(&step)
    }

    pub fn hooks(&self) -> &[Box<dyn InterventionHook>] {
        &self.hooks
    }

    pub fn steps(&self) -> &BTreeSet<usize> {
        &self.steps
    }

    pub fn mode(&self) -> SteerMode {
        self.mode
    }

    /// Checks that a reference can steer a generation of the given shape.
    pub fn check_reference(
        &self,
        gen_prompt: usize,
        gen_response: usize,
        ref_prompt: usize,
        ref_response: usize,
    ) -> Result<()> {
        let (nx, ny) = match self.span {
            SteeringSpan::Response => (gen_response, ref_response),
            SteeringSpan::Full => (gen_prompt + gen_response, ref_prompt + ref_response),
        };
        match self.mode {
            SteerMode::Standard if nx != ny => Err(Error::Contract(format!(
                "standard steering needs a reference of the generation's length ({ny} vs {nx}); use spatial mode"
            ))),
            SteerMode::Spatial if ny == 0 || ny > nx => Err(Error::Contract(format!(
                "spatial steering needs a reference of length 1..={nx}, got {ny}"
            ))),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CompanionLayer, HookContext};

    fn ctx<'a>(
        layer: usize,
        comp: &'a Matrix,
        gen_prompt: usize,
        ref_prompt: usize,
    ) -> HookContext<'a> {
        HookContext {
            layer,
            step: 1,
            prompt_len: gen_prompt,
            companion: Some(CompanionLayer {
                activations: comp,
                prompt_len: ref_prompt,
            }),
        }
    }

    #[test]
    fn per_layer_scales_reach_their_hooks() {
        let cfg = SteerConfig::standard([(3, 0.8), (5, 1.0)]).with_kernel(1);
        let hooks = make_hooks(&cfg, 8).unwrap();
        assert_eq!(
            hooks.iter().map(|h| h.layer()).collect::<Vec<_>>(),
            vec![3, 5]
        );
        // Sentinel: h_x = 0, h_y = 1 everywhere, k = 1, so the output is α.
        let reference = Matrix::filled(4, 2, 1.0);
        for (hook, expect) in hooks.iter().zip([0.8f32, 1.0]) {
            let mut act = Matrix::zeros(4, 2);
            hook.apply(&ctx(hook.layer(), &reference, 0, 0), &mut act)
                .unwrap();
            assert!(act.data().iter().all(|&v| (v - expect).abs() < 1e-7));
        }
    }

    #[test]
    fn prompt_rows_pass_through() {
        let hook = &make_hooks(&SteerConfig::standard([(1, 1.0)]).with_kernel(1), 2).unwrap()[0];
        let reference = Matrix::filled(5, 1, 9.0);
        let mut act = Matrix::zeros(5, 1);
        hook.apply(&ctx(1, &reference, 2, 2), &mut act).unwrap();
        assert_eq!(act.data(), &[0.0, 0.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn full_span_touches_prompt() {
        let mut cfg = SteerConfig::standard([(1, 1.0)]).with_kernel(1);
        cfg.span = SteeringSpan::Full;
        let hook = &make_hooks(&cfg, 2).unwrap()[0];
        let reference = Matrix::filled(3, 1, 2.0);
        let mut act = Matrix::zeros(3, 1);
        hook.apply(&ctx(1, &reference, 1, 1), &mut act).unwrap();
        assert_eq!(act.data(), &[2.0; 3]);
    }

    #[test]
    fn reference_response_only_enters_spatial_update() {
        let mut cfg = SteerConfig::spatial([(1, 1.0)]).with_kernel(1);
        cfg.waveform = Waveform::Constant;
        let hook = &make_hooks(&cfg, 2).unwrap()[0];
        // Reference prompt row holds a large value that must not leak in.
        let reference = Matrix::column(&[100.0, 2.0, 4.0]);
        let mut act = Matrix::zeros(5, 1);
        hook.apply(&ctx(1, &reference, 1, 1), &mut act).unwrap();
        let expect = [0.0, 2.0, 2.0 + 2.0 / 3.0, 2.0 + 4.0 / 3.0, 4.0];
        for (a, e) in act.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn standard_mode_rejects_length_mismatch() {
        let hook = &make_hooks(&SteerConfig::standard([(1, 1.0)]), 2).unwrap()[0];
        let reference = Matrix::zeros(3, 1);
        let mut act = Matrix::zeros(4, 1);
        assert!(matches!(
            hook.apply(&ctx(1, &reference, 0, 0), &mut act),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn hook_without_companion_is_contract_error() {
        let hook = &make_hooks(&SteerConfig::standard([(1, 1.0)]), 2).unwrap()[0];
        let c = HookContext {
            layer: 1,
            step: 1,
            prompt_len: 0,
            companion: None,
        };
        assert!(matches!(
            hook.apply(&c, &mut Matrix::zeros(2, 2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn steering_activity_and_validation() {
        let cfg = SteerConfig::standard([(2, 1.0)]).with_steps(StepSpec::Stage(Stage::FirstHalf));
        let s = Steering::new(&cfg, 4, 10).unwrap();
        assert!(s.is_active(1) && s.is_active(5) && !s.is_active(6));
        assert!(Steering::new(&SteerConfig::standard([(5, 1.0)]), 4, 10).is_err());
        let empty = Steering::new(&SteerConfig::standard([]), 4, 10).unwrap();
        assert!(!empty.is_active(1));
        assert!(s.check_reference(2, 8, 2, 8).is_ok());
        assert!(s.check_reference(2, 8, 2, 6).is_err());
        let sp = Steering::new(&SteerConfig::spatial([(2, 1.0)]), 4, 10).unwrap();
        assert!(sp.check_reference(2, 8, 2, 6).is_ok());
        assert!(sp.check_reference(2, 8, 2, 9).is_err());
    }
}
