use crate::error::Result;
use crate::numerics::Matrix;

use super::ResidualTrace;

/// Activations of a companion (reference) pass, handed to hooks read-only.
#[derive(Clone, Copy, Debug)]
pub struct Companion<'a> {
    pub trace: &'a ResidualTrace,
    pub prompt_len: usize,
}

/// One layer's view of a [`Companion`].
#[derive(Clone, Copy, Debug)]
pub struct CompanionLayer<'a> {
    pub activations: &'a Matrix,
    pub prompt_len: usize,
}

impl<'a> Companion<'a> {
    pub(crate) fn at_layer(self, k: usize) -> CompanionLayer<'a> {
        CompanionLayer {
            activations: self.trace.layer(k),
            prompt_len: self.prompt_len,
        }
    }
}

/// What a hook learns about the call site.
#[derive(Clone, Copy, Debug)]
pub struct HookContext<'a> {
    /// 1-based block index the hook runs after.
    pub layer: usize,
    /// Denoising step being evaluated (1 = first reverse step).
    pub step: usize,
    /// Prompt length of the sequence whose activations are being edited.
    pub prompt_len: usize,
    pub companion: Option<CompanionLayer<'a>>,
}

/// Write hook run on the residual stream after one block.
///
/// Implementations must leave the activation matrix at its original shape.
pub trait InterventionHook: Send + Sync {
    fn layer(&self) -> usize;

    fn apply(&self, ctx: &HookContext<'_>, activations: &mut Matrix) -> Result<()>;
}

/// Closure-backed hook.
pub struct FnHook<F> {
    layer: usize,
    f: F,
}

impl<F> FnHook<F>
where
    F: Fn(&HookContext<'_>, &mut Matrix) -> Result<()> + Send + Sync,
{
    pub fn new(layer: usize, f: F) -> Self {
        FnHook { layer, f }
    }
}

impl<F> InterventionHook for FnHook<F>
where
    F: Fn(&HookContext<'_>, &mut Matrix) -> Result<()> + Send + Sync,
{
    fn layer(&self) -> usize {
        self.layer
    }

    fn apply(&self, ctx: &HookContext<'_>, activations: &mut Matrix) -> Result<()> {
        (self.f)(ctx, activations)
    }
}
