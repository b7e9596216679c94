use crate::tensor::Scalar;

/// A recurrent unit as seen by the lane kernels.
///
/// A lane forward fills one trace row of `trace_width()` values per step, in
/// processing order; the hidden output of each step lives at
/// `hidden_offset()..hidden_offset() + hidden()` inside its row. Backward
/// accumulates packed parameter gradients into `grads` (length `grad_len()`)
/// and overwrites `gxs` with one input-gradient row per step.
pub(crate) trait Cell<T: Scalar>: Sync {
    fn input_size(&self) -> usize;
    fn hidden(&self) -> usize;
    fn trace_width(&self) -> usize;
    fn hidden_offset(&self) -> usize;
    fn grad_len(&self) -> usize;
    fn forward_lane(&self, xs: &[&[T]], trace: &mut [T]);
    fn backward_lane(&self, xs: &[&[T]], trace: &[T], gh: &[T], grads: &mut [T], gxs: &mut [T]);
}
