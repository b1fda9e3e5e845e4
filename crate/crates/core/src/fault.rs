//! Deliberate faults for exercising the verification harness.
//!
//! Compiled to no-ops unless the `fault-injection` feature is enabled.

use crate::real::Real;
use crate::tensor::Tensor;

#[cfg(feature = "fault-injection")]
static BROKEN_INVERSE: core::sync::atomic::AtomicBool = core::sync::atomic::AtomicBool::new(false);

/// Makes every reversible inverse return a slightly wrong first stream.
#[cfg(feature = "fault-injection")]
pub fn set_broken_inverse(on: bool) {
    BROKEN_INVERSE.store(on, core::sync::atomic::Ordering::SeqCst);
}

pub(crate) fn perturb_inverse<T: Real>(_x: &mut Tensor<T>) {
    #[cfg(feature = "fault-injection")]
    if BROKEN_INVERSE.load(core::sync::atomic::Ordering::SeqCst) {
        if let Some(v) = _x.data_mut().first_mut() {
            *v += T::from_f64(1e-3);
        }
    }
}
