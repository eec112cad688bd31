//! Flat access to parameter tensors, shared by the optimizer, checkpoints
//! and gradient checks.

pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha · other`; both must have the same layout.
    fn axpy(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            assert_eq!(dst.len(), src.len(), "parameter layouts differ");
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Mutable reference to the `i`-th scalar in flat order.
    fn flat_mut(&mut self, mut i: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if i < t.len() {
                return &mut t[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}
