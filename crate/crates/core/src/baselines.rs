//! Comparison methods that share the scenario harness.
//!
//! Zero-shot classification, the adapter with knowledge distillation and the
//! adapter with random retention are methods of [`crate::scenario`]; this module
//! adds the incrementally expanded linear probe head and a guarded entry point
//! for running any baseline.

use rand_distr::{Distribution, StandardNormal};

use crate::adapters::FlatParamView;
use crate::embedding::{Dataset, Manifest};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, DenseVector};
use crate::retention::Strategy;
use crate::rng;
use crate::scenario::{self, Method, RunOutcome, ScenarioConfig};

/// Affine classifier `W x + b` over raw frozen embeddings, one row per seen class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    w: DenseMatrix,
    b: DenseVector,
}

impl ProbeHead {
    pub fn new(w: DenseMatrix, b: DenseVector) -> Result<Self> {
        if w.rows() != b.dim() {
            return Err(Error::contract(format!(
                "probe head has {} rows but {} biases",
                w.rows(),
                b.dim()
            )));
        }
        Ok(Self { w, b })
    }

    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            w: DenseMatrix::zeros(num_classes, dim),
            b: DenseVector::zeros(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.w
    }

    pub fn bias(&self) -> &DenseVector {
        &self.b
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        self.b.as_mut_slice()
    }

    pub fn logits(&self, x: &DenseVector) -> Result<DenseVector> {
        let mut z = linalg::matvec(&self.w, x)?;
        for (zi, bi) in z.as_mut_slice().iter_mut().zip(self.b.as_slice()) {
            *zi += bi;
        }
        Ok(z)
    }

    /// `W` row-major, then `b`.
    pub fn flatten(&self) -> FlatParamView {
        let mut v = self.w.as_slice().to_vec();
        v.extend_from_slice(self.b.as_slice());
        FlatParamView(v)
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        let nw = self.w.rows() * self.w.cols();
        if values.len() != nw + self.b.dim() {
            return Err(Error::contract(format!(
                "probe head has {} parameters, got {}",
                nw + self.b.dim(),
                values.len()
            )));
        }
        self.w.as_mut_slice().copy_from_slice(&values[..nw]);
        self.b.as_mut_slice().copy_from_slice(&values[nw..]);
        Ok(())
    }
}

/// Appends `new_classes` rows drawn from `N(0, 1/M)` with zero bias; existing
/// rows and biases are copied unchanged.
pub fn expand_head(head: &ProbeHead, new_classes: usize, seed: u64) -> Result<ProbeHead> {
    if new_classes == 0 {
        return Err(Error::contract("expand_head needs at least one new class"));
    }
    let dim = head.dim();
    let sd = (1.0 / dim.max(1) as f64).sqrt();
    let mut rng = rng::stream(seed, "probe_head");
    let mut w = head.w.as_slice().to_vec();
    w.extend((0..new_classes * dim).map(|_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sd * z
    }));
    let mut b = head.b.as_slice().to_vec();
    b.extend(std::iter::repeat_n(0.0, new_classes));
    ProbeHead::new(
        DenseMatrix::from_vec(head.num_classes() + new_classes, dim, w)?,
        DenseVector::new(b),
    )
}

/// Runs a comparison method: zero-shot, linear probe, adapter + KD, or adapter
/// with random retention.
pub fn run_baseline(
    dataset: &Dataset,
    manifest: &Manifest,
    config: &ScenarioConfig,
    seed: u64,
) -> Result<RunOutcome> {
    let is_baseline = match config.method {
        Method::ZeroShot | Method::LinearProbe | Method::AdapterKd => true,
        Method::AdapterRetention => config.retention.strategy == Strategy::Random,
        Method::AdapterPlain => false,
    };
    if !is_baseline {
        return Err(Error::config(format!(
            "{:?} with {:?} retention is not a baseline method",
            config.method, config.retention.strategy
        )));
    }
    scenario::run_on(dataset, manifest, config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expand_preserves_old_rows() {
        let h0 = ProbeHead::zeros(0, 4);
        let h3 = expand_head(&h0, 3, 1).unwrap();
        assert_eq!(h3.num_classes(), 3);
        let h5 = expand_head(&h3, 2, 2).unwrap();
        assert_eq!(h5.num_classes(), 5);
        for c in 0..3 {
            assert_eq!(h5.weights().row(c), h3.weights().row(c));
        }
        assert_eq!(&h5.bias().as_slice()[..3], h3.bias().as_slice());
        assert_eq!(&h5.bias().as_slice()[3..], &[0.0, 0.0]);
    }

    #[test]
    fn expand_guard_and_determinism() {
        let h = ProbeHead::zeros(2, 3);
        assert!(matches!(expand_head(&h, 0, 1), Err(Error::Contract(_))));
        assert_eq!(expand_head(&h, 4, 9).unwrap(), expand_head(&h, 4, 9).unwrap());
        assert_ne!(expand_head(&h, 4, 9).unwrap(), expand_head(&h, 4, 10).unwrap());
    }

    #[test]
    fn expansion_keeps_old_logits() {
        let h = expand_head(&ProbeHead::zeros(0, 3), 2, 5).unwrap();
        let x = DenseVector::new(vec![0.2, -1.0, 0.7]);
        let before = h.logits(&x).unwrap();
        let after = expand_head(&h, 3, 6).unwrap().logits(&x).unwrap();
        assert_eq!(&after.as_slice()[..2], before.as_slice());
    }

    #[test]
    fn flat_layout() {
        let w = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let mut h = ProbeHead::new(w, DenseVector::new(vec![5.0, 6.0])).unwrap();
        assert_eq!(h.flatten().0, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        h.assign_flat(&[0.0; 6]).unwrap();
        assert_eq!(h, ProbeHead::zeros(2, 2));
        assert!(h.assign_flat(&[0.0; 5]).is_err());
    }
}
