mod common;

use clipcil::adapters::{self, AdapterKind, AttentionMode, InitScheme};
use clipcil::baselines::ProbeHead;
use clipcil::linalg::{DenseMatrix, DenseVector};
use clipcil::objective::{self, Batch, Distill, LogitConfig, TextHead};
use common::*;
use rand::Rng;

#[test]
fn adapter_gradients_match_central_differences() {
    for case in gradient_sweep(50, 11) {
        assert!(case.worst <= FD_TOL, "{}: max rel err {:.3e}", case.label, case.worst);
    }
}

#[test]
fn library_loss_matches_oracle() {
    let mut r = rng(4);
    for (kind, mode) in adapter_variants() {
        for normalize in [true, false] {
            let m = 5;
            let params = adapters::init(kind, mode, m, 3, InitScheme::default_for(kind)).unwrap();
            let inputs: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(&mut r, m, 1.0)).collect();
            let text: Vec<Vec<f64>> = (0..4).map(|_| gaussian_vec(&mut r, m, 1.0)).collect();
            let labels = vec![0, 3, 1];
            let cfg = LogitConfig { normalize, logit_scale: 30.0 };
            let xs: Vec<DenseVector> = inputs.iter().map(|x| DenseVector::new(x.clone())).collect();
            let batch = Batch::new(xs.iter().collect(), labels.clone()).unwrap();
            let rows: Vec<&[f64]> = text.iter().map(Vec::as_slice).collect();
            let lib = objective::ce_loss(&params, &batch, &DenseMatrix::from_rows(&rows).unwrap(), cfg).unwrap();
            let want = oracle_loss(kind, mode, params.flatten().as_slice(), &inputs, &labels, &text, normalize, 30.0);
            assert!((lib - want).abs() <= 1e-12 * want.abs().max(1.0), "{kind:?}/{mode:?}: {lib} vs {want}");
        }
    }
}

#[test]
fn scalar_attention_query_key_gradients_vanish() {
    let mut r = rng(8);
    let m = 6;
    let params = adapters::init(AdapterKind::SelfAttention, AttentionMode::Scalar, m, 1, InitScheme::Gaussian).unwrap();
    let xs: Vec<DenseVector> = (0..4).map(|_| DenseVector::new(gaussian_vec(&mut r, m, 1.0))).collect();
    let text = DenseMatrix::from_vec(3, m, gaussian_vec(&mut r, 3 * m, 1.0)).unwrap();
    let batch = Batch::new(xs.iter().collect(), vec![0, 1, 2, 1]).unwrap();
    let g = objective::ce_grad(&params, &batch, &text, LogitConfig::default()).unwrap();
    assert!(g.as_slice()[..2 * m * m].iter().all(|&v| v == 0.0));
    assert!(g.as_slice()[2 * m * m..].iter().any(|&v| v != 0.0));
}

#[test]
fn distillation_gradient_matches_central_differences() {
    let mut r = rng(21);
    for _ in 0..20 {
        let m = r.random_range(2..=6usize);
        let k = 5;
        let num_old = 3;
        let prev = adapters::init(AdapterKind::Linear, AttentionMode::Outer, m, r.random(), InitScheme::IdentityPerturbed { epsilon: 0.3 }).unwrap();
        let cur = adapters::init(AdapterKind::Linear, AttentionMode::Outer, m, r.random(), InitScheme::IdentityPerturbed { epsilon: 0.3 }).unwrap();
        let xs: Vec<DenseVector> = (0..6).map(|_| DenseVector::new(gaussian_vec(&mut r, m, 1.0))).collect();
        let labels = vec![0, 3, 4, 1, 3, 4];
        let text = DenseMatrix::from_vec(k, m, gaussian_vec(&mut r, k * m, 1.0)).unwrap();
        let head = TextHead::new(&text, LogitConfig { normalize: true, logit_scale: 10.0 }).unwrap();
        let batch = Batch::new(xs.iter().collect(), labels).unwrap();
        let d = Distill { prev: &prev, num_old, temperature: 2.0, weight: 0.7 };
        let (_, g) = objective::adapter_loss_grad(&cur, &batch, &head, Some(&d)).unwrap();
        let numeric = central_diff(cur.flatten().as_slice(), FD_STEP, |t| {
            let p = adapters::unflatten(&adapters::FlatParamView(t.to_vec()), AdapterKind::Linear, AttentionMode::Outer, m).unwrap();
            objective::adapter_loss_grad(&p, &batch, &head, Some(&d)).unwrap().0
        });
        let err = max_rel_err(g.as_slice(), &numeric, FD_FLOOR);
        assert!(err <= FD_TOL, "kd gradient rel err {err:.3e}");
    }
}

#[test]
fn probe_gradient_matches_central_differences() {
    let mut r = rng(5);
    for _ in 0..50 {
        let m = r.random_range(2..=8usize);
        let k = r.random_range(2..=6usize);
        let n = r.random_range(1..=5usize);
        let w = gaussian_vec(&mut r, k * m, 0.5);
        let b = gaussian_vec(&mut r, k, 0.5);
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, m, 1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let head = ProbeHead::new(DenseMatrix::from_vec(k, m, w.clone()).unwrap(), DenseVector::new(b.clone())).unwrap();
        let xs: Vec<DenseVector> = inputs.iter().map(|x| DenseVector::new(x.clone())).collect();
        let batch = Batch::new(xs.iter().collect(), labels.clone()).unwrap();
        let analytic = objective::probe_grad(&head, &batch).unwrap();

        // oracle: softmax cross-entropy of W x + b written out directly
        let oracle = |t: &[f64]| {
            let mut total = 0.0;
            for (x, &y) in inputs.iter().zip(&labels) {
                let z: Vec<f64> = (0..k)
                    .map(|c| t[k * m + c] + (0..m).map(|j| t[c * m + j] * x[j]).sum::<f64>())
                    .collect();
                let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
                total += lse - z[y];
            }
            total / n as f64
        };
        let mut theta = w;
        theta.extend(b);
        let numeric = central_diff(&theta, FD_STEP, oracle);
        let err = max_rel_err(analytic.as_slice(), &numeric, FD_FLOOR);
        assert!(err <= FD_TOL, "probe gradient rel err {err:.3e}");
    }
}
