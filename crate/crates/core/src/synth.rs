//! Synthetic embeddings with a controllable image/text mismatch.
//!
//! Each class `c` gets a prototype `p_c` uniform on the unit sphere; its text
//! embedding is `p_c`. Image samples are
//! `normalize((1 − δ) p_c + δ R p_c + σ ε)` with `ε ~ N(0, I)` and `R` a seeded
//! random rotation. With per-task distortion every task has its own rotation,
//! so no single linear adapter undoes the mismatch for all tasks at once.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{split_tasks, EmbeddingSet, Manifest, Record, Split};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, DenseVector};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub dim: usize,
    pub classes: usize,
    pub per_class: usize,
    pub sigma: f64,
    pub delta: f64,
    pub per_task_distortion: bool,
    /// Task layout the per-task rotations follow; also written to the manifest.
    pub num_tasks: usize,
    pub split: Split,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            classes: 10,
            per_class: 50,
            sigma: 0.05,
            delta: 0.0,
            per_task_distortion: false,
            num_tasks: 5,
            split: Split::B0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("dim must be at least 2"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes must be at least 2"));
        }
        if self.per_class < 2 {
            return Err(Error::config("per_class must be at least 2 for a train/test split"));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::config("delta must lie in [0, 1]"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    /// All samples, grouped by class; the last fifth of each class is test data.
    pub images: EmbeddingSet,
    pub text: EmbeddingSet,
    /// Split description with the explicit class order the rotations assume.
    pub manifest: Manifest,
}

/// Orthogonal matrix from modified Gram–Schmidt on a seeded Gaussian matrix.
/// Columns are orthonormalized in order, which fixes the QR diagonal positive.
pub fn random_rotation(dim: usize, seed: u64, label: &str) -> Result<DenseMatrix> {
    let mut rng = rng::stream(seed, label);
    let mut cols: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for j in 0..dim {
        let (done, rest) = cols.split_at_mut(j);
        let col = &mut rest[0];
        for q in done.iter() {
            let d = linalg::dot(q, col);
            for (c, qi) in col.iter_mut().zip(q) {
                *c -= d * qi;
            }
        }
        let n = linalg::norm(col);
        if !(n > 1e-10) {
            return Err(Error::Degenerate("rotation draw is rank deficient".into()));
        }
        for c in col.iter_mut() {
            *c /= n;
        }
    }
    let mut data = vec![0.0; dim * dim];
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            data[i * dim + j] = x;
        }
    }
    DenseMatrix::from_vec(dim, dim, data)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let (m, k) = (cfg.dim, cfg.classes);
    let mut manifest = Manifest {
        image_embeddings: vec!["images.cem".into()],
        text_embeddings: "text.cem".into(),
        split: cfg.split,
        num_tasks: cfg.num_tasks,
        seed: cfg.seed,
        class_order: None,
        base_dir: None,
    };
    let tasks = split_tasks(&manifest, k)?;
    manifest.class_order = Some(tasks.concat());

    let mut task_of = vec![0usize; k];
    for (t, classes) in tasks.iter().enumerate() {
        for &c in classes {
            task_of[c] = t;
        }
    }
    let rotations: Vec<DenseMatrix> = if cfg.per_task_distortion {
        (0..tasks.len())
            .map(|t| random_rotation(m, cfg.seed, &format!("synth/rotation/{t}")))
            .collect::<Result<_>>()?
    } else {
        vec![random_rotation(m, cfg.seed, "synth/rotation")?]
    };

    let mut proto_rng = rng::stream(cfg.seed, "synth/prototypes");
    let mut noise_rng = rng::stream(cfg.seed, "synth/noise");
    let names: Vec<String> = (0..k).map(|c| format!("class_{c:03}")).collect();
    let mut text = Vec::with_capacity(k);
    let mut images = Vec::with_capacity(k * cfg.per_class);
    for c in 0..k {
        let raw = DenseVector::new((0..m).map(|_| StandardNormal.sample(&mut proto_rng)).collect());
        let proto = linalg::l2_normalize(&raw)?;
        let rot = &rotations[if cfg.per_task_distortion { task_of[c] } else { 0 }];
        let turned = linalg::matvec(rot, &proto)?;
        let center: Vec<f64> = proto
            .as_slice()
            .iter()
            .zip(turned.as_slice())
            .map(|(p, r)| (1.0 - cfg.delta) * p + cfg.delta * r)
            .collect();
        for _ in 0..cfg.per_class {
            let x: Vec<f64> = center
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    x + cfg.sigma * z
                })
                .collect();
            images.push(Record {
                class_index: c,
                vector: linalg::l2_normalize(&DenseVector::new(x))?,
            });
        }
        text.push(Record {
            class_index: c,
            vector: proto,
        });
    }
    Ok(SynthData {
        images: EmbeddingSet::new(m, names.clone(), images)?,
        text: EmbeddingSet::new(m, names, text)?,
        manifest,
    })
}

impl SynthData {
    /// Train/test/text sets, splitting each class 80/20 by position.
    pub fn dataset(&self) -> Result<crate::embedding::Dataset> {
        let (train, test) = self.images.split_train_test();
        crate::embedding::Dataset::new(train, test, self.text.clone())
    }

    /// Writes `images.cem`, `text.cem` and `manifest.json` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::embedding::write_embedding_file(&self.images, dir.join("images.cem"))?;
        crate::embedding::write_embedding_file(&self.text, dir.join("text.cem"))?;
        self.manifest.save(dir.join("manifest.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;

    #[test]
    fn rotation_is_orthogonal() {
        let r = random_rotation(8, 3, "x").unwrap();
        let mut rt = DenseMatrix::zeros(8, 8);
        for i in 0..8 {
            for j in 0..8 {
                rt.as_mut_slice()[j * 8 + i] = r.get(i, j);
            }
        }
        let p = matmul(&rt, &r).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((p.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vectors_are_unit_norm() {
        let d = generate(&SynthConfig {
            delta: 0.5,
            sigma: 0.3,
            per_task_distortion: true,
            ..Default::default()
        })
        .unwrap();
        for r in d.images.records().iter().chain(d.text.records()) {
            assert!((r.vector.norm() - 1.0).abs() < 1e-6);
        }
        assert_eq!(d.images.len(), 500);
        assert_eq!(d.text.len(), 10);
        d.text.text_matrix().unwrap();
    }

    #[test]
    fn noiseless_images_match_text() {
        let d = generate(&SynthConfig {
            sigma: 0.0,
            ..Default::default()
        })
        .unwrap();
        let text = d.text.text_matrix().unwrap();
        for r in d.images.records() {
            for (a, b) in r.vector.as_slice().iter().zip(text.row(r.class_index)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn deterministic_bytes() {
        let cfg = SynthConfig {
            delta: 0.6,
            per_task_distortion: true,
            seed: 9,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.images.to_bytes().unwrap(), b.images.to_bytes().unwrap());
        assert_eq!(a.text.to_bytes().unwrap(), b.text.to_bytes().unwrap());
        assert_eq!(a.manifest, b.manifest);
    }

    #[test]
    fn invalid_configs() {
        for bad in [
            SynthConfig { dim: 1, ..Default::default() },
            SynthConfig { classes: 1, ..Default::default() },
            SynthConfig { per_class: 1, ..Default::default() },
            SynthConfig { delta: 1.5, ..Default::default() },
            SynthConfig { sigma: -1.0, ..Default::default() },
            SynthConfig { classes: 7, ..Default::default() },
        ] {
            assert!(matches!(generate(&bad), Err(Error::Config(_))), "{bad:?}");
        }
    }
}
