//! Datasets: synthetic Gaussian blobs, the two-view augmentation, and the
//! raw CIFAR-10 binary format.

use std::io::Write;
use std::path::Path;

use crate::error::{FsslError, Result};
use crate::linalg::{dot, norm, Vector};
use crate::rng::RngStream;

pub const CIFAR10_RECORD: usize = 3073;
pub const CIFAR10_CLASSES: usize = 10;

/// Samples with labels. Self-supervised training only ever sees
/// [`Dataset::inputs`]; labels are read by poison selection and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Vector<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Vector<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(FsslError::DimMismatch {
                expected: samples.len(),
                found: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(FsslError::LabelOutOfRange { label: l, classes });
        }
        let dim = samples.first().map_or(0, |s| s.len());
        if let Some(s) = samples.iter().find(|s| s.len() != dim) {
            return Err(FsslError::DimMismatch {
                expected: dim,
                found: s.len(),
            });
        }
        Ok(Dataset {
            samples,
            labels,
            classes,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Unlabeled view used by self-supervised training.
    pub fn inputs(&self) -> &[Vector<f64>] {
        &self.samples
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            dim: self.dim,
        }
    }

    /// `label,x0,x1,...` per line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..self.dim).map(|i| format!("x{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (s, l) in self.samples.iter().zip(&self.labels) {
            write!(w, "{l}")?;
            for v in s.iter() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Orthonormal class means for a blob family.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobMeans {
    pub means: Vec<Vec<f64>>,
}

impl BlobMeans {
    /// `classes` random orthonormal directions in `dim` dimensions
    /// (Gram–Schmidt on Gaussian draws).
    pub fn random(classes: usize, dim: usize, rng: &mut RngStream) -> Result<Self> {
        Self::random_with_background(classes, dim, 0, rng)
    }

    /// As [`BlobMeans::random`], but the last `background` coordinates of
    /// every mean are zero: they carry noise only.
    pub fn random_with_background(
        classes: usize,
        dim: usize,
        background: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let support = dim.saturating_sub(background);
        if classes < 2 || support < classes {
            return Err(FsslError::DimTooSmall {
                dim: support,
                classes,
            });
        }
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
        while means.len() < classes {
            let mut v: Vec<f64> = (0..dim)
                .map(|i| if i < support { rng.normal() } else { 0.0 })
                .collect();
            for m in &means {
                let p = dot(&v, m);
                v.iter_mut().zip(m).for_each(|(x, &mi)| *x -= p * mi);
            }
            let n = norm(&v);
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            means.push(v);
        }
        Ok(BlobMeans { means })
    }

    /// Draws `n_per_class` samples per class around the means, class-major.
    pub fn sample(&self, n_per_class: usize, spread: f64, rng: &mut RngStream) -> Dataset {
        let classes = self.means.len();
        let mut samples = Vec::with_capacity(classes * n_per_class);
        let mut labels = Vec::with_capacity(classes * n_per_class);
        for (c, m) in self.means.iter().enumerate() {
            for _ in 0..n_per_class {
                let x: Vec<f64> = m.iter().map(|&mu| mu + spread * rng.normal()).collect();
                samples.push(Vector::new(x));
                labels.push(c);
            }
        }
        let dim = self.means[0].len();
        Dataset {
            samples,
            labels,
            classes,
            dim,
        }
    }
}

/// Gaussian blobs around `classes` orthonormal means.
pub fn synth_blobs(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    let means = BlobMeans::random(classes, dim, rng)?;
    Ok(means.sample(n_per_class, spread, rng))
}

/// One augmented view: additive `N(0, sigma^2)` noise, then a `rho`
/// fraction of coordinates zeroed. The count is stochastically rounded so
/// the expected masked fraction is exactly `rho`.
pub fn augment_view(x: &[f64], sigma: f64, rho: f64, rng: &mut RngStream) -> Vec<f64> {
    let mut v: Vec<f64> = if sigma > 0.0 {
        x.iter().map(|&xi| xi + sigma * rng.normal()).collect()
    } else {
        x.to_vec()
    };
    if rho > 0.0 {
        let exact = rho * v.len() as f64;
        let mut k = exact.floor() as usize;
        let frac = exact - exact.floor();
        if frac > 0.0 && rng.uniform() < frac {
            k += 1;
        }
        for i in rng.choose_distinct(v.len(), k) {
            v[i] = 0.0;
        }
    }
    v
}

/// Two independent views `(x_q, x_k)`.
pub fn augment_pair(x: &[f64], sigma: f64, rho: f64, rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
    let q = augment_view(x, sigma, rho, rng);
    let k = augment_view(x, sigma, rho, rng);
    (q, k)
}

/// Parses raw CIFAR-10 binary records (1 label byte + 3072 pixel bytes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR10_RECORD != 0 {
        return Err(FsslError::MalformedRecord(format!(
            "length {} is not a multiple of {CIFAR10_RECORD}",
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(bytes.len() / CIFAR10_RECORD);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR10_RECORD);
    for rec in bytes.chunks_exact(CIFAR10_RECORD) {
        let label = rec[0] as usize;
        if label >= CIFAR10_CLASSES {
            return Err(FsslError::LabelOutOfRange {
                label,
                classes: CIFAR10_CLASSES,
            });
        }
        labels.push(label);
        samples.push(Vector::new(
            rec[1..].iter().map(|&b| b as f64 / 255.0).collect(),
        ));
    }
    Dataset::new(samples, labels, CIFAR10_CLASSES)
}

pub fn ingest_cifar10(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_cifar10(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_basic_properties() {
        let d = synth_blobs(4, 6, 5, 0.0, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(d.len(), 20);
        for c in 0..4 {
            let first = &d.samples[c * 5];
            for i in 0..5 {
                assert_eq!(&d.samples[c * 5 + i], first);
                assert_eq!(d.labels[c * 5 + i], c);
            }
        }
        let m = BlobMeans::random(10, 32, &mut RngStream::new(2, 0)).unwrap();
        for i in 0..10 {
            assert!((norm(&m.means[i]) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(dot(&m.means[i], &m.means[j]).abs() <= 1e-9);
            }
        }
        assert!(matches!(
            synth_blobs(5, 3, 2, 0.1, &mut RngStream::new(0, 0)),
            Err(FsslError::DimTooSmall { .. })
        ));
        let a = synth_blobs(3, 4, 3, 0.2, &mut RngStream::new(3, 3)).unwrap();
        let b = synth_blobs(3, 4, 3, 0.2, &mut RngStream::new(3, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn background_coordinates_carry_no_class_signal() {
        let m = BlobMeans::random_with_background(10, 32, 4, &mut RngStream::new(5, 0)).unwrap();
        for (i, mi) in m.means.iter().enumerate() {
            assert!(mi[28..].iter().all(|&x| x == 0.0));
            assert!((norm(mi) - 1.0).abs() < 1e-12);
            for mj in &m.means[..i] {
                assert!(dot(mi, mj).abs() <= 1e-9);
            }
        }
        assert!(matches!(
            BlobMeans::random_with_background(10, 12, 4, &mut RngStream::new(5, 0)),
            Err(FsslError::DimTooSmall { dim: 8, .. })
        ));
    }

    #[test]
    fn augment_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut rng = RngStream::new(0, 0);
        let (q, k) = augment_pair(&x, 0.0, 0.0, &mut rng);
        assert_eq!(q, x);
        assert_eq!(k, x);
        for _ in 0..20 {
            let (q, k) = augment_pair(&x, 0.0, 0.5, &mut rng);
            assert_eq!(q.iter().filter(|&&v| v == 0.0).count(), 2);
            assert_eq!(k.iter().filter(|&&v| v == 0.0).count(), 2);
        }
        let a = augment_pair(&x, 0.3, 0.25, &mut RngStream::new(4, 1));
        let b = augment_pair(&x, 0.3, 0.25, &mut RngStream::new(4, 1));
        assert_eq!(a, b);
    }

    /// E[view] = (1 - rho) x, within three standard errors per coordinate.
    #[test]
    fn augment_mean_is_shrunk_input() {
        let x = [1.0, -2.0, 0.5, 3.0, -1.0];
        let (sigma, rho, n) = (0.1, 0.3, 10_000);
        let mut rng = RngStream::new(9, 9);
        let mut sum = [0.0; 5];
        let mut sq = [0.0; 5];
        for _ in 0..n {
            let v = augment_view(&x, sigma, rho, &mut rng);
            assert_eq!(v.len(), 5);
            for i in 0..5 {
                sum[i] += v[i];
                sq[i] += v[i] * v[i];
            }
        }
        for i in 0..5 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - (1.0 - rho) * x[i]).abs() <= 3.0 * se,
                "coord {i}: {mean}"
            );
        }
    }

    #[test]
    fn cifar_parsing() {
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat(255u8).take(3072));
        let d = parse_cifar10(&rec).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.labels[0], 7);
        assert_eq!(d.dim, 3072);
        assert!(d.samples[0].iter().all(|&v| v == 1.0));
        assert!(matches!(
            parse_cifar10(&rec[..100]),
            Err(FsslError::MalformedRecord(_))
        ));
        rec[0] = 12;
        assert!(matches!(
            parse_cifar10(&rec),
            Err(FsslError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn csv_dump() {
        let d = synth_blobs(2, 2, 1, 0.0, &mut RngStream::new(0, 0)).unwrap();
        let mut out = Vec::new();
        d.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert!(s.starts_with("label,x0,x1\n0,"));
    }
}
