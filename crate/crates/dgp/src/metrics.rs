//! Gradient distances, image-quality metrics, and byte-exact
//! communication accounting.

use serde::{Deserialize, Serialize, Serializer};

use crate::defense::{LocationSet, SparseGradient};
use crate::error::{DgpError, Result};
use crate::model::GradientSet;
use crate::numerics::Tensor;

/// Distance used to compare gradient sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

/// Euclidean or cosine distance over the concatenation of all tensors.
/// A zero-norm operand makes the cosine distance 1 by convention.
pub fn grad_distance(a: &GradientSet, b: &GradientSet, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Euclidean => Ok(a.sub(b)?.norm()),
        Metric::Cosine => {
            let (na, nb) = (a.norm(), b.norm());
            if na == 0.0 || nb == 0.0 {
                return Ok(1.0);
            }
            Ok(1.0 - a.dot(b)? / (na * nb))
        }
    }
}

/// Relative gradient distance `||a - b|| / ||a||`.
pub fn relative_distance(a: &GradientSet, b: &GradientSet) -> Result<f64> {
    let norm = a.norm();
    if norm == 0.0 {
        return Err(DgpError::InvalidArgument("relative distance of zero gradient".into()));
    }
    Ok(a.sub(b)?.norm() / norm)
}

fn serialize_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_some(v)
    } else {
        s.serialize_none()
    }
}

fn deserialize_psnr<'de, D>(d: D) -> std::result::Result<f64, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let opt: Option<f64> = Option::deserialize(d)?;
    Ok(opt.unwrap_or(f64::INFINITY))
}

/// Reconstruction quality scores. PSNR is infinite exactly when MSE is 0
/// (serialized as null).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub mse: f64,
    #[serde(serialize_with = "serialize_psnr", deserialize_with = "deserialize_psnr")]
    pub psnr: f64,
    pub ssim: f64,
}

const SSIM_WINDOW: usize = 4;

fn image_dims(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [h, w] => (*h, *w),
        _ => {
            let n = t.len();
            let side = (n as f64).sqrt().round() as usize;
            if side * side == n {
                (side, side)
            } else {
                (1, n)
            }
        }
    }
}

/// MSE, PSNR, and SSIM between two images of the same shape.
///
/// SSIM uses a uniform 4x4 window with stride 1 and the standard
/// constants C1 = (0.01 r)^2, C2 = (0.03 r)^2; images smaller than the
/// window fall back to one global window.
pub fn image_quality(x: &Tensor, recovered: &Tensor, dynamic_range: f64) -> Result<QualityScores> {
    if !x.same_shape(recovered) && x.len() != recovered.len() {
        return Err(DgpError::ShapeMismatch {
            expected: x.shape().to_vec(),
            got: recovered.shape().to_vec(),
        });
    }
    if dynamic_range <= 0.0 {
        return Err(DgpError::InvalidArgument("dynamic_range must be > 0".into()));
    }

    let n = x.len() as f64;
    let mse = x
        .data()
        .iter()
        .zip(recovered.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (dynamic_range * dynamic_range / mse).log10()
    };

    let (h, w) = image_dims(x);
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let (wh, ww) = if h < SSIM_WINDOW || w < SSIM_WINDOW {
        (h, w)
    } else {
        (SSIM_WINDOW, SSIM_WINDOW)
    };

    let mut ssim_sum = 0.0;
    let mut windows = 0usize;
    for top in 0..=(h - wh) {
        for left in 0..=(w - ww) {
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            let count = (wh * ww) as f64;
            for r in 0..wh {
                for c in 0..ww {
                    let a = x.data()[(top + r) * w + (left + c)];
                    let b = recovered.data()[(top + r) * w + (left + c)];
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                }
            }
            let (mu_a, mu_b) = (sa / count, sb / count);
            let var_a = saa / count - mu_a * mu_a;
            let var_b = sbb / count - mu_b * mu_b;
            let cov = sab / count - mu_a * mu_b;
            let val = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            ssim_sum += val;
            windows += 1;
        }
    }

    Ok(QualityScores { mse, psnr, ssim: ssim_sum / windows as f64 })
}

/// Transfer direction for ledger rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Upload,
    Download,
}

/// Wire bytes of a pruned upload: per tensor, the id bytes, a 4-byte
/// entry count, and 8 bytes per entry (u32 index + f32 value).
pub fn sparse_wire_bytes(wire: &SparseGradient) -> usize {
    wire.iter().map(|(id, t)| id.len() + 4 + 8 * t.nnz()).sum()
}

/// Dense transfer: 4 bytes (f32) per parameter.
pub fn dense_wire_bytes(param_count: usize) -> usize {
    4 * param_count
}

/// ADGP download: dense values only at the broadcast locations, plus the
/// bitmask itself.
pub fn adgp_download_bytes(location_set: &LocationSet) -> usize {
    4 * location_set.popcount() + location_set.bitmask_bytes()
}

/// True when the sparse encoding is no smaller than sending everything
/// dense (index overhead dominates at low pruning rates).
pub fn sparse_exceeds_dense(wire: &SparseGradient, param_count: usize) -> bool {
    sparse_wire_bytes(wire) >= dense_wire_bytes(param_count)
}

/// Per-round, per-user upload/download byte counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub user: usize,
    pub upload_bytes: usize,
    pub download_bytes: usize,
}

/// Communication ledger for one run; bytes are computed from the wire
/// format, never estimated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn new() -> Self {
        CommLedger::default()
    }

    pub fn record(&mut self, round: usize, user: usize, upload_bytes: usize, download_bytes: usize) {
        self.entries.push(LedgerEntry { round, user, upload_bytes, download_bytes });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total_upload(&self) -> usize {
        self.entries.iter().map(|e| e.upload_bytes).sum()
    }

    pub fn total_download(&self) -> usize {
        self.entries.iter().map(|e| e.download_bytes).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,user,upload_bytes,download_bytes\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.round, e.user, e.upload_bytes, e.download_bytes
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::{dgp_prune, DgpConfig};
    use crate::numerics::{gaussian, Rng};

    #[test]
    fn distance_trivial_cases() {
        let mut a = GradientSet::new();
        a.insert("t", Tensor::from_vec(vec![1.0, 0.0]));
        assert_eq!(grad_distance(&a, &a, Metric::Euclidean).unwrap(), 0.0);
        assert_eq!(grad_distance(&a, &a, Metric::Cosine).unwrap(), 0.0);

        let mut b = GradientSet::new();
        b.insert("t", Tensor::from_vec(vec![0.0, 1.0]));
        assert!((grad_distance(&a, &b, Metric::Cosine).unwrap() - 1.0).abs() < 1e-12);
        assert!(
            (grad_distance(&a, &b, Metric::Euclidean).unwrap() - 2f64.sqrt()).abs() < 1e-12
        );
    }

    #[test]
    fn zero_norm_cosine_sentinel() {
        let mut a = GradientSet::new();
        a.insert("t", Tensor::from_vec(vec![0.0, 0.0]));
        let mut b = GradientSet::new();
        b.insert("t", Tensor::from_vec(vec![1.0, 1.0]));
        assert_eq!(grad_distance(&a, &b, Metric::Cosine).unwrap(), 1.0);
    }

    #[test]
    fn relative_distance_dgp_example() {
        // the dgp_prune spec vector: removed entries 0.9, 0.8, 0.3, 0.2, 0.1, 0.05
        let mut g = GradientSet::new();
        g.insert(
            "v",
            Tensor::from_vec(vec![0.9, -0.8, 0.7, -0.6, 0.5, -0.4, 0.3, -0.2, 0.1, 0.05]),
        );
        let cfg = DgpConfig::new(0.2, 0.4).unwrap();
        let pruned = dgp_prune(&g, &cfg).densify();
        let ratio = relative_distance(&g, &pruned).unwrap();
        let expected = (1.5925f64 / 2.8525).sqrt();
        assert!((ratio - expected).abs() < 1e-12, "ratio {ratio}");
        assert!((expected - 0.7472).abs() < 1e-4);
    }

    #[test]
    fn image_quality_exact_match() {
        let x = Tensor::new(vec![8, 8], (0..64).map(|i| i as f64 / 63.0).collect()).unwrap();
        let q = image_quality(&x, &x, 1.0).unwrap();
        assert_eq!(q.mse, 0.0);
        assert!(q.psnr.is_infinite());
        assert!((q.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn image_quality_inverted_image() {
        let x = Tensor::new(vec![8, 8], (0..64).map(|i| (i % 7) as f64 / 6.0).collect()).unwrap();
        let inv = Tensor::new(vec![8, 8], x.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let q = image_quality(&x, &inv, 1.0).unwrap();
        assert!(q.ssim < 1.0);
    }

    /// Second, independently structured SSIM implementation.
    fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> f64 {
        let c1 = (0.01 * range) * (0.01 * range);
        let c2 = (0.03 * range) * (0.03 * range);
        let win = 4usize;
        let mut vals = Vec::new();
        for top in 0..=h - win {
            for left in 0..=w - win {
                let mut pa = Vec::new();
                let mut pb = Vec::new();
                for r in top..top + win {
                    for c in left..left + win {
                        pa.push(a[r * w + c]);
                        pb.push(b[r * w + c]);
                    }
                }
                let n = pa.len() as f64;
                let ma = pa.iter().sum::<f64>() / n;
                let mb = pb.iter().sum::<f64>() / n;
                let va = pa.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / n;
                let vb = pb.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / n;
                let cov = pa
                    .iter()
                    .zip(&pb)
                    .map(|(x, y)| (x - ma) * (y - mb))
                    .sum::<f64>()
                    / n;
                vals.push(
                    ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)),
                );
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn ssim_matches_independent_oracle() {
        let mut rng = Rng::new(12, 0);
        for _ in 0..5 {
            let a = gaussian(&mut rng, &[8, 8], 0.5, 0.2).unwrap();
            let b = gaussian(&mut rng, &[8, 8], 0.5, 0.2).unwrap();
            let q = image_quality(&a, &b, 1.0).unwrap();
            let oracle = ssim_oracle(a.data(), b.data(), 8, 8, 1.0);
            assert!((q.ssim - oracle).abs() < 1e-9, "{} vs {}", q.ssim, oracle);
        }
    }

    #[test]
    fn ssim_symmetry() {
        let mut rng = Rng::new(13, 0);
        let a = gaussian(&mut rng, &[8, 8], 0.5, 0.2).unwrap();
        let b = gaussian(&mut rng, &[8, 8], 0.5, 0.2).unwrap();
        let q_ab = image_quality(&a, &b, 1.0).unwrap();
        let q_ba = image_quality(&b, &a, 1.0).unwrap();
        assert!((q_ab.ssim - q_ba.ssim).abs() < 1e-12);
    }

    #[test]
    fn small_image_uses_global_window() {
        let a = Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        let q = image_quality(&a, &a, 1.0).unwrap();
        assert!((q.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wire_byte_arithmetic() {
        let mut rng = Rng::new(14, 0);
        let mut g = GradientSet::new();
        g.insert("t", gaussian(&mut rng, &[1000], 0.0, 1.0).unwrap());
        let wire = crate::defense::topk_prune(&g, 0.2).unwrap();
        // 200 entries -> 1600 payload bytes + 1 id byte + 4 count bytes
        assert_eq!(sparse_wire_bytes(&wire), 1 + 4 + 1600);
        assert_eq!(dense_wire_bytes(1000), 4000);
    }

    #[test]
    fn degenerate_pruning_flagged_as_oversized() {
        let mut rng = Rng::new(15, 0);
        let mut g = GradientSet::new();
        g.insert("t", gaussian(&mut rng, &[100], 0.0, 1.0).unwrap());
        let cfg = DgpConfig::new(0.0, 0.0).unwrap();
        let wire = dgp_prune(&g, &cfg);
        assert!(sparse_exceeds_dense(&wire, 100));
    }

    #[test]
    fn ledger_totals_and_csv() {
        let mut ledger = CommLedger::new();
        ledger.record(0, 0, 100, 400);
        ledger.record(0, 1, 120, 400);
        assert_eq!(ledger.total_upload(), 220);
        assert_eq!(ledger.total_download(), 800);
        let csv = ledger.to_csv();
        assert!(csv.starts_with("round,user,upload_bytes,download_bytes\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}
