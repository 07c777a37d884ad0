//! Pairwise route-similarity regularization.
//!
//! Pairs of samples with similar scale encodings are pulled towards similar
//! routes: the cosine between flattened gate vectors is regressed onto the
//! XNOR agreement of the encodings, mapped linearly into `[min, max]`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::budget::ScaleEncoding;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    pub min: f64,
    pub max: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig { min: 0.6, max: 0.95 }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.min && self.min <= self.max && self.max <= 1.0) {
            return Err(Error::Config(format!(
                "similarity: need 0 < min <= max <= 1, got min={} max={}",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Fraction of positions where two encodings agree.
pub fn scale_similarity(a: &ScaleEncoding, b: &ScaleEncoding) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Usage(format!("scale encodings of length {} and {}", a.len(), b.len())));
    }
    let agree = a.0.iter().zip(&b.0).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / a.len() as f64)
}

/// Cosine of two route vectors; 0 if either is all zeros.
pub fn path_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

pub fn gt_similarity(sim_scale: f64, min: f64, max: f64) -> f64 {
    sim_scale * (max - min) + min
}

fn check_batch(batch: usize, scales: &[ScaleEncoding]) -> Result<()> {
    if scales.len() != batch {
        return Err(Error::Usage(format!("{} scale encodings for a batch of {batch}", scales.len())));
    }
    Ok(())
}

/// `(1/B) Σ_{i<j} (cos(R_i, R_j) − Sim_gt(i, j))²` on plain vectors.
pub fn local_similarity_loss(routes: &[Vec<f64>], scales: &[ScaleEncoding], cfg: &SimilarityConfig) -> Result<f64> {
    let b = routes.len();
    check_batch(b, scales)?;
    if b < 2 {
        log::info!("local similarity loss needs at least two samples, got {b}; using 0");
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..b {
        for j in i + 1..b {
            let target = gt_similarity(scale_similarity(&scales[i], &scales[j])?, cfg.min, cfg.max);
            total += (path_similarity(&routes[i], &routes[j]) - target).powi(2);
        }
    }
    Ok(total / b as f64)
}

/// Differentiable form over a `B×D` route matrix.
pub fn local_similarity_loss_var(tape: &mut Tape, routes: Var, scales: &[ScaleEncoding], cfg: &SimilarityConfig) -> Result<Var> {
    let b = match tape.shape(routes)[..] {
        [b, _] => b,
        ref s => return Err(Error::shape("local_similarity_loss", format!("routes {s:?}"))),
    };
    check_batch(b, scales)?;
    if b < 2 {
        log::info!("local similarity loss needs at least two samples, got {b}; using 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let rows: Vec<Var> = (0..b).map(|i| tape.row(routes, i)).collect::<Result<_>>()?;
    let mut total: Option<Var> = None;
    for i in 0..b {
        for j in i + 1..b {
            let target = gt_similarity(scale_similarity(&scales[i], &scales[j])?, cfg.min, cfg.max);
            let cos = tape.cosine_similarity(rows[i], rows[j])?;
            let gap = tape.add_scalar(cos, -target);
            let sq = tape.square(gap);
            total = Some(match total {
                Some(t) => tape.add(t, sq)?,
                None => sq,
            });
        }
    }
    let total = total.expect("at least one pair");
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Flattens per-node `B×3` gates into the `B×3n` route matrix.
pub fn route_matrix(tape: &mut Tape, gates: &[Var]) -> Result<Var> {
    tape.concat_cols(gates)
}

/// Writes the pairwise path-similarity matrix as CSV (diagnostics).
pub fn write_similarity_csv<W: Write>(mut out: W, routes: &[Vec<f64>]) -> Result<()> {
    let header: Vec<String> = (0..routes.len()).map(|j| format!("s{j}")).collect();
    writeln!(out, "sample,{}", header.join(","))?;
    for (i, a) in routes.iter().enumerate() {
        let row: Vec<String> = routes.iter().map(|b| path_similarity(a, b).to_string()).collect();
        writeln!(out, "s{i},{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(bits: &[u8]) -> ScaleEncoding {
        ScaleEncoding::from_bits(bits)
    }

    #[test]
    fn scale_similarity_values() {
        assert_eq!(scale_similarity(&enc(&[1, 0, 1, 0]), &enc(&[1, 0, 1, 0])).unwrap(), 1.0);
        assert_eq!(scale_similarity(&enc(&[1, 0, 1, 0]), &enc(&[1, 1, 0, 0])).unwrap(), 0.5);
        assert_eq!(scale_similarity(&enc(&[1, 0, 1, 0]), &enc(&[0, 1, 0, 1])).unwrap(), 0.0);
        assert!(matches!(scale_similarity(&enc(&[1, 0]), &enc(&[1, 0, 0])), Err(Error::Usage(_))));
    }

    #[test]
    fn path_similarity_values() {
        let r = vec![0.2, 0.0, 0.9, 0.4];
        assert!((path_similarity(&r, &r) - 1.0).abs() < 1e-15);
        assert_eq!(path_similarity(&[1.0, 0.0, 0.0], &[0.0, 0.5, 0.3]), 0.0);
        assert_eq!(path_similarity(&[0.0; 3], &[0.0, 0.5, 0.3]), 0.0);
    }

    #[test]
    fn gt_similarity_endpoints() {
        let c = SimilarityConfig::default();
        assert_eq!(gt_similarity(0.0, c.min, c.max), 0.6);
        assert_eq!(gt_similarity(1.0, c.min, c.max), 0.95);
        assert!((gt_similarity(0.5, c.min, c.max) - 0.775).abs() < 1e-15);
    }

    #[test]
    fn config_bounds() {
        assert!(SimilarityConfig { min: 0.0, max: 0.5 }.validate().is_err());
        assert!(SimilarityConfig { min: 0.7, max: 0.6 }.validate().is_err());
        assert!(SimilarityConfig { min: 0.6, max: 1.0 }.validate().is_ok());
    }

    #[test]
    fn identical_samples_pay_one_minus_max_per_pair() {
        let cfg = SimilarityConfig::default();
        for b in [2usize, 3, 5, 8] {
            let routes = vec![vec![0.3, 0.8, 0.1]; b];
            let scales = vec![enc(&[1, 0, 0, 1]); b];
            let pairs = (b * (b - 1) / 2) as f64;
            let expect = pairs * (1.0f64 - 0.95).powi(2) / b as f64;
            let got = local_similarity_loss(&routes, &scales, &cfg).unwrap();
            assert!((got - expect).abs() < 1e-15, "{b}: {got} vs {expect}");
        }
    }

    #[test]
    fn single_sample_batch_is_zero() {
        let cfg = SimilarityConfig::default();
        assert_eq!(local_similarity_loss(&[vec![1.0]], &[enc(&[1])], &cfg).unwrap(), 0.0);
        let mut tape = Tape::new();
        let r = tape.param(Tensor::new(vec![1, 2], vec![0.5, 0.5]));
        let l = local_similarity_loss_var(&mut tape, r, &[enc(&[1])], &cfg).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn matching_targets_give_zero() {
        // cos = 0.6 exactly for complementary-scale pair with Min = 0.6
        let a = vec![1.0, 0.0];
        let b = vec![0.6, 0.8];
        let cfg = SimilarityConfig::default();
        let l = local_similarity_loss(&[a, b], &[enc(&[1, 0]), enc(&[0, 1])], &cfg).unwrap();
        assert!(l < 1e-30);
    }

    #[test]
    fn csv_diagonal_is_one() {
        let mut buf = Vec::new();
        write_similarity_csv(&mut buf, &[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "sample,s0,s1\ns0,1,0\ns1,0,1\n");
    }
}
