//! Image-quality metrics on magnitude images.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ComplexTensor;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn magnitudes(x: &ComplexTensor, reference: &ComplexTensor) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if x.shape() != reference.shape() {
        return Err(Error::shape(reference.shape(), x.shape()));
    }
    let peak = reference.max_abs();
    if peak == 0.0 {
        return Err(Error::InvalidParameter("reference image is identically zero".into()));
    }
    let a = x.data().iter().map(|v| v.norm()).collect();
    let b = reference.data().iter().map(|v| v.norm()).collect();
    Ok((a, b, peak))
}

/// `20·log10(max|ref| / rmse(|x|, |ref|))` in dB; `+∞` when the magnitudes agree exactly.
pub fn psnr(x: &ComplexTensor, reference: &ComplexTensor) -> Result<f64> {
    let (a, b, peak) = magnitudes(x, reference)?;
    let mse = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

/// Mean SSIM over every fully contained 7×7 window of each 2-D slice (the
/// last two axes), with uniform weights and dynamic range `max|ref|`.
pub fn ssim(x: &ComplexTensor, reference: &ComplexTensor) -> Result<f64> {
    let (a, b, peak) = magnitudes(x, reference)?;
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::InvalidParameter("ssim needs at least two axes".into()));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "ssim needs slices of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for s in 0..a.len() / plane {
        let (pa, pb) = (&a[s * plane..(s + 1) * plane], &b[s * plane..(s + 1) * plane]);
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (p, q) = (pa[y * w + x], pb[y * w + x]);
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub method: String,
    pub case: usize,
    /// `inf` when the reconstruction matches the reference exactly.
    pub psnr_db: f64,
    pub psnr_infinite: bool,
    pub ssim: f64,
}

impl CaseMetrics {
    pub fn compute(method: &str, case: usize, x: &ComplexTensor, reference: &ComplexTensor) -> Result<Self> {
        let p = psnr(x, reference)?;
        Ok(CaseMetrics {
            method: method.to_string(),
            case,
            psnr_db: p,
            psnr_infinite: p.is_infinite(),
            ssim: ssim(x, reference)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub method: String,
    pub n: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.iter().any(|x| x.is_infinite()) {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-case metrics for any number of methods plus their aggregates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
}

impl MetricsReport {
    pub fn push(&mut self, m: CaseMetrics) {
        self.cases.push(m);
    }

    /// Aggregates in order of first appearance of each method.
    pub fn aggregate(&self) -> Vec<AggregateMetrics> {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<&CaseMetrics>> = BTreeMap::new();
        for c in &self.cases {
            if !groups.contains_key(c.method.as_str()) {
                order.push(&c.method);
            }
            groups.entry(&c.method).or_default().push(c);
        }
        order
            .into_iter()
            .map(|m| {
                let g = &groups[m];
                let (pm, ps) = mean_std(&g.iter().map(|c| c.psnr_db).collect::<Vec<_>>());
                let (sm, ss) = mean_std(&g.iter().map(|c| c.ssim).collect::<Vec<_>>());
                AggregateMetrics {
                    method: m.to_string(),
                    n: g.len(),
                    psnr_mean: pm,
                    psnr_std: ps,
                    ssim_mean: sm,
                    ssim_std: ss,
                }
            })
            .collect()
    }

    pub fn mean_psnr(&self, method: &str) -> Option<f64> {
        self.aggregate()
            .into_iter()
            .find(|a| a.method == method)
            .map(|a| a.psnr_mean)
    }

    pub fn write_cases<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for c in &self.cases {
            w.serialize(c)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn write_aggregate<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for a in self.aggregate() {
            w.serialize(a)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::C64;

    fn real_image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ComplexTensor {
        ComplexTensor::from_fn(&[h, w], |i| C64::new(f(i / w, i % w), 0.0)).unwrap()
    }

    #[test]
    fn identical_images() {
        let r = real_image(16, 16, |y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        assert_eq!(psnr(&r, &r).unwrap(), f64::INFINITY);
        assert!((ssim(&r, &r).unwrap() - 1.0).abs() < 1e-12);
        let m = CaseMetrics::compute("gt", 0, &r, &r).unwrap();
        assert!(m.psnr_infinite);
    }

    #[test]
    fn psnr_formula() {
        // Peak 1 and a uniform error of 10^(-3/2) gives 30 dB.
        let r = real_image(10, 10, |y, x| if y == 0 && x == 0 { 1.0 } else { 0.5 });
        let e = 10f64.powf(-1.5);
        let x = real_image(10, 10, |y, x| if y == 0 && x == 0 { 1.0 + e } else { 0.5 + e });
        assert!((psnr(&x, &r).unwrap() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_is_scale_consistent() {
        let r = real_image(12, 12, |y, x| (y as f64 * 0.3 + x as f64 * 0.1).sin().abs());
        let x = real_image(12, 12, |y, x| (y as f64 * 0.31 + x as f64 * 0.1).sin().abs());
        let p = psnr(&x, &r).unwrap();
        for a in [0.01, 3.0, 1e4] {
            assert!((psnr(&x.scale(a), &r.scale(a)).unwrap() - p).abs() < 1e-9);
        }
    }

    #[test]
    fn inverted_checkerboard_has_low_ssim() {
        let r = real_image(16, 16, |y, x| ((y + x) % 2) as f64);
        let inv = real_image(16, 16, |y, x| 1.0 - ((y + x) % 2) as f64);
        assert!(ssim(&inv, &r).unwrap() < 0.1);
        let s = ssim(&inv, &r).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn rejects_zero_reference_and_shape_mismatch() {
        let z = ComplexTensor::zeros(&[8, 8]).unwrap();
        assert!(psnr(&z, &z).is_err());
        let r = real_image(8, 8, |_, _| 1.0);
        let s = real_image(9, 8, |_, _| 1.0);
        assert!(psnr(&s, &r).is_err());
    }

    #[test]
    fn aggregate_groups_by_method() {
        let mut rep = MetricsReport::default();
        for (i, p) in [30.0, 32.0].iter().enumerate() {
            rep.push(CaseMetrics {
                method: "a".into(),
                case: i,
                psnr_db: *p,
                psnr_infinite: false,
                ssim: 0.9,
            });
        }
        rep.push(CaseMetrics {
            method: "b".into(),
            case: 0,
            psnr_db: 20.0,
            psnr_infinite: false,
            ssim: 0.5,
        });
        let agg = rep.aggregate();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].method, "a");
        assert!((agg[0].psnr_mean - 31.0).abs() < 1e-12);
        assert!((agg[0].psnr_std - 1.0).abs() < 1e-12);
        assert_eq!(rep.mean_psnr("b"), Some(20.0));
        let mut buf = Vec::new();
        rep.write_cases(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "method,case,psnr_db,psnr_infinite,ssim");
    }
}
