//! Evaluation metrics: PSNR, SSIM over Rec.601 luma, and a fixed-feature
//! distance. The feature distance is an LPIPS stand-in (random frozen
//! features, not learned ones) and is labeled as such in reports.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::FeatureExtractor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("metrics", a.shape(), b.shape()));
    }
    let af = a.cast::<f64>();
    let bf = b.cast::<f64>();
    let sum: f64 = af.data().iter().zip(bf.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.numel() as f64)
}

/// 10*log10(peak^2 / MSE), reporting a 99 dB sentinel when MSE is zero.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

fn luma_plane<T: Scalar>(img: &Tensor<T>) -> Result<Vec<f64>> {
    let s = img.shape();
    if s.n != 1 || (s.c != 1 && s.c != 3) {
        return Err(Error::invalid("ssim", "expected a single 1- or 3-channel image"));
    }
    let f = img.cast::<f64>();
    let plane = s.h * s.w;
    let d = f.data();
    if s.c == 1 {
        return Ok(d.to_vec());
    }
    Ok((0..plane)
        .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
        .collect())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Mean local SSIM over valid (unpadded) 11x11 windows, peak 1.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::shape("ssim", s, b.shape()));
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid("ssim", "image smaller than the 11x11 window"));
    }
    let ya = luma_plane(a)?;
    let yb = luma_plane(b)?;
    let w1 = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=(s.h - SSIM_WINDOW) {
        for ox in 0..=(s.w - SSIM_WINDOW) {
            let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let w = w1[dy] * w1[dx];
                    let va = ya[(oy + dy) * s.w + ox + dx];
                    let vb = yb[(oy + dy) * s.w + ox + dx];
                    ma += w * va;
                    mb += w * vb;
                    maa += w * va * va;
                    mbb += w * vb * vb;
                    mab += w * va * vb;
                }
            }
            let va = maa - ma * ma;
            let vb = mbb - mb * mb;
            let cov = mab - ma * mb;
            let score = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += score;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean over tap layers of squared differences between channel-unit-
/// normalized features. LPIPS stand-in: the feature space is fixed random,
/// not learned.
pub fn feature_distance<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    extractor: &FeatureExtractor<T>,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("feature_distance", a.shape(), b.shape()));
    }
    let mut g = Graph::new();
    let na = g.leaf(a.clone());
    let nb = g.leaf(b.clone());
    let taps_a = extractor.forward(&mut g, na)?;
    let taps_b = extractor.forward(&mut g, nb)?;

    let normalize = |t: &Tensor<T>| -> Vec<f64> {
        let f = t.cast::<f64>();
        let s = t.shape();
        let plane = s.h * s.w;
        let mut out = vec![0.0; f.numel()];
        for n in 0..s.n {
            for p in 0..plane {
                let mut sq = 0.0;
                for c in 0..s.c {
                    let v = f.data()[(n * s.c + c) * plane + p];
                    sq += v * v;
                }
                let denom = sq.sqrt().max(1e-8);
                for c in 0..s.c {
                    let i = (n * s.c + c) * plane + p;
                    out[i] = f.data()[i] / denom;
                }
            }
        }
        out
    };

    let mut total = 0.0;
    for (ta, tb) in taps_a.iter().zip(&taps_b) {
        let fa = normalize(g.value(*ta));
        let fb = normalize(g.value(*tb));
        let d: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum();
        total += d / fa.len() as f64;
    }
    Ok(total / taps_a.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub video_id: String,
    pub frame_idx: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub feat_dist: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-frame lines plus one trailing aggregate line:
/// `aggregate,<n>,psnr_mean,psnr_std,ssim_mean,ssim_std,feat_mean,feat_std`.
pub fn format_report(rows: &[MetricRow]) -> String {
    let mut out = String::from("video_id,frame_idx,psnr,ssim,feat_dist\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.video_id, r.frame_idx, r.psnr, r.ssim, r.feat_dist
        ));
    }
    if !rows.is_empty() {
        let (pm, ps) = mean_std(&rows.iter().map(|r| r.psnr).collect::<Vec<_>>());
        let (sm, ss) = mean_std(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>());
        let (fm, fs) = mean_std(&rows.iter().map(|r| r.feat_dist).collect::<Vec<_>>());
        out.push_str(&format!(
            "aggregate,{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            rows.len(),
            pm,
            ps,
            sm,
            ss,
            fm,
            fs
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::METRIC_EXTRACTOR_SEED;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn psnr_cases() {
        let a = rand_img(8, 8, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);

        // uniform offset of 0.1 -> mse 0.01 -> 20 dB
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);

        let c = rand_img(8, 8, 2);
        let direct: f64 = a
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 192.0;
        let want = 10.0 * (1.0 / direct).log10();
        assert!((psnr(&a, &c, 1.0).unwrap() - want).abs() < 1e-6);

        let d = rand_img(4, 8, 3);
        assert!(psnr(&a, &d, 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let a = rand_img(8, 8, 4);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1, 0.3] {
            let b = a.map(|v| v + amp);
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_window_guard() {
        let a = rand_img(16, 16, 5);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let small = rand_img(8, 8, 6);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn ssim_constant_offset_closed_form() {
        let mu1 = 0.3;
        let mu2 = 0.5;
        let a = Tensor::<f64>::filled(Shape::new(1, 3, 16, 16), mu1);
        let b = Tensor::<f64>::filled(Shape::new(1, 3, 16, 16), mu2);
        let c1 = 0.01f64 * 0.01;
        let want = (2.0 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_direct_oracle_on_inverted_image() {
        let a = rand_img(16, 20, 7);
        let b = a.map(|v| 1.0 - v);
        let got = ssim(&a, &b).unwrap();
        assert!(got < 1.0);

        // independent recomputation from the definition
        let luma = |img: &Tensor<f64>| -> Vec<f64> {
            let plane = 16 * 20;
            (0..plane)
                .map(|i| {
                    0.299 * img.data()[i]
                        + 0.587 * img.data()[plane + i]
                        + 0.114 * img.data()[2 * plane + i]
                })
                .collect()
        };
        let (ya, yb) = (luma(&a), luma(&b));
        let mut k = [0.0f64; 11];
        for (i, v) in k.iter_mut().enumerate() {
            let d = i as f64 - 5.0;
            *v = (-d * d / 4.5).exp();
        }
        let ks: f64 = k.iter().sum();
        let (c1, c2) = (0.0001, 0.0009);
        let mut acc = 0.0;
        for oy in 0..6 {
            for ox in 0..10 {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let w = (k[dy] / ks) * (k[dx] / ks);
                        let va = ya[(oy + dy) * 20 + ox + dx];
                        let vb = yb[(oy + dy) * 20 + ox + dx];
                        ma += w * va;
                        mb += w * vb;
                        maa += w * va * va;
                        mbb += w * vb * vb;
                        mab += w * va * vb;
                    }
                }
                acc += ((2.0 * ma * mb + c1) * (2.0 * (mab - ma * mb) + c2))
                    / ((ma * ma + mb * mb + c1)
                        * ((maa - ma * ma) + (mbb - mb * mb) + c2));
            }
        }
        assert!((got - acc / 60.0).abs() < 1e-9);
    }

    #[test]
    fn feature_distance_properties() {
        let ex = FeatureExtractor::<f64>::from_seed("lpips", METRIC_EXTRACTOR_SEED);
        let a = rand_img(16, 16, 8);
        assert_eq!(feature_distance(&a, &a, &ex).unwrap(), 0.0);

        let b = rand_img(16, 16, 9);
        let ab = feature_distance(&a, &b, &ex).unwrap();
        let ba = feature_distance(&b, &a, &ex).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn feature_distance_monotone_under_noise() {
        let ex = FeatureExtractor::<f64>::from_seed("lpips", METRIC_EXTRACTOR_SEED);
        let a = rand_img(16, 16, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise: Vec<f64> = (0..a.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = 0.0;
        for sigma in [0.02, 0.05, 0.1] {
            let noisy = Tensor::new(
                a.shape(),
                a.data().iter().zip(&noise).map(|(v, n)| v + sigma * n).collect(),
            )
            .unwrap();
            let d = feature_distance(&a, &noisy, &ex).unwrap();
            assert!(d > last, "sigma {sigma}: {d} <= {last}");
            last = d;
        }
    }

    #[test]
    fn report_aggregate_matches_recomputation() {
        let rows = vec![
            MetricRow { video_id: "a".into(), frame_idx: 0, psnr: 30.0, ssim: 0.9, feat_dist: 0.1 },
            MetricRow { video_id: "a".into(), frame_idx: 1, psnr: 32.0, ssim: 0.8, feat_dist: 0.3 },
            MetricRow { video_id: "b".into(), frame_idx: 0, psnr: 28.0, ssim: 0.7, feat_dist: 0.2 },
        ];
        let report = format_report(&rows);
        let agg = report.lines().last().unwrap();
        let fields: Vec<&str> = agg.split(',').collect();
        assert_eq!(fields[0], "aggregate");
        assert_eq!(fields[1], "3");
        let pm: f64 = fields[2].parse().unwrap();
        let ps: f64 = fields[3].parse().unwrap();
        assert!((pm - 30.0).abs() < 1e-9);
        let want_std = ((4.0 + 0.0 + 4.0) / 3.0f64).sqrt();
        assert!((ps - want_std).abs() < 1e-5);
        assert_eq!(report.lines().count(), 5);
    }
}
