//! Reconstruction losses and image quality metrics.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::pipeline::config::LossKind;

/// `mean((pred − target)²)` or `mean(|pred − target|)` on the tape.
pub fn loss_var<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
    let (a, b) = (tape.shape(pred)?, tape.shape(target)?);
    if a != b {
        return Err(Error::dim("loss", format!("prediction {a:?} vs target {b:?}")));
    }
    let r = tape.sub(pred, target)?;
    let e = match kind {
        LossKind::Mse => tape.square(r)?,
        LossKind::L1 => tape.abs(r)?,
    };
    tape.mean(e)
}

pub fn loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, kind: LossKind) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            "loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.len() as f64;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let r = (p - t).as_f64();
            match kind {
                LossKind::Mse => r * r,
                LossKind::L1 => r.abs(),
            }
        })
        .sum();
    Ok(s / n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// `+inf` for identical images.
    pub psnr: f64,
    pub ssim: f64,
}

/// `10·log10(1/mse)` for data range 1.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mse = loss(pred, target, LossKind::Mse)?;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// PSNR over the pixels at least `margin` away from every border of an
/// `H×W×C` image.
pub fn interior_psnr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, margin: usize) -> Result<f64> {
    let s = pred.shape();
    if s.len() != 3 || s != target.shape() || s[0] <= 2 * margin || s[1] <= 2 * margin {
        return Err(Error::dim("interior_psnr", format!("{s:?} with margin {margin}")));
    }
    let (h, w, ch) = (s[0], s[1], s[2]);
    let (mut sum, mut n) = (0.0, 0usize);
    for y in margin..h - margin {
        for x in margin..w - margin {
            for k in 0..ch {
                let r = (pred.get(&[y, x, k]) - target.get(&[y, x, k])).as_f64();
                sum += r * r;
                n += 1;
            }
        }
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all channels and every fully contained 11×11 Gaussian
/// window of an `H×W×C` image pair. Images smaller than the window use a
/// single window clipped to the image.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let s = a.shape();
    if s.len() != 3 || s != b.shape() {
        return Err(Error::dim("ssim", format!("{:?} vs {:?}", s, b.shape())));
    }
    let (h, w, ch) = (s[0], s[1], s[2]);
    let g = gaussian_window();
    let (wy, wx) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let (oy, ox) = ((SSIM_WINDOW - wy) / 2, (SSIM_WINDOW - wx) / 2);
    let (mut total, mut count) = (0.0, 0usize);
    for k in 0..ch {
        for y0 in 0..=h - wy {
            for x0 in 0..=w - wx {
                let (mut norm, mut ma, mut mb) = (0.0, 0.0, 0.0);
                let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                for dy in 0..wy {
                    for dx in 0..wx {
                        let wt = g[dy + oy] * g[dx + ox];
                        let pa = a.get(&[y0 + dy, x0 + dx, k]).as_f64();
                        let pb = b.get(&[y0 + dy, x0 + dx, k]).as_f64();
                        norm += wt;
                        ma += wt * pa;
                        mb += wt * pb;
                        saa += wt * pa * pa;
                        sbb += wt * pb * pb;
                        sab += wt * pa * pb;
                    }
                }
                let (ma, mb) = (ma / norm, mb / norm);
                let va = saa / norm - ma * ma;
                let vb = sbb / norm - mb * mb;
                let cov = sab / norm - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn metrics<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Metrics> {
    Ok(Metrics {
        psnr: psnr(pred, target)?,
        ssim: ssim(pred, target)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_inputs, Differentiable, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[h, w, 3], 0.0, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn zero_and_constant_residuals() {
        let a = img(1, 4, 4);
        assert_eq!(loss(&a, &a, LossKind::Mse).unwrap(), 0.0);
        assert_eq!(loss(&a, &a, LossKind::L1).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        assert!((loss(&b, &a, LossKind::Mse).unwrap() - 0.25).abs() < 1e-12);
        assert!((loss(&b, &a, LossKind::L1).unwrap() - 0.5).abs() < 1e-12);
        assert!(loss(&a, &img(1, 4, 5), LossKind::Mse).is_err());
    }

    #[test]
    fn tape_loss_matches_plain_loss_and_mse_gradient() {
        let (a, b) = (img(2, 3, 5), img(3, 3, 5));
        for kind in [LossKind::Mse, LossKind::L1] {
            let mut tape = Tape::new();
            let (pa, pb) = (tape.leaf(a.clone()), tape.constant(b.clone()));
            let l = loss_var(&mut tape, pa, pb, kind).unwrap();
            assert!((tape.value(l).unwrap().data()[0] - loss(&a, &b, kind).unwrap()).abs() < 1e-12);
            let g = tape.backward(l, None).unwrap();
            if kind == LossKind::Mse {
                let n = a.len() as f64;
                for ((ga, &x), &y) in g.get(pa).unwrap().data().iter().zip(a.data()).zip(b.data()) {
                    assert!((ga - 2.0 * (x - y) / n).abs() < 1e-12);
                }
            }
        }
        struct Mse(Tensor<f64>);
        impl Differentiable for Mse {
            fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
                let t = tape.constant(self.0.cast());
                loss_var(tape, x[0], t, LossKind::Mse)
            }
        }
        let r = check_inputs::<f64, _>("mse", &Mse(b), &[a], &GradCheckOptions::default()).unwrap();
        assert!(r.passes(1e-6));
    }

    #[test]
    fn psnr_and_ssim_identities() {
        let a = img(4, 16, 16);
        let m = metrics(&a, &a).unwrap();
        assert_eq!(m.psnr, f64::INFINITY);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn negative_image_has_nonpositive_ssim() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::new(&[16, 16, 1], (0..256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() <= 0.0);
    }

    #[test]
    fn interior_psnr_ignores_border() {
        let a = img(6, 8, 8);
        let mut b = a.clone();
        b.set(&[0, 0, 0], 5.0);
        assert_eq!(interior_psnr(&a, &b, 1).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b).unwrap().is_finite());
    }
}
