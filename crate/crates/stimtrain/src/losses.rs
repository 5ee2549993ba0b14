//! Cross entropy, KL divergence, logit decomposition, the direction-only
//! (magnitude-free) KL loss, and the combined stimulative objective.
//!
//! The direction-only variant discards each row's L2 magnitude before the
//! softmax: with `Ẑ = Z / max(||Z||, ε)`, the loss is `KL(softmax(Ẑ_t),
//! softmax(Ẑ_s))`, invariant to positive rescaling of either argument's rows
//! and preserving the argmax. Teacher logits are constants throughout: the
//! `*_grad_student` functions differentiate with respect to the student
//! branch only.

use ndarray::{Array1, Array2};

use crate::elem::Elem;
use crate::error::{Error, Result};

/// Floor inside logarithms and magnitude divisions.
pub const EPS: f64 = 1e-12;

/// Per-row L2 magnitude and unit direction of a logit vector.
#[derive(Debug, Clone)]
pub struct LogitDecomposition<F> {
    pub magnitude: F,
    pub direction: Array1<F>,
}

/// One evaluation of the stimulative objective.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub ce: f64,
    pub kl_terms: Vec<f64>,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn mean_kl(&self) -> f64 {
        if self.kl_terms.is_empty() {
            0.0
        } else {
            self.kl_terms.iter().sum::<f64>() / self.kl_terms.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Kl,
    KlMinus,
}

fn check_finite<F: Elem>(z: &Array1<F>) -> Result<()> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite logits".into()));
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax<F: Elem>(z: &Array1<F>) -> Result<Array1<F>> {
    check_finite(z)?;
    Ok(softmax_unchecked(z))
}

fn softmax_unchecked<F: Elem>(z: &Array1<F>) -> Array1<F> {
    let m = z.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let mut e = z.mapv(|v| (v - m).exp());
    let s = e.sum();
    e.mapv_inplace(|v| v / s);
    e
}

fn softmax_row<F: Elem>(row: &[F]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.as_f64()));
    let e: Vec<f64> = row.iter().map(|&v| (v.as_f64() - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mean over the batch of `-log p[y]`.
pub fn cross_entropy<F: Elem>(logits: &Array2<F>, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Cross entropy plus its gradient with respect to the logits.
pub fn cross_entropy_with_grad<F: Elem>(logits: &Array2<F>, labels: &[usize]) -> Result<(f64, Array2<F>)> {
    let (b, n) = logits.dim();
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    let mut grad = Array2::<F>::zeros((b, n));
    let mut total = 0.0;
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        if y >= n {
            return Err(Error::Label { label: y, num_classes: n });
        }
        let row = row.as_slice().expect("row-major logits");
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite logits".into()));
        }
        let p = softmax_row(row);
        total += -(p[y].max(EPS)).ln();
        let scale = 1.0 / b as f64;
        for (j, &pj) in p.iter().enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad[[i, j]] = F::from_f64((pj - onehot) * scale);
        }
    }
    Ok((total / b as f64, grad))
}

/// `KL(p_t || p_s) = Σ p_t ln(p_t / p_s)` with ε-floored logarithms,
/// clamped at zero (the floor can otherwise leak ~Nε below).
pub fn kl_divergence<F: Elem>(p_t: &Array1<F>, p_s: &Array1<F>) -> Result<f64> {
    if p_t.len() != p_s.len() {
        return Err(Error::Shape(format!(
            "distribution sizes differ: {} vs {}",
            p_t.len(),
            p_s.len()
        )));
    }
    let mut kl = 0.0;
    for (&t, &s) in p_t.iter().zip(p_s.iter()) {
        let t = t.as_f64();
        if t > 0.0 {
            kl += t * ((t.max(EPS)).ln() - (s.as_f64().max(EPS)).ln());
        }
    }
    Ok(kl.max(0.0))
}

/// Split a logit vector into L2 magnitude and unit direction;
/// `magnitude * direction` reconstructs the input (ε guard at zero).
pub fn decompose_logits<F: Elem>(z: &Array1<F>) -> LogitDecomposition<F> {
    let mag = z.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    let denom = F::from_f64(mag.max(EPS));
    LogitDecomposition {
        magnitude: F::from_f64(mag),
        direction: z.mapv(|v| v / denom),
    }
}

fn klminus_row<F: Elem>(zt: &[F], zs: &[F]) -> f64 {
    let dir = |z: &[F]| -> Vec<F> {
        let mag = z.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt().max(EPS);
        z.iter().map(|&v| F::from_f64(v.as_f64() / mag)).collect()
    };
    let pt = softmax_row(&dir(zt));
    let ps = softmax_row(&dir(zs));
    let mut kl = 0.0;
    for (&t, &s) in pt.iter().zip(&ps) {
        if t > 0.0 {
            kl += t * ((t.max(EPS)).ln() - (s.max(EPS)).ln());
        }
    }
    kl.max(0.0)
}

/// Direction-only KL, averaged over the batch (rows decomposed independently).
pub fn kl_minus<F: Elem>(z_t: &Array2<F>, z_s: &Array2<F>) -> Result<f64> {
    if z_t.dim() != z_s.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", z_t.dim(), z_s.dim())));
    }
    let b = z_t.dim().0;
    let mut total = 0.0;
    for (rt, rs) in z_t.rows().into_iter().zip(z_s.rows()) {
        total += klminus_row(rt.as_slice().unwrap(), rs.as_slice().unwrap());
    }
    Ok(total / b as f64)
}

/// Plain KL between row softmaxes, averaged over the batch.
pub fn kl_batch<F: Elem>(z_t: &Array2<F>, z_s: &Array2<F>) -> Result<f64> {
    if z_t.dim() != z_s.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", z_t.dim(), z_s.dim())));
    }
    let b = z_t.dim().0;
    let mut total = 0.0;
    for (rt, rs) in z_t.rows().into_iter().zip(z_s.rows()) {
        let pt = softmax_row(rt.as_slice().unwrap());
        let ps = softmax_row(rs.as_slice().unwrap());
        let mut kl = 0.0;
        for (&t, &s) in pt.iter().zip(&ps) {
            if t > 0.0 {
                kl += t * ((t.max(EPS)).ln() - (s.max(EPS)).ln());
            }
        }
        total += kl.max(0.0);
    }
    Ok(total / b as f64)
}

/// Batch-mean KL value and its gradient with respect to the student logits.
/// The teacher is a constant.
pub fn kl_grad_student<F: Elem>(z_t: &Array2<F>, z_s: &Array2<F>) -> Result<(f64, Array2<F>)> {
    if z_t.dim() != z_s.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", z_t.dim(), z_s.dim())));
    }
    let (b, n) = z_s.dim();
    let value = kl_batch(z_t, z_s)?;
    let mut grad = Array2::<F>::zeros((b, n));
    let scale = 1.0 / b as f64;
    for (i, (rt, rs)) in z_t.rows().into_iter().zip(z_s.rows()).enumerate() {
        let pt = softmax_row(rt.as_slice().unwrap());
        let ps = softmax_row(rs.as_slice().unwrap());
        for j in 0..n {
            grad[[i, j]] = F::from_f64((ps[j] - pt[j]) * scale);
        }
    }
    Ok((value, grad))
}

/// Direction-only KL value and its student-branch gradient. The gradient of
/// the unit direction contributes the tangent-space projection
/// `(g - (g·Ẑ)Ẑ) / ||Z||`.
pub fn kl_minus_grad_student<F: Elem>(z_t: &Array2<F>, z_s: &Array2<F>) -> Result<(f64, Array2<F>)> {
    if z_t.dim() != z_s.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", z_t.dim(), z_s.dim())));
    }
    let (b, n) = z_s.dim();
    let value = kl_minus(z_t, z_s)?;
    let mut grad = Array2::<F>::zeros((b, n));
    let scale = 1.0 / b as f64;
    for (i, (rt, rs)) in z_t.rows().into_iter().zip(z_s.rows()).enumerate() {
        let rt = rt.as_slice().unwrap();
        let rs = rs.as_slice().unwrap();
        let mag_t = rt.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt().max(EPS);
        let mag_s = rs.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt().max(EPS);
        let dt: Vec<F> = rt.iter().map(|&v| F::from_f64(v.as_f64() / mag_t)).collect();
        let ds: Vec<F> = rs.iter().map(|&v| F::from_f64(v.as_f64() / mag_s)).collect();
        let pt = softmax_row(&dt);
        let ps = softmax_row(&ds);
        // g = dKL/dẐ_s
        let g: Vec<f64> = (0..n).map(|j| ps[j] - pt[j]).collect();
        let gdot: f64 = g.iter().zip(&ds).map(|(gj, dj)| gj * dj.as_f64()).sum();
        for j in 0..n {
            let v = (g[j] - gdot * ds[j].as_f64()) / mag_s;
            grad[[i, j]] = F::from_f64(v * scale);
        }
    }
    Ok((value, grad))
}

/// Total stimulative objective: `CE(Z_m, y) + λ · mean_k KL_variant(Z_m, Z_k)`.
/// With no subnetworks this degrades to plain cross entropy.
pub fn stimulative_loss<F: Elem>(
    z_m: &Array2<F>,
    labels: &[usize],
    z_subs: &[Array2<F>],
    lambda: f64,
    variant: LossVariant,
) -> Result<LossReport> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("loss.lambda: must be >= 0, got {lambda}")));
    }
    let ce = cross_entropy(z_m, labels)?;
    let mut kl_terms = Vec::with_capacity(z_subs.len());
    for z_s in z_subs {
        let kl = match variant {
            LossVariant::Kl => kl_batch(z_m, z_s)?,
            LossVariant::KlMinus => kl_minus(z_m, z_s)?,
        };
        kl_terms.push(kl);
    }
    let mean_kl = if kl_terms.is_empty() {
        0.0
    } else {
        kl_terms.iter().sum::<f64>() / kl_terms.len() as f64
    };
    Ok(LossReport { ce, total: ce + lambda * mean_kl, kl_terms, lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    use crate::rng::{stream, Stream};

    fn simplex(rng: &mut impl Rng, n: usize) -> Array1<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        Array1::from(v)
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let p = softmax(&array![0.0f64, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);

        let p = softmax(&array![1000.0f64, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(p[0] > 1.0 - 1e-12 && p[1] < 1e-12);

        // direct evaluation oracle for (1,2,3)
        let z = [1.0f64, 2.0, 3.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = z.iter().map(|v| v.exp() / denom).collect();
        let p = softmax(&Array1::from(z.to_vec())).unwrap();
        for (a, b) in p.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }

        assert!(softmax(&array![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn cross_entropy_frozen_values() {
        // perfectly confident prediction
        let z = array![[50.0f64, -50.0]];
        assert!(cross_entropy(&z, &[0]).unwrap() < 1e-12);

        // uniform over 10 classes
        let z = Array2::<f64>::zeros((3, 10));
        let ce = cross_entropy(&z, &[0, 5, 9]).unwrap();
        assert!((ce - 10.0f64.ln()).abs() < 1e-12, "{ce}");

        // direct evaluation: Z=(1,2), y=1 -> ln(1+e^-1)
        let z = array![[1.0f64, 2.0]];
        let ce = cross_entropy(&z, &[1]).unwrap();
        assert!((ce - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);

        assert!(matches!(
            cross_entropy(&z, &[2]).unwrap_err(),
            Error::Label { label: 2, num_classes: 2 }
        ));
    }

    #[test]
    fn kl_frozen_value_and_properties() {
        let p = array![0.5f64, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);

        let q = array![0.9f64, 0.1];
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_divergence(&p, &q).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.510826).abs() < 1e-6);

        let mut rng = stream(3, Stream::Probe, 0, 0);
        for _ in 0..1000 {
            let n = rng.random_range(2..8);
            let a = simplex(&mut rng, n);
            let b = simplex(&mut rng, n);
            assert!(kl_divergence(&a, &b).unwrap() >= 0.0);
        }

        assert!(kl_divergence(&p, &array![1.0f64]).is_err());
    }

    #[test]
    fn decomposition_reconstructs() {
        let d = decompose_logits(&array![3.0f64, 4.0]);
        assert!((d.magnitude - 5.0).abs() < 1e-12);
        assert!((d.direction[0] - 0.6).abs() < 1e-12 && (d.direction[1] - 0.8).abs() < 1e-12);

        let z = array![0.0f64, 0.0];
        let d = decompose_logits(&z);
        assert_eq!(d.magnitude, 0.0);
        let recon = d.direction.mapv(|v| v * d.magnitude);
        assert!(recon.iter().zip(z.iter()).all(|(a, b)| (a - b).abs() == 0.0));

        let mut rng = stream(4, Stream::Probe, 0, 0);
        for _ in 0..200 {
            let n = rng.random_range(2..12);
            let z: Array1<f64> = Array1::from_iter((0..n).map(|_| rng.random_range(-5.0..5.0)));
            let d = decompose_logits(&z);
            let err = z
                .iter()
                .zip(d.direction.iter())
                .map(|(&zi, &di)| (zi - d.magnitude * di).abs())
                .fold(0.0f64, f64::max);
            assert!(err < 1e-6);
            if d.magnitude > 0.0 {
                let norm: f64 = d.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn kl_minus_frozen_value_and_invariance() {
        let zt = array![[3.0f64, 4.0]];
        let zs = array![[4.0f64, 3.0]];
        let v = kl_minus(&zt, &zs).unwrap();
        assert!((v - 0.019934).abs() < 1e-6, "{v}");

        assert_eq!(kl_minus(&zt, &zt).unwrap(), 0.0);

        let mut rng = stream(5, Stream::Probe, 0, 0);
        for _ in 0..1000 {
            let n = rng.random_range(2..8);
            let zt = Array2::from_shape_fn((1, n), |_| rng.random_range(-4.0..4.0));
            let zs = Array2::from_shape_fn((1, n), |_| rng.random_range(-4.0..4.0));
            let c: f64 = rng.random_range(0.01..100.0);
            let base = kl_minus(&zt, &zs).unwrap();
            let scaled_t = kl_minus(&zt.mapv(|v| v * c), &zs).unwrap();
            let scaled_s = kl_minus(&zt, &zs.mapv(|v| v * c)).unwrap();
            assert!((scaled_t - base).abs() < 1e-9);
            assert!((scaled_s - base).abs() < 1e-9);
        }
    }

    #[test]
    fn direction_softmax_preserves_argmax() {
        let mut rng = stream(6, Stream::Probe, 0, 0);
        for _ in 0..500 {
            let n = rng.random_range(2..10);
            let z = Array1::from_iter((0..n).map(|_| rng.random_range(-6.0f64..6.0)));
            if z.iter().all(|&v| v == 0.0) {
                continue;
            }
            let d = decompose_logits(&z);
            let p = softmax(&d.direction).unwrap();
            let am_z = z.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            let am_p = p.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            assert_eq!(am_z, am_p);
        }
    }

    #[test]
    fn stimulative_loss_composition() {
        let zm = array![[1.0f64, 2.0, 0.5], [0.0, -1.0, 3.0]];
        let labels = [1usize, 2];

        // no subnets -> plain CE
        let r = stimulative_loss(&zm, &labels, &[], 1.0, LossVariant::KlMinus).unwrap();
        assert_eq!(r.total, r.ce);
        assert!(r.kl_terms.is_empty());

        // one subnet equal to the main -> zero KL term
        let r = stimulative_loss(&zm, &labels, &[zm.clone()], 1.0, LossVariant::Kl).unwrap();
        assert_eq!(r.kl_terms, vec![0.0]);
        assert_eq!(r.total, r.ce);

        // two hand-built subnets: total == CE + mean of the two KL- values
        let z1 = array![[2.0f64, 1.0, 0.0], [1.0, 0.0, 2.0]];
        let z2 = array![[0.5f64, 0.5, 1.5], [-1.0, 1.0, 1.0]];
        let k1 = kl_minus(&zm, &z1).unwrap();
        let k2 = kl_minus(&zm, &z2).unwrap();
        let r = stimulative_loss(&zm, &labels, &[z1, z2], 1.0, LossVariant::KlMinus).unwrap();
        let expect = r.ce + 0.5 * (k1 + k2);
        assert!((r.total - expect).abs() < 1e-12);
        assert!((r.total - (r.ce + r.lambda * r.mean_kl())).abs() < 1e-6);
    }
}
