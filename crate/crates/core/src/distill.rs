//! Spatial attention maps and the attention-transfer loss.
//!
//! For an activation `h` (C×H×W) the attention map is `O = Σ_c h_c²`. The
//! per-cascade loss compares L2-normalized teacher and student maps under
//! the L1 norm; the total loss sums over cascades.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recon_net::Activation;
use crate::scalar::Real;

/// Norms below this are treated as a zero map.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T = f64> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> AttentionMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::Shape(format!(
                "{height}x{width} attention map with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::InvalidArgument("attention maps are finite and nonnegative".into()));
        }
        Ok(AttentionMap { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

pub fn attention_map<T: Real>(h: &Activation<T>) -> Result<AttentionMap<T>> {
    let hw = h.height() * h.width();
    if h.channels() == 0 || hw == 0 {
        return Err(Error::Shape("empty activation".into()));
    }
    let mut o = vec![T::zero(); hw];
    for ch in h.data().chunks_exact(hw) {
        o.iter_mut().zip(ch).for_each(|(o, &v)| *o += v * v);
    }
    Ok(AttentionMap {
        height: h.height(),
        width: h.width(),
        data: o,
    })
}

/// Which L2 normalization is applied to a map before the L1 comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AtNorm {
    /// One norm over the whole flattened map.
    #[default]
    Flattened,
    /// Each row divided by its own L2 norm.
    PerRow,
}

/// Unit vectors per normalization group plus the norms used.
fn normalize<T: Real>(o: &[T], width: usize, norm: AtNorm) -> (Vec<T>, Vec<T>) {
    let group = match norm {
        AtNorm::Flattened => o.len(),
        AtNorm::PerRow => width,
    };
    let mut u = vec![T::zero(); o.len()];
    let mut norms = Vec::with_capacity(o.len() / group);
    for (src, dst) in o.chunks_exact(group).zip(u.chunks_exact_mut(group)) {
        let n = src.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n.as_f64() > NORM_FLOOR {
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s / n);
        } else {
            log::debug!("degenerate attention map (norm {:e}); normalized to zero", n.as_f64());
        }
        norms.push(n);
    }
    (u, norms)
}

fn check_maps<T: Real>(a: &AttentionMap<T>, b: &AttentionMap<T>) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "attention maps {}x{} and {}x{} differ",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

pub fn at_loss_cascade<T: Real>(teacher: &AttentionMap<T>, student: &AttentionMap<T>) -> Result<T> {
    at_loss_cascade_with(teacher, student, AtNorm::Flattened)
}

pub fn at_loss_cascade_with<T: Real>(
    teacher: &AttentionMap<T>,
    student: &AttentionMap<T>,
    norm: AtNorm,
) -> Result<T> {
    check_maps(teacher, student)?;
    let (v, _) = normalize(&teacher.data, teacher.width, norm);
    let (u, _) = normalize(&student.data, student.width, norm);
    Ok(u.iter().zip(&v).map(|(&a, &b)| (a - b).abs()).sum())
}

/// Loss of one cascade and its gradient with respect to the student
/// activation (same layout as `student`). The teacher is a constant.
pub fn at_loss_grad<T: Real>(
    teacher: &Activation<T>,
    student: &Activation<T>,
    norm: AtNorm,
) -> Result<(T, Vec<T>)> {
    if (teacher.height(), teacher.width()) != (student.height(), student.width()) {
        return Err(Error::Shape(format!(
            "teacher trace {:?} and student trace {:?} differ spatially",
            teacher.shape(),
            student.shape()
        )));
    }
    let ot = attention_map(teacher)?;
    let os = attention_map(student)?;
    let w = os.width;
    let (v, _) = normalize(&ot.data, w, norm);
    let (u, norms) = normalize(&os.data, w, norm);
    let s: Vec<T> = u
        .iter()
        .zip(&v)
        .map(|(&a, &b)| {
            let d = a - b;
            if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let loss = u.iter().zip(&v).map(|(&a, &b)| (a - b).abs()).sum();

    // dL/dO = (s - u (u·s)) / ‖O‖ within each normalization group
    let group = u.len() / norms.len();
    let mut d_o = vec![T::zero(); u.len()];
    for (g, &n) in norms.iter().enumerate() {
        if n.as_f64() <= NORM_FLOOR {
            continue;
        }
        let r = g * group..(g + 1) * group;
        let us: T = u[r.clone()].iter().zip(&s[r.clone()]).map(|(&a, &b)| a * b).sum();
        for i in r {
            d_o[i] = (s[i] - u[i] * us) / n;
        }
    }
    let hw = d_o.len();
    let two = T::of(2.0);
    let grad = student
        .data()
        .iter()
        .enumerate()
        .map(|(i, &h)| two * h * d_o[i % hw])
        .collect();
    Ok((loss, grad))
}

/// Teacher and student traces of one cascade.
#[derive(Clone, Debug)]
pub struct DistillPair<'a, T: Real> {
    pub cascade: usize,
    pub teacher: &'a Activation<T>,
    pub student: &'a Activation<T>,
}

/// Sum of per-cascade losses; requires exactly one pair per cascade.
pub fn total_at_loss<T: Real>(pairs: &[DistillPair<'_, T>], cascades: usize, norm: AtNorm) -> Result<T> {
    let mut seen = vec![false; cascades];
    let mut total = T::zero();
    for p in pairs {
        let slot = seen
            .get_mut(p.cascade)
            .ok_or_else(|| Error::InvalidArgument(format!("cascade {} out of range", p.cascade)))?;
        if *slot {
            return Err(Error::InvalidArgument(format!("cascade {} paired twice", p.cascade)));
        }
        *slot = true;
        let ot = attention_map(p.teacher)?;
        let os = attention_map(p.student)?;
        total += at_loss_cascade_with(&ot, &os, norm)?;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidArgument(format!("no distillation pair for cascade {missing}")));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[f64]) -> AttentionMap<f64> {
        AttentionMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn two_channel_fixture() {
        let h = Activation::new(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(attention_map(&h).unwrap().data(), &[2.0, 4.0, 9.0, 17.0]);
    }

    #[test]
    fn disjoint_unit_maps_give_two() {
        let a = map(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = map(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!((at_loss_cascade(&a, &b).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_map_normalizes_to_zero() {
        let z = map(2, 2, &[0.0; 4]);
        let a = map(2, 2, &[0.0, 3.0, 4.0, 0.0]);
        assert!((at_loss_cascade(&z, &a).unwrap() - 1.4).abs() < 1e-12);
        assert_eq!(at_loss_cascade(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn per_row_normalization() {
        let a = map(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = map(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        assert!((at_loss_cascade_with(&a, &b, AtNorm::PerRow).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_maps_error() {
        let a = map(2, 2, &[1.0; 4]);
        let b = map(1, 4, &[1.0; 4]);
        assert!(at_loss_cascade(&a, &b).is_err());
        assert!(AttentionMap::new(1, 2, vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn total_requires_every_cascade_once() {
        let h = Activation::<f64>::new(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let g = Activation::new(1, 2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let pairs: Vec<_> = (0..5)
            .map(|c| DistillPair {
                cascade: c,
                teacher: &h,
                student: &g,
            })
            .collect();
        assert!((total_at_loss(&pairs, 5, AtNorm::Flattened).unwrap() - 10.0).abs() < 1e-12);
        assert!(total_at_loss(&pairs[..4], 5, AtNorm::Flattened).is_err());
        let mut dup = pairs.clone();
        dup[4].cascade = 0;
        assert!(total_at_loss(&dup, 5, AtNorm::Flattened).is_err());
    }
}
