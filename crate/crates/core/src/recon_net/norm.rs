//! Instance normalization and the anatomy-specific affine bank.

use crate::error::{Error, Result};
use crate::recon_net::Activation;
use crate::scalar::Real;

/// Per-channel normalized activations and inverse standard deviations.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// `xhat = (z - μ) / sqrt(σ² + eps)` per channel, biased variance over H×W.
pub(crate) fn normalize<T: Real>(z: &[T], channels: usize, hw: usize, eps: f64) -> NormCache<T> {
    let mut xhat = vec![T::zero(); channels * hw];
    let mut inv_std = vec![T::zero(); channels];
    let n = T::of(hw as f64);
    for c in 0..channels {
        let src = &z[c * hw..(c + 1) * hw];
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::of(eps)).sqrt();
        inv_std[c] = inv;
        for (d, &s) in xhat[c * hw..(c + 1) * hw].iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
    }
    NormCache { xhat, inv_std }
}

pub(crate) fn affine<T: Real>(cache: &NormCache<T>, gamma: &[T], beta: &[T], hw: usize) -> Vec<T> {
    let mut out = cache.xhat.clone();
    for ((row, &g), &b) in out.chunks_exact_mut(hw).zip(gamma).zip(beta) {
        row.iter_mut().for_each(|v| *v = g * *v + b);
    }
    out
}

/// Backward of `γ·xhat + β`: returns `dz` and accumulates `dγ`, `dβ`.
pub(crate) fn affine_norm_backward<T: Real>(
    grad_out: &[T],
    cache: &NormCache<T>,
    gamma: &[T],
    hw: usize,
    mut grad_gamma: Option<&mut [T]>,
    mut grad_beta: Option<&mut [T]>,
) -> Vec<T> {
    let channels = gamma.len();
    let n = T::of(hw as f64);
    let mut dz = vec![T::zero(); channels * hw];
    for c in 0..channels {
        let dy = &grad_out[c * hw..(c + 1) * hw];
        let xh = &cache.xhat[c * hw..(c + 1) * hw];
        let sum_dy = dy.iter().copied().sum::<T>();
        let sum_dy_xh = dy.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        if let Some(g) = grad_gamma.as_deref_mut() {
            g[c] += sum_dy_xh;
        }
        if let Some(b) = grad_beta.as_deref_mut() {
            b[c] += sum_dy;
        }
        // dxhat = γ·dy; dz = inv/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
        let g = gamma[c];
        let k = cache.inv_std[c] / n;
        for ((d, &a), &x) in dz[c * hw..(c + 1) * hw].iter_mut().zip(dy).zip(xh) {
            *d = k * g * (n * a - sum_dy - x * sum_dy_xh);
        }
    }
    dz
}

fn check_affine<T: Real>(h: &Activation<T>, gamma: &[T], beta: &[T], eps: f64) -> Result<()> {
    if gamma.len() != h.channels() || beta.len() != h.channels() {
        return Err(Error::Shape(format!(
            "{} channels but gamma/beta have {}/{}",
            h.channels(),
            gamma.len(),
            beta.len()
        )));
    }
    if h.height() * h.width() == 0 {
        return Err(Error::Shape("empty spatial extent".into()));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    Ok(())
}

/// `γ[c]·(h_c − μ(h_c))/sqrt(σ²(h_c) + eps) + β[c]` for every channel.
pub fn instance_norm<T: Real>(h: &Activation<T>, gamma: &[T], beta: &[T], eps: f64) -> Result<Activation<T>> {
    check_affine(h, gamma, beta, eps)?;
    let hw = h.height() * h.width();
    let cache = normalize(h.data(), h.channels(), hw, eps);
    Activation::new(h.channels(), h.height(), h.width(), affine(&cache, gamma, beta, hw))
}

/// Gradients of `Σ grad_out ⊙ instance_norm(h)` w.r.t. `(h, γ, β)`.
pub fn instance_norm_backward<T: Real>(
    h: &Activation<T>,
    gamma: &[T],
    eps: f64,
    grad_out: &Activation<T>,
) -> Result<(Activation<T>, Vec<T>, Vec<T>)> {
    check_affine(h, gamma, gamma, eps)?;
    if grad_out.shape() != h.shape() {
        return Err(Error::Shape(format!(
            "gradient shape {:?} vs activation {:?}",
            grad_out.shape(),
            h.shape()
        )));
    }
    let hw = h.height() * h.width();
    let cache = normalize(h.data(), h.channels(), hw, eps);
    let mut gg = vec![T::zero(); h.channels()];
    let mut gb = vec![T::zero(); h.channels()];
    let dz = affine_norm_backward(grad_out.data(), &cache, gamma, hw, Some(&mut gg), Some(&mut gb));
    Ok((Activation::new(h.channels(), h.height(), h.width(), dz)?, gg, gb))
}

/// Per-anatomy affine pairs for every normalization site, over shared
/// instance statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct AspinBank<T = f32> {
    features: usize,
    sites: usize,
    registry: Vec<String>,
    gammas: Vec<Vec<T>>,
    betas: Vec<Vec<T>>,
}

impl<T: Real> AspinBank<T> {
    pub(crate) fn new(features: usize, sites: usize) -> Self {
        AspinBank {
            features,
            sites,
            registry: Vec::new(),
            gammas: Vec::new(),
            betas: Vec::new(),
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn registry(&self) -> &[String] {
        &self.registry
    }

    pub fn len(&self) -> usize {
        self.registry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.registry.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.registry
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownAnatomy(name.to_string()))
    }

    pub fn parameters_per_anatomy(&self) -> usize {
        2 * self.sites * self.features
    }

    /// Registers `name` with γ = 1, β = 0 at every site.
    pub(crate) fn push(&mut self, name: &str) -> Result<usize> {
        if self.registry.iter().any(|n| n == name) {
            return Err(Error::DuplicateAnatomy(name.to_string()));
        }
        self.registry.push(name.to_string());
        self.gammas.push(vec![T::one(); self.sites * self.features]);
        self.betas.push(vec![T::zero(); self.sites * self.features]);
        Ok(self.registry.len() - 1)
    }

    fn check(&self, anatomy: usize, site: usize) -> Result<()> {
        if anatomy >= self.registry.len() {
            return Err(Error::UnknownAnatomy(format!("#{anatomy}")));
        }
        if site >= self.sites {
            return Err(Error::InvalidArgument(format!(
                "site {site} out of range ({} sites)",
                self.sites
            )));
        }
        Ok(())
    }

    pub fn gamma(&self, anatomy: usize, site: usize) -> Result<&[T]> {
        self.check(anatomy, site)?;
        Ok(&self.gammas[anatomy][site * self.features..(site + 1) * self.features])
    }

    pub fn beta(&self, anatomy: usize, site: usize) -> Result<&[T]> {
        self.check(anatomy, site)?;
        Ok(&self.betas[anatomy][site * self.features..(site + 1) * self.features])
    }

    pub fn gamma_mut(&mut self, anatomy: usize, site: usize) -> Result<&mut [T]> {
        self.check(anatomy, site)?;
        let f = self.features;
        Ok(&mut self.gammas[anatomy][site * f..(site + 1) * f])
    }

    pub fn beta_mut(&mut self, anatomy: usize, site: usize) -> Result<&mut [T]> {
        self.check(anatomy, site)?;
        let f = self.features;
        Ok(&mut self.betas[anatomy][site * f..(site + 1) * f])
    }

    pub(crate) fn gammas(&self) -> &[Vec<T>] {
        &self.gammas
    }

    pub(crate) fn betas(&self) -> &[Vec<T>] {
        &self.betas
    }

    pub(crate) fn gammas_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.gammas
    }

    pub(crate) fn betas_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.betas
    }

    pub(crate) fn cast<U: Real>(&self) -> AspinBank<U> {
        let conv = |v: &Vec<Vec<T>>| -> Vec<Vec<U>> {
            v.iter().map(|s| s.iter().map(|x| U::of(x.as_f64())).collect()).collect()
        };
        AspinBank {
            features: self.features,
            sites: self.sites,
            registry: self.registry.clone(),
            gammas: conv(&self.gammas),
            betas: conv(&self.betas),
        }
    }
}

/// Normalizes `h` with shared statistics and applies the affine pair of
/// `anatomy` at `site`.
pub fn aspin_forward<T: Real>(
    h: &Activation<T>,
    site: usize,
    anatomy: usize,
    bank: &AspinBank<T>,
    eps: f64,
) -> Result<Activation<T>> {
    let gamma = bank.gamma(anatomy, site)?;
    let beta = bank.beta(anatomy, site)?;
    instance_norm(h, gamma, beta, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Activation<f64> {
        Activation::new(c, h, w, (0..c * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn hand_computed_two_by_two() {
        let h = act(1, 2, 2, |i| [1.0, 3.0, 1.0, 3.0][i]);
        let out = instance_norm(&h, &[1.0], &[0.0], 1e-12).unwrap();
        for (o, e) in out.data().iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((o - e).abs() < 1e-9);
        }
    }

    #[test]
    fn output_is_standardized() {
        let h = act(3, 5, 6, |i| ((i * 7919) % 101) as f64 * 0.3 - 4.0);
        let out = instance_norm(&h, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        for ch in out.data().chunks_exact(30) {
            let m = ch.iter().sum::<f64>() / 30.0;
            let v = ch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 30.0;
            assert!(m.abs() < 1e-4);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_channel_yields_beta() {
        let h = act(1, 3, 3, |_| 2.5);
        let out = instance_norm(&h, &[1.0], &[5.0], 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn shape_errors() {
        let h = act(2, 2, 2, |i| i as f64);
        assert!(instance_norm(&h, &[1.0], &[0.0, 0.0], 1e-5).is_err());
        assert!(instance_norm(&h, &[1.0, 1.0], &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn bank_rules() {
        let mut bank = AspinBank::<f64>::new(4, 2);
        assert_eq!(bank.push("a").unwrap(), 0);
        assert_eq!(bank.push("b").unwrap(), 1);
        assert!(matches!(bank.push("a"), Err(Error::DuplicateAnatomy(_))));
        assert_eq!(bank.parameters_per_anatomy(), 16);
        assert!(bank.gamma(0, 1).unwrap().iter().all(|&g| g == 1.0));
        assert!(bank.beta(1, 0).unwrap().iter().all(|&b| b == 0.0));
        assert!(matches!(bank.gamma(2, 0), Err(Error::UnknownAnatomy(_))));
        assert!(bank.gamma(0, 2).is_err());
        assert!(matches!(bank.index_of("zzz"), Err(Error::UnknownAnatomy(_))));
    }

    #[test]
    fn aspin_isolation_and_beta_offset() {
        let h = act(4, 3, 3, |i| (i as f64 * 0.77).sin());
        let mut bank = AspinBank::<f64>::new(4, 1);
        bank.push("a").unwrap();
        bank.push("b").unwrap();
        let plain = instance_norm(&h, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        for a in 0..2 {
            assert_eq!(aspin_forward(&h, 0, a, &bank, 1e-5).unwrap(), plain);
        }
        let before_a = aspin_forward(&h, 0, 0, &bank, 1e-5).unwrap();
        bank.beta_mut(1, 0).unwrap().copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        bank.gamma_mut(1, 0).unwrap()[2] = 3.0;
        assert_eq!(aspin_forward(&h, 0, 0, &bank, 1e-5).unwrap(), before_a);
        bank.gamma_mut(1, 0).unwrap()[2] = 1.0;
        let out_b = aspin_forward(&h, 0, 1, &bank, 1e-5).unwrap();
        let betas = [0.5, -1.0, 2.0, 0.0];
        for (c, (rb, ra)) in out_b.data().chunks(9).zip(before_a.data().chunks(9)).enumerate() {
            for (x, y) in rb.iter().zip(ra) {
                assert!((x - y - betas[c]).abs() < 1e-12);
            }
        }
        assert!(aspin_forward(&h, 0, 2, &bank, 1e-5).is_err());
    }
}
