//! Circular-harmonic filter bases and phase steering.
//!
//! An atom is `ψ_jk(r, φ) = τ_j(r) e^{ikφ}` sampled on an `S × S` grid, with
//! `τ_j` a Gaussian ring around radius `r_j`. Rotating an atom
//! counter-clockwise by `θ` multiplies it by `e^{−ikθ}`, so a filter written
//! as `Σ w_jk ψ_jk` is steered by re-phasing its coefficients.
//!
//! Grid angles are measured counter-clockwise from the +x axis with y
//! pointing up (rows grow downwards), which makes the phase rule agree with
//! [`crate::tensor::rotate`].

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_mismatch, Result};
use crate::tensor::{wrap_angle, ComplexTensor, Tensor};

pub const DEFAULT_SIGMA: f64 = 0.6;

/// Radial part of the basis: Gaussian rings `exp(−(r − r_j)² / 2σ²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    ring_centers: Vec<f64>,
    sigma: f64,
}

impl RadialProfile {
    pub fn new(ring_centers: Vec<f64>, sigma: f64) -> Result<Self> {
        if ring_centers.first() != Some(&0.0) {
            return invalid("first ring must be centered at r = 0");
        }
        if ring_centers.windows(2).any(|p| p[1] <= p[0]) {
            return invalid("ring centers must be strictly increasing");
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return invalid(format!("ring width must be positive, got {sigma}"));
        }
        Ok(Self {
            ring_centers,
            sigma,
        })
    }

    /// Rings at `r = 0, 1, …, (S − 1) / 2` with `σ = 0.6`.
    pub fn for_kernel(size: usize) -> Self {
        let rings = (0..=size / 2).map(|j| j as f64).collect();
        Self::new(rings, DEFAULT_SIGMA).expect("valid default profile")
    }

    pub fn ring_centers(&self) -> &[f64] {
        &self.ring_centers
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn rings(&self) -> usize {
        self.ring_centers.len()
    }

    pub fn tau(&self, ring: usize, r: f64) -> f64 {
        let d = r - self.ring_centers[ring];
        (-d * d / (2.0 * self.sigma * self.sigma)).exp()
    }
}

#[derive(Clone, Debug)]
pub struct HarmonicAtom {
    /// Zero-based ring index.
    pub ring: usize,
    pub freq: u32,
    /// Unit-norm complex grid `[S, S]`.
    pub grid: ComplexTensor,
}

/// Highest angular frequency the cyclic group of order `group_order` can
/// represent without aliasing. The trivial group has no such limit.
pub fn group_frequency_cap(group_order: usize) -> Option<u32> {
    (group_order > 1).then(|| ((group_order - 1) / 2) as u32)
}

#[derive(Clone, Debug)]
pub struct SteerableBasis {
    size: usize,
    profile: RadialProfile,
    max_freq: Vec<u32>,
    group_order: usize,
    atoms: Vec<HarmonicAtom>,
}

impl SteerableBasis {
    pub fn new(size: usize, profile: RadialProfile, group_order: usize) -> Result<Self> {
        if size % 2 == 0 {
            return invalid(format!("kernel size must be odd, got {size}"));
        }
        if group_order < 1 {
            return invalid("group order must be at least 1");
        }
        let cap = group_frequency_cap(group_order);
        let max_freq: Vec<u32> = profile
            .ring_centers()
            .iter()
            .enumerate()
            .map(|(j, &r)| {
                if j == 0 {
                    return 0;
                }
                let nyquist = (PI * r).floor() as u32;
                cap.map_or(nyquist, |c| nyquist.min(c))
            })
            .collect();
        let mut basis = Self {
            size,
            profile,
            max_freq,
            group_order,
            atoms: Vec::new(),
        };
        let mut atoms = Vec::new();
        for (ring, &kmax) in basis.max_freq.iter().enumerate() {
            for freq in 0..=kmax {
                atoms.push(basis.sample_atom(ring, freq)?);
            }
        }
        basis.atoms = atoms;
        Ok(basis)
    }

    /// Default basis for an `S × S` kernel serving a group of order `Λ`.
    pub fn for_kernel(size: usize, group_order: usize) -> Result<Self> {
        Self::new(size, RadialProfile::for_kernel(size), group_order)
    }

    fn edge_mask(&self, ring: usize, r: f64) -> f64 {
        let edge = (self.size - 1) as f64 / 2.0;
        if self.profile.ring_centers()[ring] < edge - 1.0 || r <= edge {
            return 1.0;
        }
        let d = r - edge;
        (-d * d / (2.0 * self.profile.sigma() * self.profile.sigma())).exp()
    }

    /// Un-normalized atom value at offset `(dx, dy)` from the kernel center
    /// (x right, y up).
    pub fn atom_value(&self, ring: usize, freq: u32, dx: f64, dy: f64) -> Complex64 {
        let r = dx.hypot(dy);
        if freq > 0 && r == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let amp = self.profile.tau(ring, r) * self.edge_mask(ring, r);
        let phi = dy.atan2(dx);
        if freq == 0 {
            Complex64::new(amp, 0.0)
        } else {
            Complex64::from_polar(amp, freq as f64 * phi)
        }
    }

    fn sample_atom(&self, ring: usize, freq: u32) -> Result<HarmonicAtom> {
        let s = self.size;
        let c = (s / 2) as f64;
        let mut data = Vec::with_capacity(s * s);
        for row in 0..s {
            for col in 0..s {
                data.push(self.atom_value(ring, freq, col as f64 - c, c - row as f64));
            }
        }
        let norm = data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return invalid(format!("atom (ring {ring}, k {freq}) vanishes on the grid"));
        }
        data.iter_mut().for_each(|z| *z /= norm);
        Ok(HarmonicAtom {
            ring,
            freq,
            grid: ComplexTensor::new(vec![s, s], data)?,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn profile(&self) -> &RadialProfile {
        &self.profile
    }

    pub fn max_freq(&self) -> &[u32] {
        &self.max_freq
    }

    pub fn group_order(&self) -> usize {
        self.group_order
    }

    pub fn atoms(&self) -> &[HarmonicAtom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom_index(&self, ring: usize, freq: u32) -> Option<usize> {
        self.atoms
            .iter()
            .position(|a| a.ring == ring && a.freq == freq)
    }

    /// Real degrees of freedom per (output, input, offset) triple: one for
    /// each k = 0 atom, two for every other.
    pub fn real_dof(&self) -> usize {
        self.atoms
            .iter()
            .map(|a| if a.freq == 0 { 1 } else { 2 })
            .sum()
    }

    /// Atoms multiplied by `e^{−ikθ}`, split into real and imaginary grids.
    pub fn phased(&self, theta: f64) -> PhasedAtoms {
        let theta = wrap_angle(theta);
        let s2 = self.size * self.size;
        let mut re = Vec::with_capacity(self.atoms.len() * s2);
        let mut im = Vec::with_capacity(self.atoms.len() * s2);
        for atom in &self.atoms {
            let phase = if atom.freq == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::from_polar(1.0, -(atom.freq as f64) * theta)
            };
            for z in atom.grid.data() {
                let v = phase * z;
                re.push(v.re);
                im.push(v.im);
            }
        }
        PhasedAtoms {
            size: self.size,
            re,
            im,
        }
    }

    /// Phased atoms for every group angle `2πλ/Λ`.
    pub fn phased_bank(&self) -> Vec<PhasedAtoms> {
        group_angles(self.group_order)
            .into_iter()
            .map(|t| self.phased(t))
            .collect()
    }

    /// Text manifest describing the basis.
    pub fn manifest(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "kernel_size = {}", self.size);
        let _ = writeln!(s, "rings = {}", self.profile.rings());
        let _ = writeln!(
            s,
            "ring_centers = {}",
            join(&mut self.profile.ring_centers().iter().map(|r| r.to_string()))
        );
        let _ = writeln!(s, "sigma = {}", self.profile.sigma());
        let _ = writeln!(
            s,
            "max_freq = {}",
            join(&mut self.max_freq.iter().map(|k| k.to_string()))
        );
        let _ = writeln!(s, "group_order = {}", self.group_order);
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut size = None;
        let mut centers = None;
        let mut sigma = None;
        let mut freqs: Option<Vec<u32>> = None;
        let mut order = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let Some((key, value)) = line.split_once('=') else {
                return invalid(format!("manifest line without '=': {line}"));
            };
            let value = value.trim();
            let bad = |_| crate::Error::InvalidArgument(format!("bad manifest value: {line}"));
            match key.trim() {
                "kernel_size" => size = Some(value.parse::<usize>().map_err(bad)?),
                "ring_centers" => {
                    centers = Some(
                        value
                            .split_whitespace()
                            .map(|v| v.parse::<f64>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| crate::Error::InvalidArgument(e.to_string()))?,
                    )
                }
                "sigma" => {
                    sigma = Some(
                        value
                            .parse::<f64>()
                            .map_err(|e| crate::Error::InvalidArgument(e.to_string()))?,
                    )
                }
                "max_freq" => {
                    freqs = Some(
                        value
                            .split_whitespace()
                            .map(|v| v.parse::<u32>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| crate::Error::InvalidArgument(e.to_string()))?,
                    )
                }
                "group_order" => order = Some(value.parse::<usize>().map_err(bad)?),
                "rings" => {}
                other => return invalid(format!("unknown manifest key {other}")),
            }
        }
        let (Some(size), Some(centers), Some(sigma), Some(order)) = (size, centers, sigma, order)
        else {
            return invalid("manifest is missing a required key");
        };
        let basis = Self::new(size, RadialProfile::new(centers, sigma)?, order)?;
        if let Some(f) = freqs {
            if f != basis.max_freq {
                return invalid(format!(
                    "manifest frequency caps {f:?} disagree with {:?}",
                    basis.max_freq
                ));
            }
        }
        Ok(basis)
    }
}

/// The `Λ` equidistant angles `2πλ/Λ`, starting at 0.
pub fn group_angles(order: usize) -> Vec<f64> {
    (0..order)
        .map(|l| 2.0 * PI * l as f64 / order as f64)
        .collect()
}

/// Atom grids after phase rotation, flattened as `[atom][S·S]`.
#[derive(Clone, Debug)]
pub struct PhasedAtoms {
    size: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl PhasedAtoms {
    pub fn re(&self, atom: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.re[atom * n..(atom + 1) * n]
    }

    pub fn im(&self, atom: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.im[atom * n..(atom + 1) * n]
    }

    /// `out += Re(w · phased atom)` for one atom.
    pub(crate) fn accumulate(&self, atom: usize, w: Complex64, out: &mut [f64]) {
        let (re, im) = (self.re(atom), self.im(atom));
        for ((o, &p), &q) in out.iter_mut().zip(re).zip(im) {
            *o += w.re * p - w.im * q;
        }
    }

    /// Gradient of `Re(w · phased atom)` paired with `grad`, as a complex
    /// number holding `(∂/∂Re w, ∂/∂Im w)`.
    pub(crate) fn pullback(&self, atom: usize, grad: &[f64]) -> Complex64 {
        let (re, im) = (self.re(atom), self.im(atom));
        let mut gr = 0.0;
        let mut gi = 0.0;
        for ((&g, &p), &q) in grad.iter().zip(re).zip(im) {
            gr += g * p;
            gi -= g * q;
        }
        Complex64::new(gr, gi)
    }
}

/// Complex coefficients of one layer, laid out `[out][in][offset][atom]`,
/// plus a real bias per output channel.
///
/// `offsets` is 1 for filters acting on plain images and `Λ` for filters
/// acting on group feature maps, where it indexes the relative orientation
/// between output and input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    pub offsets: usize,
    pub atoms: usize,
    pub coeffs: Vec<Complex64>,
    pub bias: Vec<f64>,
}

impl FilterWeights {
    pub fn zeros(out_channels: usize, in_channels: usize, offsets: usize, atoms: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            offsets,
            atoms,
            coeffs: vec![Complex64::new(0.0, 0.0); out_channels * in_channels * offsets * atoms],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn index(&self, out: usize, inp: usize, offset: usize, atom: usize) -> usize {
        ((out * self.in_channels + inp) * self.offsets + offset) * self.atoms + atom
    }

    pub fn coeff(&self, out: usize, inp: usize, offset: usize, atom: usize) -> Complex64 {
        self.coeffs[self.index(out, inp, offset, atom)]
    }

    pub fn coeff_mut(&mut self, out: usize, inp: usize, offset: usize, atom: usize) -> &mut Complex64 {
        let i = self.index(out, inp, offset, atom);
        &mut self.coeffs[i]
    }

    /// Zeroes the imaginary part of every k = 0 coefficient.
    pub fn project_real_dc(&mut self, basis: &SteerableBasis) {
        let dc: Vec<bool> = basis.atoms().iter().map(|a| a.freq == 0).collect();
        for (i, c) in self.coeffs.iter_mut().enumerate() {
            if dc[i % self.atoms] {
                c.im = 0.0;
            }
        }
    }

    pub fn check(&self, basis: &SteerableBasis) -> Result<()> {
        if self.atoms != basis.len()
            || self.coeffs.len() != self.out_channels * self.in_channels * self.offsets * self.atoms
            || self.bias.len() != self.out_channels
        {
            return shape_mismatch(
                "filter weights vs basis",
                &[self.out_channels, self.in_channels, self.offsets, self.atoms],
                &[basis.len()],
            );
        }
        for (i, c) in self.coeffs.iter().enumerate() {
            if basis.atoms()[i % self.atoms].freq == 0 && c.im != 0.0 {
                return invalid("k = 0 coefficients must be real");
            }
        }
        Ok(())
    }

    /// Linear combination `alpha·self + beta·other`.
    pub fn combine(&self, alpha: f64, other: &Self, beta: f64) -> Self {
        let mut out = self.clone();
        for (a, b) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *a = *a * alpha + *b * beta;
        }
        for (a, b) in out.bias.iter_mut().zip(&other.bias) {
            *a = *a * alpha + *b * beta;
        }
        out
    }
}

/// Real kernels `Re Σ_jk w_jk e^{−ikθ} ψ_jk` for every (out, in, offset):
/// shape `[Ĉ, C·offsets, S, S]`, input index `c·offsets + o`.
pub fn steer(weights: &FilterWeights, basis: &SteerableBasis, theta: f64) -> Result<Tensor> {
    weights.check(basis)?;
    Ok(steer_phased(weights, &basis.phased(theta), basis.size()))
}

pub(crate) fn steer_phased(weights: &FilterWeights, phased: &PhasedAtoms, size: usize) -> Tensor {
    let s2 = size * size;
    let inner = weights.in_channels * weights.offsets;
    let mut out = vec![0.0; weights.out_channels * inner * s2];
    for (slot, kernel) in out.chunks_mut(s2).enumerate() {
        for a in 0..weights.atoms {
            let w = weights.coeffs[slot * weights.atoms + a];
            if w.re != 0.0 || w.im != 0.0 {
                phased.accumulate(a, w, kernel);
            }
        }
    }
    Tensor::from_raw(vec![weights.out_channels, inner, size, size], out)
}

/// Steered kernels at every group angle, `Λ` tensors of `[Ĉ, C·offsets, S, S]`.
pub fn filter_bank(weights: &FilterWeights, basis: &SteerableBasis) -> Result<Vec<Tensor>> {
    weights.check(basis)?;
    Ok(basis
        .phased_bank()
        .iter()
        .map(|p| steer_phased(weights, p, basis.size()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rotate, Interpolation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_weights(
        basis: &SteerableBasis,
        out: usize,
        inp: usize,
        rng: &mut ChaCha8Rng,
    ) -> FilterWeights {
        let mut w = FilterWeights::zeros(out, inp, 1, basis.len());
        for c in &mut w.coeffs {
            *c = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        for b in &mut w.bias {
            *b = rng.random_range(-1.0..1.0);
        }
        w.project_real_dc(basis);
        w
    }

    #[test]
    fn single_pixel_basis() {
        let b = SteerableBasis::for_kernel(1, 4).unwrap();
        assert_eq!(b.len(), 1);
        let a = &b.atoms()[0];
        assert_eq!((a.ring, a.freq), (0, 0));
        assert_eq!(a.grid.data()[0], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn analytic_atom_value() {
        let b = SteerableBasis::for_kernel(9, 8).unwrap();
        let v = b.atom_value(1, 1, 0.0, 1.0);
        assert!((v - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        // and the sampled grid has that phase one row above the center
        let i = b.atom_index(1, 1).unwrap();
        let g = &b.atoms()[i].grid;
        let z = g.data()[3 * 9 + 4];
        assert!(z.re.abs() < 1e-15 && z.im > 0.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(SteerableBasis::for_kernel(4, 4).is_err());
        assert!(SteerableBasis::for_kernel(5, 0).is_err());
        assert!(RadialProfile::new(vec![0.5, 1.0], 0.6).is_err());
        assert!(RadialProfile::new(vec![0.0, 1.0, 1.0], 0.6).is_err());
        assert!(RadialProfile::new(vec![0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn frequency_caps() {
        let b = SteerableBasis::for_kernel(9, 4).unwrap();
        assert_eq!(b.max_freq(), &[0, 1, 1, 1, 1]);
        let b = SteerableBasis::for_kernel(9, 16).unwrap();
        assert_eq!(b.max_freq(), &[0, 3, 6, 7, 7]);
        let b = SteerableBasis::for_kernel(3, 1).unwrap();
        assert_eq!(b.max_freq(), &[0, 3]);
        for a in b.atoms() {
            assert!((a.grid.norm() - 1.0).abs() < 1e-12);
            if a.freq == 0 {
                assert!(a.grid.data().iter().all(|z| z.im == 0.0));
            }
        }
    }

    #[test]
    fn quarter_turn_multiplies_by_phase() {
        let b = SteerableBasis::for_kernel(9, 16).unwrap();
        for a in b.atoms() {
            for q in 1..4 {
                let theta = q as f64 * FRAC_PI_2;
                let rotated = a.grid.rotated(theta, Interpolation::Bilinear);
                let expect = a
                    .grid
                    .scale(Complex64::from_polar(1.0, -(a.freq as f64) * theta));
                assert!(
                    rotated.max_abs_diff(&expect) < 1e-10,
                    "ring {} k {} q {q}",
                    a.ring,
                    a.freq
                );
            }
        }
        let k2 = &b.atoms()[b.atom_index(1, 2).unwrap()];
        let r = k2.grid.rotated(FRAC_PI_2, Interpolation::Bilinear);
        assert!(r.max_abs_diff(&k2.grid.scale(Complex64::new(-1.0, 0.0))) < 1e-10);
    }

    #[test]
    fn steering_at_zero_is_composition() {
        let b = SteerableBasis::for_kernel(5, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_weights(&b, 2, 3, &mut rng);
        let k = steer(&w, &b, 0.0).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                for p in 0..25 {
                    let direct: f64 = (0..b.len())
                        .map(|a| (w.coeff(o, i, 0, a) * b.atoms()[a].grid.data()[p]).re)
                        .sum();
                    assert!((k.data()[(o * 3 + i) * 25 + p] - direct).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn isotropic_weights_ignore_angle() {
        let b = SteerableBasis::for_kernel(5, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut w = random_weights(&b, 2, 2, &mut rng);
        for (i, c) in w.coeffs.iter_mut().enumerate() {
            if b.atoms()[i % b.len()].freq != 0 {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        let k0 = steer(&w, &b, 0.0).unwrap();
        for theta in [0.3, 1.7, -2.9] {
            assert_eq!(steer(&w, &b, theta).unwrap(), k0);
        }
        let bank = filter_bank(&w, &b).unwrap();
        assert!(bank.iter().all(|k| *k == k0));
    }

    #[test]
    fn phase_steering_matches_grid_rotation() {
        let b = SteerableBasis::for_kernel(7, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = random_weights(&b, 3, 2, &mut rng);
        let k0 = steer(&w, &b, 0.0).unwrap();
        let k90 = steer(&w, &b, FRAC_PI_2).unwrap();
        assert!(k90.max_abs_diff(&rotate(&k0, FRAC_PI_2, Interpolation::Bilinear)) < 1e-10);
        let bank = filter_bank(&w, &b).unwrap();
        assert_eq!(bank.len(), 4);
        assert!(bank[1].max_abs_diff(&rotate(&bank[0], FRAC_PI_2, Interpolation::Bilinear)) < 1e-10);
    }

    #[test]
    fn trivial_group_bank_has_one_filter() {
        let b = SteerableBasis::for_kernel(3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = random_weights(&b, 1, 1, &mut rng);
        let bank = filter_bank(&w, &b).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank[0], steer(&w, &b, 0.0).unwrap());
    }

    #[test]
    fn mismatched_weights_rejected() {
        let b = SteerableBasis::for_kernel(5, 4).unwrap();
        let w = FilterWeights::zeros(1, 1, 1, b.len() + 1);
        assert!(steer(&w, &b, 0.0).is_err());
        let mut w = FilterWeights::zeros(1, 1, 1, b.len());
        w.coeffs[0] = Complex64::new(0.0, 1.0);
        assert!(steer(&w, &b, 0.0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let b = SteerableBasis::for_kernel(7, 8).unwrap();
        let text = b.manifest();
        assert!(text.contains("max_freq = 0 3 3 3"));
        let b2 = SteerableBasis::from_manifest(&text).unwrap();
        assert_eq!(b2.manifest(), text);
        assert_eq!(b2.len(), b.len());
        let tampered = text.replace("max_freq = 0 3 3 3", "max_freq = 0 3 3 2");
        assert!(SteerableBasis::from_manifest(&tampered).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn weights(seed: u64) -> (SteerableBasis, FilterWeights) {
            let b = SteerableBasis::for_kernel(5, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_weights(&b, 2, 2, &mut rng);
            (b, w)
        }

        proptest! {
            #[test]
            fn steering_is_linear(s1 in 0u64..1000, s2 in 0u64..1000, alpha in -2.0f64..2.0,
                                  beta in -2.0f64..2.0, theta in -7.0f64..7.0) {
                let (b, w1) = weights(s1);
                let (_, w2) = weights(s2 + 1000);
                let lhs = steer(&w1.combine(alpha, &w2, beta), &b, theta).unwrap();
                let mut rhs = steer(&w1, &b, theta).unwrap().scale(alpha);
                rhs.axpy(beta, &steer(&w2, &b, theta).unwrap()).unwrap();
                prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
            }

            #[test]
            fn steering_is_periodic(seed in 0u64..1000, theta in -7.0f64..7.0) {
                let (b, w) = weights(seed);
                let a = steer(&w, &b, theta).unwrap();
                let c = steer(&w, &b, theta + 2.0 * PI).unwrap();
                if wrap_angle(theta) == wrap_angle(theta + 2.0 * PI) {
                    prop_assert_eq!(a, c);
                } else {
                    prop_assert!(a.max_abs_diff(&c) < 1e-12);
                }
            }
        }
    }
}
