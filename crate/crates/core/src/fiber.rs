//! Fiber orientation and scattering strength from reconstructed
//! coefficients.
//!
//! The Funk-Radon transform is diagonal in the harmonic basis with factor
//! `2 pi P_k(0)` on degree `k`; the resulting orientation density is
//! evaluated on a sphere grid and its largest local maximum taken as the
//! fiber direction.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{even_sh_terms, CoefficientVolume, ScalarVolume, Vec3, VolumeGrid};
use crate::sphharm::{even_sh_values, SphereGrid};

/// Default evaluation grid level for maxima search.
pub const DEFAULT_ODF_LEVEL: usize = 3;

const FLAT_TOL: f64 = 1e-12;

/// Legendre polynomial `P_k(0)`.
pub fn legendre_at_zero(k: usize) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    // P_k(0) = (-1)^{k/2} (k-1)!! / k!!
    let mut v = 1.0;
    let mut j = 2;
    while j <= k {
        v *= -((j - 1) as f64) / j as f64;
        j += 2;
    }
    v
}

/// Funk-Radon eigenvalue of degree `k`.
pub fn funk_radon_factor(k: usize) -> f64 {
    2.0 * PI * legendre_at_zero(k)
}

/// Funk-Radon transform of one voxel's even coefficients.
pub fn funk_radon(eta: &[f64], max_degree: usize) -> Vec<f64> {
    even_sh_terms(max_degree)
        .iter()
        .zip(eta)
        .map(|((k, _), c)| funk_radon_factor(*k) * c)
        .collect()
}

/// Spherical mean of the scattering function, `eta_0^0 / (2 sqrt(pi))`.
pub fn scattering_strength(eta: &[f64]) -> f64 {
    eta.first().map_or(0.0, |c| c / (2.0 * PI.sqrt()))
}

/// Flips `v` into the hemisphere `z > 0`, breaking ties with `y`, then `x`.
pub fn canonicalize(v: Vec3) -> Vec3 {
    for d in [2, 1, 0] {
        if v[d].abs() > FLAT_TOL {
            return if v[d] < 0.0 { -v } else { v };
        }
    }
    v
}

/// Precomputed harmonic values on an evaluation grid.
pub struct OdfEvaluator<'a> {
    pub grid: &'a SphereGrid,
    pub max_degree: usize,
    basis: Vec<Vec<f64>>,
}

impl<'a> OdfEvaluator<'a> {
    pub fn new(grid: &'a SphereGrid, max_degree: usize) -> Self {
        let basis = grid.nodes.iter().map(|u| even_sh_values(max_degree, u)).collect();
        Self {
            grid,
            max_degree,
            basis,
        }
    }

    pub fn values(&self, coeffs: &[f64]) -> Vec<f64> {
        self.basis
            .iter()
            .map(|y| y.iter().zip(coeffs).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Principal direction of an orientation density given by `coeffs`, or
    /// `None` when the density is flat on the grid.
    pub fn principal_direction(&self, coeffs: &[f64]) -> Option<Vec3> {
        let vals = self.values(coeffs);
        let (lo, hi) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        if !(hi - lo > FLAT_TOL * hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE)) {
            return None;
        }
        let mut best: Option<usize> = None;
        for (i, &v) in vals.iter().enumerate() {
            let is_local_max = self.grid.neighbors[i].iter().all(|&n| v >= vals[n]);
            if is_local_max && best.is_none_or(|b| v > vals[b]) {
                best = Some(i);
            }
        }
        best.map(|i| canonicalize(self.grid.nodes[i]))
    }
}

/// Direction of the largest ODF maximum; `odf` holds Funk-Radon
/// transformed coefficients.
pub fn odf_maxima(odf: &[f64], grid: &SphereGrid, max_degree: usize) -> Result<Option<Vec3>> {
    if grid.level < 3 {
        return Err(Error::invalid(format!(
            "maxima search needs a sphere grid of level >= 3, got {}",
            grid.level
        )));
    }
    Ok(OdfEvaluator::new(grid, max_degree).principal_direction(odf))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiberField {
    pub grid: VolumeGrid,
    pub direction: Vec<Option<Vec3>>,
    pub strength: Vec<f64>,
    /// `true` for voxels kept.
    pub mask: Vec<bool>,
}

impl FiberField {
    pub fn n_kept(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn strength_volume(&self) -> ScalarVolume {
        ScalarVolume {
            grid: self.grid,
            values: self.strength.clone(),
        }
    }

    /// Rows `x,y,z,dx,dy,dz,strength,masked`; `masked` is 1 for excluded
    /// voxels, whose direction is written as zeros.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,z,dx,dy,dz,strength,masked\n");
        let [nx, ny, nz] = self.grid.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let v = self.grid.index(i, j, k);
                    let c = self.grid.voxel_center(i, j, k);
                    let d = self.direction[v].unwrap_or_else(Vec3::zeros);
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        c.x,
                        c.y,
                        c.z,
                        d.x,
                        d.y,
                        d.z,
                        self.strength[v],
                        u8::from(!self.mask[v])
                    ));
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Per-voxel strength and principal direction. Voxels with a flat
/// orientation density are masked out.
pub fn extract_fibers(eta: &CoefficientVolume, grid: &SphereGrid) -> Result<FiberField> {
    if grid.level < 3 {
        return Err(Error::invalid("maxima search needs a sphere grid of level >= 3"));
    }
    let eval = OdfEvaluator::new(grid, eta.max_degree);
    let n = eta.grid.n_voxels();
    let (direction, strength): (Vec<Option<Vec3>>, Vec<f64>) = (0..n)
        .into_par_iter()
        .map(|v| {
            let c = eta.voxel(v);
            (
                eval.principal_direction(&funk_radon(&c, eta.max_degree)),
                scattering_strength(&c),
            )
        })
        .unzip();
    let mask = direction.iter().map(Option::is_some).collect();
    Ok(FiberField {
        grid: eta.grid,
        direction,
        strength,
        mask,
    })
}

/// Keeps voxels with positive strength of at least `threshold`.
pub fn threshold_mask(field: &FiberField, threshold: f64) -> Result<FiberField> {
    if !(threshold >= 0.0) {
        return Err(Error::invalid(format!(
            "threshold must be nonnegative, got {threshold}"
        )));
    }
    let mut out = field.clone();
    for v in 0..out.mask.len() {
        let s = out.strength[v];
        out.mask[v] = out.mask[v] && s > 0.0 && s >= threshold;
        if !out.mask[v] {
            out.direction[v] = None;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VolumeStats {
    pub count: usize,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    /// 95 % quantile, linear interpolation between order statistics.
    pub q95: f64,
}

pub fn volume_stats(values: &[f64], mask: Option<&[bool]>) -> Result<VolumeStats> {
    if let Some(m) = mask {
        if m.len() != values.len() {
            return Err(Error::shape("mask and volume differ in length"));
        }
    }
    let mut sel: Vec<f64> = match mask {
        Some(m) => values.iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| *v).collect(),
        None => values.to_vec(),
    };
    if sel.is_empty() {
        return Err(Error::invalid("statistics need a nonempty selection"));
    }
    let n = sel.len() as f64;
    let mean = sel.iter().sum::<f64>() / n;
    let variance = sel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    sel.sort_by(f64::total_cmp);
    let pos = 0.95 * (sel.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sel.len() - 1);
    let q95 = sel[lo] + (pos - lo as f64) * (sel[hi] - sel[lo]);
    Ok(VolumeStats {
        count: sel.len(),
        mean,
        variance,
        q95,
    })
}
