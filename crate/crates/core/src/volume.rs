//! Dense 3D scalar grids with physical geometry.
//!
//! Voxels are node-centered: the value of voxel `(i, j, k)` lives at
//! `origin + (i, j, k) ⊙ spacing` and the world extent of a volume is the
//! bounding box of its voxel centers. Data is stored x-fastest, z-slowest.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    fill: f32,
}

fn check_geometry(shape: &[usize], spacing: &[f64], origin: &[f64]) -> Result<()> {
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::Geometry(format!("shape {shape:?} has an empty axis")));
    }
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::Geometry(format!(
            "spacing {spacing:?} must be finite and strictly positive"
        )));
    }
    if origin.iter().any(|o| !o.is_finite()) {
        return Err(Error::Geometry(format!("origin {origin:?} must be finite")));
    }
    Ok(())
}

impl Volume {
    pub fn new(data: Vec<f32>, shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        check_geometry(&shape, &spacing, &origin)?;
        let n = shape.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Geometry(format!(
                "data length {} does not match shape {shape:?} ({n} voxels)",
                data.len()
            )));
        }
        Ok(Self {
            data,
            shape,
            spacing,
            origin,
            fill: 0.0,
        })
    }

    pub fn filled(value: f32, shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Self::new(vec![value; shape.iter().product()], shape, spacing, origin)
    }

    /// Builds a volume by evaluating `f` at every voxel center (world mm).
    pub fn from_fn<F>(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3], f: F) -> Result<Self>
    where
        F: Fn([f64; 3]) -> f32 + Sync,
    {
        check_geometry(&shape, &spacing, &origin)?;
        let [nx, ny, nz] = shape;
        let mut data = vec![0.0f32; nx * ny * nz];
        data.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
            let z = origin[2] + k as f64 * spacing[2];
            for j in 0..ny {
                let y = origin[1] + j as f64 * spacing[1];
                for i in 0..nx {
                    let x = origin[0] + i as f64 * spacing[0];
                    slab[j * nx + i] = f([x, y, z]);
                }
            }
        });
        Self::new(data, shape, spacing, origin)
    }

    /// Value returned when sampling outside the voxel-center bounding box.
    pub fn with_fill(mut self, fill: f32) -> Self {
        self.fill = fill;
        self
    }

    pub fn fill(&self) -> f32 {
        self.fill
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.shape[1] + j) * self.shape[0] + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.linear_index(i, j, k)]
    }

    pub fn index_to_world(&self, index: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + index[a] * self.spacing[a])
    }

    pub fn world_to_index(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin[a]) / self.spacing[a])
    }

    /// World z coordinate of every axial slice.
    pub fn z_grid(&self) -> Vec<f64> {
        (0..self.shape[2])
            .map(|k| self.origin[2] + k as f64 * self.spacing[2])
            .collect()
    }

    /// Minimum and maximum voxel-center coordinate along each axis.
    pub fn world_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let hi = std::array::from_fn(|a| self.origin[a] + (self.shape[a] - 1) as f64 * self.spacing[a]);
        (self.origin, hi)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Trilinear interpolation at a world point.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> Result<f64> {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(p.to_vec()));
        }
        Ok(self.sample_unchecked(p))
    }

    pub(crate) fn sample_unchecked(&self, p: [f64; 3]) -> f64 {
        let idx = self.world_to_index(p);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.shape[a];
            let x = idx[a];
            // A small tolerance keeps boundary centers inside despite rounding.
            if x < -1e-9 || x > (n - 1) as f64 + 1e-9 {
                return self.fill as f64;
            }
            let x = x.clamp(0.0, (n - 1) as f64);
            if n == 1 {
                base[a] = 0;
                frac[a] = 0.0;
                continue;
            }
            let b = (x.floor() as usize).min(n - 2);
            base[a] = b;
            frac[a] = x - b as f64;
        }
        let [nx, ny, _] = self.shape;
        let step = [
            usize::from(self.shape[0] > 1),
            usize::from(self.shape[1] > 1) * nx,
            usize::from(self.shape[2] > 1) * nx * ny,
        ];
        let i0 = self.linear_index(base[0], base[1], base[2]);
        let v = |o: usize| self.data[i0 + o] as f64;
        let [fx, fy, fz] = frac;
        let c00 = v(0) * (1.0 - fx) + v(step[0]) * fx;
        let c10 = v(step[1]) * (1.0 - fx) + v(step[1] + step[0]) * fx;
        let c01 = v(step[2]) * (1.0 - fx) + v(step[2] + step[0]) * fx;
        let c11 = v(step[2] + step[1]) * (1.0 - fx) + v(step[2] + step[1] + step[0]) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    /// Resamples onto a grid with `target_spacing` covering the same world
    /// extent and sharing the origin.
    pub fn resample(&self, target_spacing: [f64; 3]) -> Result<Volume> {
        if target_spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Geometry(format!(
                "target spacing {target_spacing:?} must be finite and strictly positive"
            )));
        }
        let shape: [usize; 3] = std::array::from_fn(|a| {
            let extent = (self.shape[a] - 1) as f64 * self.spacing[a];
            (extent / target_spacing[a] + 1e-9).floor() as usize + 1
        });
        if shape.iter().any(|&n| n < 1) || shape.iter().product::<usize>() > (1 << 34) {
            return Err(Error::Geometry(format!("degenerate resampled shape {shape:?}")));
        }
        let same = shape == self.shape && target_spacing == self.spacing;
        if same {
            return Ok(self.clone());
        }
        Volume::from_fn(shape, target_spacing, self.origin, |p| self.sample_unchecked(p) as f32)
            .map(|v| v.with_fill(self.fill))
    }

    /// Min-max scaling to `[0, 1]`.
    pub fn normalize_unit(&self) -> Result<Volume> {
        let (lo, hi) = self.min_max();
        if !(hi > lo) {
            return Err(Error::Normalization("volume is constant"));
        }
        let (lo, range) = (lo as f64, hi as f64 - lo as f64);
        let data = self.data.iter().map(|&v| ((v as f64 - lo) / range) as f32).collect();
        Ok(Volume {
            data,
            fill: 0.0,
            ..self.clone_geometry()
        })
    }

    /// Zero-mean, unit-variance standardization (population variance).
    pub fn normalize_standard(&self) -> Result<Volume> {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::Normalization("volume has zero variance"));
        }
        let sd = var.sqrt();
        let data = self.data.iter().map(|&v| ((v as f64 - mean) / sd) as f32).collect();
        Ok(Volume {
            data,
            fill: 0.0,
            ..self.clone_geometry()
        })
    }

    pub fn axial_slice(&self, k: usize) -> Result<AxialSlice> {
        if k >= self.shape[2] {
            return Err(Error::Invalid(format!("slice {k} out of range 0..{}", self.shape[2])));
        }
        let n = self.shape[0] * self.shape[1];
        Ok(AxialSlice {
            image: Image2 {
                data: self.data[k * n..(k + 1) * n].to_vec(),
                shape: [self.shape[0], self.shape[1]],
                spacing: [self.spacing[0], self.spacing[1]],
                origin: [self.origin[0], self.origin[1]],
            },
            z_index: k,
            z_world: self.origin[2] + k as f64 * self.spacing[2],
        })
    }

    /// Borrowed view of slice `k` (row-major in y, x fastest).
    pub fn slice_data(&self, k: usize) -> &[f32] {
        let n = self.shape[0] * self.shape[1];
        &self.data[k * n..(k + 1) * n]
    }

    fn clone_geometry(&self) -> Volume {
        Volume {
            data: Vec::new(),
            shape: self.shape,
            spacing: self.spacing,
            origin: self.origin,
            fill: self.fill,
        }
    }
}

/// A 2D scalar image with physical geometry (x fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Image2 {
    pub data: Vec<f32>,
    pub shape: [usize; 2],
    pub spacing: [f64; 2],
    pub origin: [f64; 2],
}

impl Image2 {
    pub fn new(data: Vec<f32>, shape: [usize; 2], spacing: [f64; 2], origin: [f64; 2]) -> Result<Self> {
        check_geometry(&shape, &spacing, &origin)?;
        if data.len() != shape[0] * shape[1] {
            return Err(Error::Geometry(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            shape,
            spacing,
            origin,
        })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[j * self.shape[0] + i]
    }

    pub fn pixel_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
        ]
    }

    /// Wraps the image as a single-slice volume (`nz = 1`).
    pub fn to_volume(&self) -> Volume {
        Volume {
            data: self.data.clone(),
            shape: [self.shape[0], self.shape[1], 1],
            spacing: [self.spacing[0], self.spacing[1], 1.0],
            origin: [self.origin[0], self.origin[1], 0.0],
            fill: 0.0,
        }
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        if v.shape[2] != 1 {
            return Err(Error::Geometry(format!("expected nz = 1, got shape {:?}", v.shape)));
        }
        Image2::new(
            v.data.clone(),
            [v.shape[0], v.shape[1]],
            [v.spacing[0], v.spacing[1]],
            [v.origin[0], v.origin[1]],
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxialSlice {
    pub image: Image2,
    pub z_index: usize,
    pub z_world: f64,
}
