//! Pinhole cameras, bilinear image sampling, and the multi-view voxel
//! volume storing one projected grayscale value per view per cell.
//!
//! World frame: z is altitude in meters, so horizontal planes and water
//! levels are `z = const`. Pixel centers sit at integer coordinates; a
//! projection is in view when it can be bilinearly sampled, i.e.
//! `u in [0, width-1]` and `v in [0, height-1]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Mat3, Vec3};
use crate::raster::Image;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("camera rotation is not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("focal lengths must be positive, got fx={fx}, fy={fy}")]
    BadFocal { fx: f64, fy: f64 },
    #[error("sample_image: ({u}, {v}) outside image {width}x{height}")]
    OutsideImage { u: f64, v: f64, width: usize, height: usize },
    #[error("multi-view volume needs at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("camera/image count mismatch: {cameras} cameras, {images} images")]
    CountMismatch { cameras: usize, images: usize },
    #[error("image {index} is {got_w}x{got_h} but camera {index} expects {want_w}x{want_h}")]
    ImageSizeMismatch { index: usize, got_w: usize, got_h: usize, want_w: usize, want_h: usize },
}

/// Intrinsics plus a rigid world-to-camera pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation, row major.
    pub rotation: Mat3,
    /// World-to-camera translation: `p_cam = R p_world + t`.
    pub translation: Vec3,
}

/// Successful projection of a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    /// Distance along the optical axis (camera-frame z).
    pub depth: f64,
}

impl PinholeCamera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self, CameraError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(CameraError::BadFocal { fx, fy });
        }
        let cam = PinholeCamera { fx, fy, cx, cy, width, height, rotation, translation };
        let dev = cam.orthonormality_deviation();
        if dev > 1e-9 {
            return Err(CameraError::NotOrthonormal(dev));
        }
        Ok(cam)
    }

    /// Max absolute deviation of `R R^T` from the identity.
    pub fn orthonormality_deviation(&self) -> f64 {
        let r = &self.rotation;
        let mut dev = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let d = geom::dot(r[i], r[j]) - if i == j { 1.0 } else { 0.0 };
                dev = dev.max(d.abs());
            }
        }
        dev
    }

    /// Camera center in world coordinates (`-R^T t`).
    pub fn center(&self) -> Vec3 {
        geom::scale(geom::mat_transpose_vec(&self.rotation, self.translation), -1.0)
    }

    /// Project a world point. `None` when behind the camera or outside the
    /// sampleable image area; being out of view is a value, not an error.
    pub fn project(&self, p: Vec3) -> Option<PixelProjection> {
        let pc = geom::add(geom::mat_vec(&self.rotation, p), self.translation);
        if pc[2] <= 0.0 {
            return None;
        }
        let u = self.cx + self.fx * pc[0] / pc[2];
        let v = self.cy + self.fy * pc[1] / pc[2];
        if u < 0.0 || v < 0.0 || u > (self.width - 1) as f64 || v > (self.height - 1) as f64 {
            return None;
        }
        Some(PixelProjection { u, v, depth: pc[2] })
    }

    /// World point on the ray through pixel `(u, v)` at optical-axis depth.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let pc = [
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ];
        geom::mat_transpose_vec(&self.rotation, geom::sub(pc, self.translation))
    }

    /// World-space direction of the ray through pixel `(u, v)`, not
    /// normalized; its camera-frame z component is 1.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let pc = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        geom::mat_transpose_vec(&self.rotation, pc)
    }
}

/// Bilinear sample of a grayscale image at fractional pixel coordinates.
pub fn sample_image(image: &Image, u: f64, v: f64) -> Result<f64, CameraError> {
    let (w, h) = (image.width(), image.height());
    if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
        return Err(CameraError::OutsideImage { u, v, width: w, height: h });
    }
    if w == 1 && h == 1 {
        return Ok(*image.get(0, 0));
    }
    let x0 = (u.floor() as usize).min(w.saturating_sub(2));
    let y0 = (v.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let v00 = *image.get(x0, y0);
    let v10 = *image.get(x1, y0);
    let v01 = *image.get(x0, y1);
    let v11 = *image.get(x1, y1);
    Ok(v00 * (1.0 - fx) * (1.0 - fy)
        + v10 * fx * (1.0 - fy)
        + v01 * (1.0 - fx) * fy
        + v11 * fx * fy)
}

/// Axis-aligned voxel grid placement; cell `(i, j, l)` has its center at
/// `origin + (i+0.5, j+0.5, l+0.5) * cell_size`, z being altitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub origin: Vec3,
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl VoxelGridSpec {
    pub fn cell_center(&self, i: usize, j: usize, l: usize) -> Vec3 {
        [
            self.origin[0] + (i as f64 + 0.5) * self.cell_size,
            self.origin[1] + (j as f64 + 0.5) * self.cell_size,
            self.origin[2] + (l as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Cell containing a world point, unclamped (may be out of range).
    pub fn cell_of(&self, p: Vec3) -> [isize; 3] {
        [
            ((p[0] - self.origin[0]) / self.cell_size).floor() as isize,
            ((p[1] - self.origin[1]) / self.cell_size).floor() as isize,
            ((p[2] - self.origin[2]) / self.cell_size).floor() as isize,
        ]
    }

    pub fn contains(&self, c: [isize; 3]) -> bool {
        c[0] >= 0
            && c[1] >= 0
            && c[2] >= 0
            && (c[0] as usize) < self.nx
            && (c[1] as usize) < self.ny
            && (c[2] as usize) < self.nz
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny * self.nz
    }
}

/// One projected grayscale value; `valid` is false when the cell projects
/// outside the view (0.0 is a legal intensity, so a flag is required).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewSample {
    pub value: f64,
    pub valid: bool,
}

impl ViewSample {
    pub const INVALID: ViewSample = ViewSample { value: 0.0, valid: false };
}

/// Project one world point into every view and sample the images.
pub fn sample_views(p: Vec3, cameras: &[PinholeCamera], images: &[Image]) -> Vec<ViewSample> {
    cameras
        .iter()
        .zip(images)
        .map(|(cam, img)| match cam.project(p) {
            Some(proj) => match sample_image(img, proj.u, proj.v) {
                Ok(value) => ViewSample { value, valid: true },
                Err(_) => ViewSample::INVALID,
            },
            None => ViewSample::INVALID,
        })
        .collect()
}

/// Voxel grid storing `k` grayscale samples per cell, one per view.
#[derive(Debug, Clone)]
pub struct MultiViewVolume {
    pub spec: VoxelGridSpec,
    pub k: usize,
    /// Layout `[nx, ny, nz, k]`, row major.
    samples: Vec<ViewSample>,
}

impl MultiViewVolume {
    #[inline]
    fn base(&self, i: usize, j: usize, l: usize) -> usize {
        (((i * self.spec.ny) + j) * self.spec.nz + l) * self.k
    }

    /// All `k` view samples of one cell.
    pub fn cell(&self, i: usize, j: usize, l: usize) -> &[ViewSample] {
        let b = self.base(i, j, l);
        &self.samples[b..b + self.k]
    }

    pub fn sample(&self, i: usize, j: usize, l: usize, view: usize) -> ViewSample {
        debug_assert!(view < self.k);
        self.samples[self.base(i, j, l) + view]
    }
}

/// Fill the voxel grid by projecting every cell center into every view.
pub fn fill_multiview_volume(
    spec: VoxelGridSpec,
    cameras: &[PinholeCamera],
    images: &[Image],
) -> Result<MultiViewVolume, CameraError> {
    if cameras.len() != images.len() {
        return Err(CameraError::CountMismatch { cameras: cameras.len(), images: images.len() });
    }
    let k = cameras.len();
    if k < 2 {
        return Err(CameraError::TooFewViews(k));
    }
    for (index, (cam, img)) in cameras.iter().zip(images).enumerate() {
        if cam.width != img.width() || cam.height != img.height() {
            return Err(CameraError::ImageSizeMismatch {
                index,
                got_w: img.width(),
                got_h: img.height(),
                want_w: cam.width,
                want_h: cam.height,
            });
        }
    }
    // Parallel over x-slabs; each slab writes a disjoint range, so the
    // result does not depend on scheduling.
    let slab = spec.ny * spec.nz * k;
    let mut samples = vec![ViewSample::INVALID; spec.n_cells() * k];
    samples
        .par_chunks_mut(slab)
        .enumerate()
        .for_each(|(i, chunk)| {
            for j in 0..spec.ny {
                for l in 0..spec.nz {
                    let center = spec.cell_center(i, j, l);
                    let out = &mut chunk[(j * spec.nz + l) * k..(j * spec.nz + l + 1) * k];
                    for ((cam, img), slot) in cameras.iter().zip(images).zip(out.iter_mut()) {
                        *slot = match cam.project(center) {
                            Some(proj) => match sample_image(img, proj.u, proj.v) {
                                Ok(value) => ViewSample { value, valid: true },
                                Err(_) => ViewSample::INVALID,
                            },
                            None => ViewSample::INVALID,
                        };
                    }
                }
            }
        });
    Ok(MultiViewVolume { spec, k, samples })
}

/// JSON pose file entry; `rotation` is row major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraPoseRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&PinholeCamera> for CameraPoseRecord {
    fn from(c: &PinholeCamera) -> Self {
        let r = &c.rotation;
        CameraPoseRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
            translation: c.translation,
        }
    }
}

impl CameraPoseRecord {
    pub fn into_camera(self) -> Result<PinholeCamera, CameraError> {
        let r = self.rotation;
        PinholeCamera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            self.translation,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Grid2;

    pub fn identity_camera(fx: f64, cx: f64, size: usize) -> PinholeCamera {
        PinholeCamera::new(
            fx,
            fx,
            cx,
            cx,
            size,
            size,
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn principal_ray_hits_principal_point() {
        let cam = identity_camera(100.0, 50.0, 101);
        let p = cam.project([0.0, 0.0, 7.5]).unwrap();
        assert!((p.u - 50.0).abs() < 1e-12);
        assert!((p.v - 50.0).abs() < 1e-12);
        assert!((p.depth - 7.5).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_projection() {
        let cam = identity_camera(100.0, 50.0, 101);
        let p = cam.project([1.0, 0.0, 10.0]).unwrap();
        assert!((p.u - 60.0).abs() < 1e-12);
        assert!((p.v - 50.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_out_of_view() {
        let cam = identity_camera(100.0, 50.0, 101);
        assert!(cam.project([0.0, 0.0, -1.0]).is_none());
        assert!(cam.project([0.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn bad_rotation_rejected() {
        let r = PinholeCamera::new(
            1.0,
            1.0,
            0.0,
            0.0,
            2,
            2,
            [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
        );
        assert!(matches!(r, Err(CameraError::NotOrthonormal(_))));
    }

    #[test]
    fn bilinear_midpoint_is_average() {
        let img = Grid2::from_vec(2, 1, vec![0.2, 0.8]);
        assert!((sample_image(&img, 0.5, 0.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(sample_image(&img, 1.0, 0.0).unwrap(), 0.8);
        assert!(sample_image(&img, 1.01, 0.0).is_err());
    }

    #[test]
    fn constant_image_samples_constant() {
        let img = Grid2::filled(4, 3, 0.42);
        for &(u, v) in &[(0.0, 0.0), (1.7, 0.3), (3.0, 2.0), (2.999, 1.999)] {
            assert!((sample_image(&img, u, v).unwrap() - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn volume_requires_two_views() {
        let spec = VoxelGridSpec { origin: [0.0; 3], cell_size: 1.0, nx: 1, ny: 1, nz: 1 };
        let cam = identity_camera(1.0, 0.5, 2);
        let img = Grid2::filled(2, 2, 0.0);
        assert!(matches!(
            fill_multiview_volume(spec, &[cam], &[img]),
            Err(CameraError::TooFewViews(1))
        ));
    }
}
