//! LiDAR intensity projection (LIP) rendering.
//!
//! A [`LipImage`] is what a virtual camera with the real camera's intrinsics
//! would see if each LiDAR return were a pixel-sized intensity splat. Every
//! directly rendered pixel keeps the index of the cloud point that produced it,
//! which is how 2D matches in the LIP image are lifted back to 3D.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::GrayImage;
use nalgebra::Vector2;
use rayon::prelude::*;

use crate::geometry::{project_point, Intrinsics, LidarPoint, RigidTransform};

/// Sentinel used for unset pixels in the exported index map.
pub const INDEX_SENTINEL: u32 = u32::MAX;

/// A hole needs at least this many valid 8-neighbours to be filled.
pub const FILL_MIN_NEIGHBORS: usize = 5;
pub const FILL_PASSES: usize = 2;

#[derive(thiserror::Error, Debug)]
pub enum LipError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("no point projects into the {width}x{height} image")]
    EmptyFrustum { width: u32, height: u32 },
    #[error("index map size mismatch: expected {expected} bytes, found {found}")]
    IndexMapSize { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipImage {
    width: u32,
    height: u32,
    intensity: Vec<u8>,
    point_index: Vec<Option<u32>>,
    depth: Vec<f64>,
    filled: Vec<bool>,
    pose: RigidTransform,
}

impl LipImage {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pose_used(&self) -> &RigidTransform {
        &self.pose
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn intensity(&self, x: u32, y: u32) -> u8 {
        self.intensity[self.offset(x, y)]
    }

    /// Source point for a directly rendered pixel.
    pub fn point_index(&self, x: u32, y: u32) -> Option<u32> {
        self.point_index[self.offset(x, y)]
    }

    /// Camera-frame depth for set pixels, `+inf` elsewhere.
    pub fn depth(&self, x: u32, y: u32) -> f64 {
        self.depth[self.offset(x, y)]
    }

    pub fn is_filled(&self, x: u32, y: u32) -> bool {
        self.filled[self.offset(x, y)]
    }

    pub fn is_set(&self, x: u32, y: u32) -> bool {
        self.point_index(x, y).is_some()
    }

    /// Set or filled: the pixel carries meaningful intensity.
    pub fn is_valid(&self, x: u32, y: u32) -> bool {
        let o = self.offset(x, y);
        self.point_index[o].is_some() || self.filled[o]
    }

    pub fn set_pixel_count(&self) -> usize {
        self.point_index.iter().filter(|p| p.is_some()).count()
    }

    pub fn intensities(&self) -> &[u8] {
        &self.intensity
    }

    pub fn point_indices(&self) -> &[Option<u32>] {
        &self.point_index
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width, self.height, self.intensity.clone())
            .expect("buffer matches dimensions")
    }

    /// Nearest set pixel to `pixel` within `radius` (Euclidean, in pixel
    /// cells). Ties go to the first cell in row-major order.
    pub fn nearest_set_pixel(&self, pixel: &Vector2<f64>, radius: f64) -> Option<(u32, u32)> {
        let cu = (pixel.x + 0.5).floor() as i64;
        let cv = (pixel.y + 0.5).floor() as i64;
        let r = radius.ceil() as i64;
        let mut best: Option<(f64, (u32, u32))> = None;
        for y in (cv - r).max(0)..=(cv + r).min(self.height as i64 - 1) {
            for x in (cu - r).max(0)..=(cu + r).min(self.width as i64 - 1) {
                let (xu, yu) = (x as u32, y as u32);
                if !self.is_set(xu, yu) {
                    continue;
                }
                let d = ((x as f64 - pixel.x).powi(2) + (y as f64 - pixel.y).powi(2)).sqrt();
                if d <= radius && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, (xu, yu)));
                }
            }
        }
        best.map(|(_, c)| c)
    }

    /// Writes the intensity image as PNG and a raw little-endian `u32`
    /// row-major index map with [`INDEX_SENTINEL`] for unset pixels.
    pub fn write_debug(&self, png: &Path, index_map: &Path) -> Result<(), LipError> {
        self.to_gray_image().save(png)?;
        let mut w = BufWriter::new(File::create(index_map)?);
        for idx in &self.point_index {
            w.write_all(&idx.unwrap_or(INDEX_SENTINEL).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads an index map written by [`LipImage::write_debug`].
pub fn read_index_map(path: &Path, width: u32, height: u32) -> Result<Vec<Option<u32>>, LipError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let expected = width as usize * height as usize * 4;
    if bytes.len() != expected {
        return Err(LipError::IndexMapSize {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| {
            let v = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            (v != INDEX_SENTINEL).then_some(v)
        })
        .collect())
}

/// Projects every point through `pose` and `k`, keeps the nearest point per
/// pixel (ties to the smaller cloud index) and normalizes intensities to 8 bit.
pub fn render_lip(
    cloud: &[LidarPoint],
    pose: &RigidTransform,
    k: &Intrinsics,
) -> Result<LipImage, LipError> {
    if cloud.is_empty() {
        return Err(LipError::EmptyCloud);
    }
    let (w, h) = (k.width, k.height);
    let hits: Vec<Option<(usize, f64)>> = cloud
        .par_iter()
        .map(|pt| {
            let pc = pose.transform_point(&pt.position);
            let px = project_point(&pc, k).ok()?;
            let (u, v) = k.pixel_cell(&px)?;
            Some((v as usize * w as usize + u as usize, pc.z))
        })
        .collect();

    let n = w as usize * h as usize;
    let mut depth = vec![f64::INFINITY; n];
    let mut point_index: Vec<Option<u32>> = vec![None; n];
    for (i, hit) in hits.into_iter().enumerate() {
        if let Some((cell, z)) = hit {
            // ascending index order: strict < keeps the smaller index on ties
            if z < depth[cell] {
                depth[cell] = z;
                point_index[cell] = Some(i as u32);
            }
        }
    }

    let mut raw: Vec<f64> = point_index
        .iter()
        .flatten()
        .map(|&i| cloud[i as usize].intensity)
        .collect();
    if raw.is_empty() {
        return Err(LipError::EmptyFrustum {
            width: w,
            height: h,
        });
    }
    raw.sort_by(f64::total_cmp);
    let lo = percentile(&raw, 0.01);
    let hi = percentile(&raw, 0.99);
    let intensity = point_index
        .iter()
        .map(|p| match p {
            None => 0,
            Some(i) => {
                let x = cloud[*i as usize].intensity;
                if hi > lo {
                    (((x - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
                } else {
                    255
                }
            }
        })
        .collect();

    Ok(LipImage {
        width: w,
        height: h,
        intensity,
        point_index,
        depth,
        filled: vec![false; n],
        pose: pose.clone(),
    })
}

/// Nearest-rank percentile of pre-sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Lower median of a small slice.
fn lower_median(values: &mut [u8]) -> u8 {
    values.sort_unstable();
    values[(values.len() - 1) / 2]
}

/// Fills holes with the median of valid 3x3 neighbours, then stretches the
/// valid pixels to the full 8-bit range. `point_index` is never touched.
pub fn fill_and_enhance(img: &LipImage) -> LipImage {
    let mut out = img.clone();
    let (w, h) = (img.width as i64, img.height as i64);
    if img.point_index.iter().all(Option::is_none) && !img.filled.iter().any(|&f| f) {
        return out;
    }
    let mut neigh = Vec::with_capacity(8);
    for _ in 0..FILL_PASSES {
        let valid: Vec<bool> = (0..out.intensity.len())
            .map(|o| out.point_index[o].is_some() || out.filled[o])
            .collect();
        let snapshot = out.intensity.clone();
        for y in 0..h {
            for x in 0..w {
                let o = (y * w + x) as usize;
                if valid[o] {
                    continue;
                }
                neigh.clear();
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let no = (ny * w + nx) as usize;
                        if valid[no] {
                            neigh.push(snapshot[no]);
                        }
                    }
                }
                if neigh.len() >= FILL_MIN_NEIGHBORS {
                    out.intensity[o] = lower_median(&mut neigh);
                    out.filled[o] = true;
                }
            }
        }
    }

    let valid_values = || {
        (0..out.intensity.len())
            .filter(|&o| out.point_index[o].is_some() || out.filled[o])
            .map(|o| out.intensity[o])
    };
    let lo = valid_values().min().unwrap_or(0);
    let hi = valid_values().max().unwrap_or(0);
    if hi > lo {
        let scale = 255.0 / (hi - lo) as f64;
        for o in 0..out.intensity.len() {
            if out.point_index[o].is_some() || out.filled[o] {
                out.intensity[o] = ((out.intensity[o] - lo) as f64 * scale).round() as u8;
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) fn lip_from_parts(
    width: u32,
    height: u32,
    intensity: Vec<u8>,
    point_index: Vec<Option<u32>>,
    pose: RigidTransform,
) -> LipImage {
    let n = (width * height) as usize;
    LipImage {
        width,
        height,
        intensity,
        depth: point_index
            .iter()
            .map(|p| if p.is_some() { 1.0 } else { f64::INFINITY })
            .collect(),
        point_index,
        filled: vec![false; n],
        pose,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{canonical_virtual_pose, Frame};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap()
    }

    fn camera_pose() -> RigidTransform {
        RigidTransform::identity(Frame::Lidar, Frame::Virtual)
    }

    #[test]
    fn single_point_on_axis() {
        let cloud = [LidarPoint::new(Vector3::new(0.0, 0.0, 5.0), 100.0)];
        let img = render_lip(&cloud, &camera_pose(), &k()).unwrap();
        assert_eq!(img.set_pixel_count(), 1);
        assert_eq!(img.point_index(32, 24), Some(0));
        assert_eq!(img.depth(32, 24), 5.0);
        assert_eq!(img.intensity(32, 24), 255);
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        let cloud = [
            LidarPoint::new(Vector3::new(0.0, 0.0, 3.0), 10.0),
            LidarPoint::new(Vector3::new(0.0, 0.0, 2.0), 20.0),
        ];
        let img = render_lip(&cloud, &camera_pose(), &k()).unwrap();
        assert_eq!(img.point_index(32, 24), Some(1));
        assert_eq!(img.depth(32, 24), 2.0);
    }

    #[test]
    fn depth_tie_goes_to_smaller_index() {
        let cloud = [
            LidarPoint::new(Vector3::new(0.0, 0.0, 2.0), 10.0),
            LidarPoint::new(Vector3::new(0.001, 0.0, 2.0), 20.0),
        ];
        let img = render_lip(&cloud, &camera_pose(), &k()).unwrap();
        assert_eq!(img.point_index(32, 24), Some(0));
    }

    #[test]
    fn empty_frustum_and_empty_cloud() {
        let cloud = [LidarPoint::new(Vector3::new(0.0, 0.0, -3.0), 10.0)];
        assert!(matches!(
            render_lip(&cloud, &camera_pose(), &k()),
            Err(LipError::EmptyFrustum { .. })
        ));
        assert!(matches!(render_lip(&[], &camera_pose(), &k()), Err(LipError::EmptyCloud)));
    }

    #[test]
    fn plane_back_references_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // a 10k-point plane 4 m ahead of the canonical virtual camera
        let cloud: Vec<LidarPoint> = (0..10_000)
            .map(|_| {
                LidarPoint::new(
                    Vector3::new(4.0, rng.random_range(-1.2..1.2), rng.random_range(-0.9..0.9)),
                    rng.random_range(0.0..200.0),
                )
            })
            .collect();
        let pose = canonical_virtual_pose();
        let img = render_lip(&cloud, &pose, &k()).unwrap();
        assert!(img.set_pixel_count() > 1000);
        for y in 0..img.height() {
            for x in 0..img.width() {
                if let Some(i) = img.point_index(x, y) {
                    let pc = pose.transform_point(&cloud[i as usize].position);
                    let px = project_point(&pc, &k()).unwrap();
                    assert_eq!(k().pixel_cell(&px), Some((x, y)));
                    assert!((img.depth(x, y) - pc.z).abs() < 1e-6);
                } else {
                    assert!(!img.is_filled(x, y));
                }
            }
        }
    }

    #[test]
    fn raising_depth_never_displaces_nearer_point() {
        let near = LidarPoint::new(Vector3::new(0.0, 0.0, 2.0), 10.0);
        for z in [2.5, 3.0, 10.0] {
            let cloud = [near, LidarPoint::new(Vector3::new(0.0, 0.0, z), 50.0)];
            let img = render_lip(&cloud, &camera_pose(), &k()).unwrap();
            assert_eq!(img.point_index(32, 24), Some(0));
        }
    }

    fn grid(values: [u8; 9], set: [bool; 9]) -> LipImage {
        lip_from_parts(
            3,
            3,
            values.to_vec(),
            set.iter().enumerate().map(|(i, &s)| s.then_some(i as u32)).collect(),
            camera_pose(),
        )
    }

    #[test]
    fn fills_interior_hole_with_neighbor_median() {
        // neighbours already span 0..255 so the stretch is the identity
        let img = grid(
            [0, 10, 20, 30, 0, 200, 210, 220, 255],
            [true, true, true, true, false, true, true, true, true],
        );
        let out = fill_and_enhance(&img);
        assert!(out.is_filled(1, 1));
        assert_eq!(out.point_index(1, 1), None);
        // sorted: 0 10 20 30 200 210 220 255 -> lower median 30
        assert_eq!(out.intensity(1, 1), 30);
        assert_eq!(out.point_indices(), img.point_indices());
    }

    #[test]
    fn no_holes_only_stretches() {
        let img = grid([50, 60, 70, 80, 90, 100, 110, 120, 130], [true; 9]);
        let out = fill_and_enhance(&img);
        assert_eq!(out.point_indices(), img.point_indices());
        assert_eq!(out.intensity(0, 0), 0);
        assert_eq!(out.intensity(2, 2), 255);
        assert_eq!(out.intensity(1, 1), 128);
        assert!(!(0..3).any(|y| (0..3).any(|x| out.is_filled(x, y))));
    }

    #[test]
    fn empty_image_unchanged() {
        let img = grid([0; 9], [false; 9]);
        assert_eq!(fill_and_enhance(&img), img);
    }

    #[test]
    fn sparse_hole_not_filled() {
        let img = grid(
            [0, 80, 0, 90, 0, 0, 255, 0, 0],
            [false, true, false, true, false, false, true, false, false],
        );
        let out = fill_and_enhance(&img);
        assert!(!out.is_filled(1, 1));
    }

    #[test]
    fn debug_export_round_trip() {
        let cloud = [
            LidarPoint::new(Vector3::new(0.0, 0.0, 5.0), 100.0),
            LidarPoint::new(Vector3::new(0.5, 0.2, 5.0), 10.0),
        ];
        let img = render_lip(&cloud, &camera_pose(), &k()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (png, idx) = (dir.path().join("lip.png"), dir.path().join("lip.idx"));
        img.write_debug(&png, &idx).unwrap();
        let map = read_index_map(&idx, img.width(), img.height()).unwrap();
        assert_eq!(map, img.point_indices());
        let gray = image::open(&png).unwrap().to_luma8();
        assert_eq!(gray.as_raw(), img.intensities());
        assert!(read_index_map(&idx, 10, 10).is_err());
    }

    #[test]
    fn nearest_set_pixel_search() {
        let cloud = [LidarPoint::new(Vector3::new(0.0, 0.0, 5.0), 100.0)];
        let img = render_lip(&cloud, &camera_pose(), &k()).unwrap();
        assert_eq!(img.nearest_set_pixel(&Vector2::new(34.0, 25.0), 3.0), Some((32, 24)));
        assert_eq!(img.nearest_set_pixel(&Vector2::new(36.0, 24.0), 3.0), None);
    }
}
