//! Pinhole view synthesis and the photometric reconstruction losses.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Points closer than this to the camera plane do not project.
pub const MIN_DEPTH: f64 = 1e-6;

/// Weight of the SSIM term in the photometric error.
pub const DEFAULT_ALPHA: f64 = 0.15;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            fx: 120.0,
            fy: 120.0,
            cx: 79.5,
            cy: 59.5,
            width: 160,
            height: 120,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cy > 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if !ok {
            return Err(Error::Config(format!("invalid camera intrinsics {self:?}")));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Rigid transform applied to points, `p ↦ rot·p + trans`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
}

impl RelativePose {
    pub fn identity() -> Self {
        RelativePose {
            rot: Matrix3::identity(),
            trans: Vector3::zeros(),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rot.transpose();
        RelativePose {
            rot: rt,
            trans: -(rt * self.trans),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RelativePose) -> Self {
        RelativePose {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * p + self.trans
    }
}

/// Single-channel image, intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "image data has {} values for {width}x{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Image { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y).clamp(0.0, 1.0))
            .collect();
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates; `None` outside
    /// `[0, width-1] × [0, height-1]`.
    pub fn sample(&self, u: &Vector2<f64>) -> Option<f64> {
        let (w, h) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(u.x >= 0.0 && u.y >= 0.0 && u.x <= w && u.y <= h) {
            return None;
        }
        let (x0, y0) = (u.x.floor() as usize, u.y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (u.x - x0 as f64, u.y - y0 as f64);
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::InvalidInput(format!(
                "image shapes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Per-pixel depth along the optical axis, meters. Non-positive or
/// non-finite entries mark invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "depth data has {} values for {width}x{height}",
                data.len()
            )));
        }
        Ok(DepthMap { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Valid depth at a pixel.
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let d = self.data[y * self.width + x];
        (d > 0.0 && d.is_finite()).then_some(d)
    }
}

/// Per-pixel validity, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "mask has {} values for {width}x{height}",
                data.len()
            )));
        }
        Ok(Mask { width, height, data })
    }

    pub fn full(width: usize, height: usize, value: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// `π(p) = (fx·x/z + cx, fy·y/z + cy)`; `None` at or behind the camera plane.
pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> Option<Vector2<f64>> {
    (p.z > MIN_DEPTH).then(|| Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Point at depth `d` along the ray through pixel `u`; `None` for `d ≤ 0`.
pub fn backproject(u: &Vector2<f64>, d: f64, k: &CameraIntrinsics) -> Option<Vector3<f64>> {
    (d > 0.0 && d.is_finite()).then(|| Vector3::new((u.x - k.cx) / k.fx, (u.y - k.cy) / k.fy, 1.0) * d)
}

fn check_grid(k: &CameraIntrinsics, width: usize, height: usize, what: &str) -> Result<()> {
    if (width, height) != (k.width, k.height) {
        return Err(Error::InvalidInput(format!(
            "{what} is {width}x{height} but the camera is {}x{}",
            k.width, k.height
        )));
    }
    Ok(())
}

/// Reconstructs the target view from `source`: each target pixel is lifted
/// with `depth_t`, moved into the source frame by `t_st` and sampled
/// bilinearly. Invalid pixels read zero and are cleared in the mask.
pub fn warp(source: &Image, depth_t: &DepthMap, t_st: &RelativePose, k: &CameraIntrinsics) -> Result<(Image, Mask)> {
    check_grid(k, source.width, source.height, "source image")?;
    check_grid(k, depth_t.width, depth_t.height, "target depth")?;
    let n = k.width * k.height;
    let mut data = vec![0.0; n];
    let mut valid = vec![false; n];
    for y in 0..k.height {
        for x in 0..k.width {
            let sampled = depth_t
                .get(x, y)
                .and_then(|d| backproject(&Vector2::new(x as f64, y as f64), d, k))
                .and_then(|p| project(&t_st.transform(&p), k))
                .and_then(|u| source.sample(&u));
            if let Some(v) = sampled {
                data[y * k.width + x] = v;
                valid[y * k.width + x] = true;
            }
        }
    }
    Ok((
        Image {
            width: k.width,
            height: k.height,
            data,
        },
        Mask {
            width: k.width,
            height: k.height,
            data: valid,
        },
    ))
}

/// Per-pixel SSIM loss `(1 - SSIM)/2` over 3×3 windows, edges clamped.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    a.same_shape(b)?;
    let (w, h) = (a.width, a.height);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in [-1isize, 0, 1] {
                for dx in [-1isize, 0, 1] {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let (va, vb) = (a.get(xx, yy), b.get(xx, yy));
                    ma += va;
                    mb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let n = 9.0;
            let (ma, mb) = (ma / n, mb / n);
            let var_a = saa / n - ma * ma;
            let var_b = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            let ssim = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
            out.push(((1.0 - ssim) * 0.5).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Per-pixel `(1-α)·|a-b| + α·L_SSIM`.
pub fn photometric_error_map(recon: &Image, target: &Image, alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside [0, 1]")));
    }
    let ssim = ssim_map(recon, target)?;
    Ok(recon
        .data
        .iter()
        .zip(&target.data)
        .zip(ssim)
        .map(|((r, t), s)| (1.0 - alpha) * (r - t).abs() + alpha * s)
        .collect())
}

fn masked_mean(values: impl Iterator<Item = Option<f64>>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedLoss("no valid pixels".into()));
    }
    Ok(sum / n as f64)
}

/// Mean photometric error over the valid pixels of `mask`.
pub fn photometric_loss(recon: &Image, target: &Image, mask: &Mask, alpha: f64) -> Result<f64> {
    let err = photometric_error_map(recon, target, alpha)?;
    if mask.data.len() != err.len() {
        return Err(Error::InvalidInput("mask shape does not match the images".into()));
    }
    masked_mean(err.iter().zip(&mask.data).map(|(e, m)| m.then_some(*e)))
}

/// Mean over pixels of the smaller of the two reconstruction errors. A pixel
/// valid in only one reconstruction takes that one; pixels valid in neither
/// are skipped.
pub fn min_reconstruction_loss(
    target: &Image,
    prev: (&Image, &Mask),
    next: (&Image, &Mask),
    alpha: f64,
) -> Result<f64> {
    let e_prev = photometric_error_map(prev.0, target, alpha)?;
    let e_next = photometric_error_map(next.0, target, alpha)?;
    if prev.1.data.len() != e_prev.len() || next.1.data.len() != e_next.len() {
        return Err(Error::InvalidInput("mask shape does not match the images".into()));
    }
    let per_pixel = (0..e_prev.len()).map(|i| match (prev.1.data[i], next.1.data[i]) {
        (true, true) => Some(e_prev[i].min(e_next[i])),
        (true, false) => Some(e_prev[i]),
        (false, true) => Some(e_next[i]),
        (false, false) => None,
    });
    masked_mean(per_pixel)
}

/// Writes an 8-bit binary PGM (P5), intensities scaled by 255.
pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    let bytes: Vec<u8> = img.data.iter().map(|v| (v * 255.0).round() as u8).collect();
    let file = std::fs::File::create(path).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            &bytes,
            img.width as u32,
            img.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| Error::InvalidInput(format!("encoding {}: {e}", path.display())))
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let decoded = image::load(std::io::BufReader::new(file), image::ImageFormat::Pnm)
        .map_err(|e| Error::parse(path, 1, format!("not a PGM image: {e}")))?
        .to_luma8();
    let (w, h) = decoded.dimensions();
    let data = decoded.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::new(w as usize, h as usize, data)
}

const DEPTH_MAGIC: &[u8; 8] = b"RVIODPT1";

/// Depth grid as little-endian `f32` after a 16-byte header: 8-byte magic,
/// `u32` width, `u32` height.
pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * depth.data.len());
    buf.extend_from_slice(DEPTH_MAGIC);
    buf.extend_from_slice(&(depth.width as u32).to_le_bytes());
    buf.extend_from_slice(&(depth.height as u32).to_le_bytes());
    for d in &depth.data {
        buf.extend_from_slice(&(*d as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if buf.len() < 16 || &buf[..8] != DEPTH_MAGIC {
        return Err(Error::parse(path, 1, "missing depth-map header"));
    }
    let word = |at: usize| u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
    let (w, h) = (word(8), word(12));
    if buf.len() != 16 + 4 * w * h {
        return Err(Error::parse(
            path,
            1,
            format!("expected {} bytes of depth data for {w}x{h}", 4 * w * h),
        ));
    }
    let data = buf[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    DepthMap::new(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::so3_exp;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }

    fn small_k() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 40.0,
            fy: 40.0,
            cx: 15.5,
            cy: 11.5,
            width: 32,
            height: 24,
        }
    }

    fn pattern(k: &CameraIntrinsics) -> Image {
        Image::from_fn(k.width, k.height, |x, y| {
            0.5 + 0.2 * (x as f64 * 0.3).sin() + 0.2 * (y as f64 * 0.2 + 1.0).cos()
        })
    }

    #[test]
    fn projection_examples() {
        let k = k();
        assert_eq!(
            project(&Vector3::new(0.0, 0.0, 1.0), &k).unwrap(),
            Vector2::new(320.0, 240.0)
        );
        assert_eq!(project(&Vector3::new(1.0, 0.0, 2.0), &k).unwrap().x, 370.0);
        assert!(project(&Vector3::new(1.0, 0.0, 0.0), &k).is_none());
        assert_eq!(
            backproject(&Vector2::new(320.0, 240.0), 2.0, &k).unwrap(),
            Vector3::new(0.0, 0.0, 2.0)
        );
        assert!(backproject(&Vector2::new(1.0, 1.0), 0.0, &k).is_none());
    }

    #[test]
    fn projection_round_trip() {
        let k = k();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let u = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let d = rng.random_range(0.1..50.0);
            let back = project(&backproject(&u, d, &k).unwrap(), &k).unwrap();
            assert_abs_diff_eq!(back, u, epsilon = 1e-10);
        }
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let k = small_k();
        let src = pattern(&k);
        let depth = DepthMap::new(k.width, k.height, vec![2.5; k.width * k.height]).unwrap();
        let (out, mask) = warp(&src, &depth, &RelativePose::identity(), &k).unwrap();
        assert_eq!(mask.count(), k.width * k.height);
        assert_abs_diff_eq!(out.data()[..], src.data()[..], epsilon = 1e-12);
    }

    #[test]
    fn translation_past_the_scene_invalidates_everything() {
        let k = small_k();
        let depth = DepthMap::new(k.width, k.height, vec![2.0; k.width * k.height]).unwrap();
        let t = RelativePose {
            rot: Matrix3::identity(),
            trans: Vector3::new(0.0, 0.0, -3.0),
        };
        let (_, mask) = warp(&pattern(&k), &depth, &t, &k).unwrap();
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn warp_commutes_with_intensity_offset() {
        let k = small_k();
        let a = Image::from_fn(k.width, k.height, |x, y| 0.3 + 0.2 * ((x * y) as f64 * 0.01).sin());
        let shifted = Image::from_fn(k.width, k.height, |x, y| a.get(x, y) + 0.25);
        let depth = DepthMap::new(k.width, k.height, vec![3.0; k.width * k.height]).unwrap();
        let t = RelativePose {
            rot: so3_exp(&Vector3::new(0.01, -0.02, 0.03)),
            trans: Vector3::new(0.05, 0.02, 0.1),
        };
        let (wa, ma) = warp(&a, &depth, &t, &k).unwrap();
        let (ws, _) = warp(&shifted, &depth, &t, &k).unwrap();
        for i in 0..ma.data().len() {
            if ma.data()[i] {
                assert_abs_diff_eq!(ws.data()[i], wa.data()[i] + 0.25, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ssim_examples() {
        let k = small_k();
        let a = pattern(&k);
        assert!(ssim_map(&a, &a).unwrap().iter().all(|v| v.abs() < 1e-12));

        let c = 0.2;
        let flat_a = Image::from_fn(8, 8, |_, _| c);
        let flat_b = Image::from_fn(8, 8, |_, _| c + 0.5);
        let d = c + 0.5;
        let ssim = (2.0 * c * d + SSIM_C1) / (c * c + d * d + SSIM_C1);
        let expected = (1.0 - ssim) / 2.0;
        for v in ssim_map(&flat_a, &flat_b).unwrap() {
            assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        }

        let b = Image::from_fn(k.width, k.height, |x, y| {
            (a.get(x, y) * 0.7 + 0.1 * (x % 3) as f64).min(1.0)
        });
        assert_eq!(ssim_map(&a, &b).unwrap(), ssim_map(&b, &a).unwrap());
    }

    #[test]
    fn loss_degenerate_alphas() {
        let k = small_k();
        let a = pattern(&k);
        let b = Image::from_fn(k.width, k.height, |x, y| {
            (a.get(x, y) + 0.05 * ((x + y) % 2) as f64).min(1.0)
        });
        let mut valid = vec![true; k.width * k.height];
        valid.iter_mut().step_by(3).for_each(|v| *v = false);
        let mask = Mask::new(k.width, k.height, valid.clone()).unwrap();

        assert_eq!(photometric_loss(&a, &a, &mask, DEFAULT_ALPHA).unwrap(), 0.0);

        let l1: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .zip(&valid)
            .filter(|(_, m)| **m)
            .map(|((x, y), _)| (x - y).abs())
            .collect();
        let direct = l1.iter().sum::<f64>() / l1.len() as f64;
        assert_abs_diff_eq!(photometric_loss(&a, &b, &mask, 0.0).unwrap(), direct, epsilon = 1e-15);

        let s = ssim_map(&a, &b).unwrap();
        let ss: Vec<f64> = s.iter().zip(&valid).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
        let direct = ss.iter().sum::<f64>() / ss.len() as f64;
        assert_abs_diff_eq!(photometric_loss(&a, &b, &mask, 1.0).unwrap(), direct, epsilon = 1e-15);

        let empty = Mask::full(k.width, k.height, false);
        assert!(matches!(
            photometric_loss(&a, &b, &empty, 0.5),
            Err(Error::UndefinedLoss(_))
        ));
    }

    #[test]
    fn min_loss_properties() {
        let k = small_k();
        let t = pattern(&k);
        let other = Image::from_fn(k.width, k.height, |x, y| 1.0 - t.get(x, y));
        let full = Mask::full(k.width, k.height, true);
        let half = Mask::new(k.width, k.height, (0..k.width * k.height).map(|i| i % 2 == 0).collect()).unwrap();

        assert_eq!(
            min_reconstruction_loss(&t, (&t, &full), (&other, &full), 0.15).unwrap(),
            0.0
        );
        let m = min_reconstruction_loss(&t, (&other, &half), (&t, &full), 0.15).unwrap();
        assert_eq!(m, 0.0);
        let none = Mask::full(k.width, k.height, false);
        assert!(min_reconstruction_loss(&t, (&t, &none), (&t, &none), 0.15).is_err());
    }

    #[test]
    fn min_loss_bounded_by_single_sources() {
        let k = small_k();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let full = Mask::full(k.width, k.height, true);
        for _ in 0..20 {
            let mut noisy = || Image::from_fn(k.width, k.height, |_, _| rng.random_range(0.0..1.0));
            let (t, a, b) = (noisy(), noisy(), noisy());
            let m = min_reconstruction_loss(&t, (&a, &full), (&b, &full), 0.15).unwrap();
            let la = photometric_loss(&a, &t, &full, 0.15).unwrap();
            let lb = photometric_loss(&b, &t, &full, 0.15).unwrap();
            assert!(m <= la.min(lb) + 1e-12);
        }
    }

    #[test]
    fn pgm_and_depth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let k = small_k();
        let img = Image::from_fn(k.width, k.height, |x, y| ((x * 7 + y * 3) % 256) as f64 / 255.0);
        let p = dir.path().join("a.pgm");
        write_pgm(&p, &img).unwrap();
        assert_eq!(&std::fs::read(&p).unwrap()[..2], b"P5");
        assert_eq!(read_pgm(&p).unwrap(), img);

        let depth = DepthMap::new(3, 2, vec![1.5, 2.0, -1.0, 0.25, 8.0, 3.0]).unwrap();
        let p = dir.path().join("a.depth");
        write_depth(&p, &depth).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16 + 24);
        assert_eq!(read_depth(&p).unwrap(), depth);
        std::fs::write(&p, b"garbage").unwrap();
        assert!(read_depth(&p).is_err());
    }
}
