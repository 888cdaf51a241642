//! EuRoC ASL readers, TUM trajectory export, and Sim3-aligned trajectory
//! error.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::lie::{quat_to_rot, rot_to_quat, so3_log};
use crate::photometric::CameraIntrinsics;
use crate::propagation::ImuSample;
use crate::state::Extrinsics;
use crate::text::{csv_rows, f17, parse_floats, sig, KeyValues};
use crate::trajectory::{Pose, Trajectory};

/// Default association window between estimate and ground-truth stamps.
pub const ASSOCIATION_TOLERANCE: f64 = 0.01;

/// Files of one EuRoC ASL sequence.
#[derive(Debug, Clone)]
pub struct EurocLayout {
    pub imu: PathBuf,
    pub cam: PathBuf,
    pub groundtruth: PathBuf,
}

impl EurocLayout {
    /// Accepts either the sequence directory or its `mav0` child.
    pub fn new(dir: &Path) -> Self {
        let mav0 = if dir.join("mav0").is_dir() {
            dir.join("mav0")
        } else {
            dir.to_path_buf()
        };
        EurocLayout {
            imu: mav0.join("imu0/data.csv"),
            cam: mav0.join("cam0/data.csv"),
            groundtruth: mav0.join("state_groundtruth_estimate0/data.csv"),
        }
    }
}

fn nanos_to_secs(path: &Path, line: usize, field: &str) -> Result<f64> {
    let ns: u64 = field
        .parse()
        .map_err(|_| Error::parse(path, line, format!("`{field}` is not a nanosecond timestamp")))?;
    Ok((ns / 1_000_000_000) as f64 + (ns % 1_000_000_000) as f64 * 1e-9)
}

fn check_increasing(path: &Path, line: usize, prev: Option<f64>, t: f64) -> Result<()> {
    match prev {
        Some(p) if !(t > p) => Err(Error::StreamIntegrity(format!(
            "{}:{line}: timestamp {t} does not follow {p}",
            path.display()
        ))),
        _ => Ok(()),
    }
}

/// Rows `timestamp[ns], wx, wy, wz, ax, ay, az`.
pub fn read_euroc_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let mut out: Vec<ImuSample> = Vec::new();
    for (line, fields) in csv_rows(path)? {
        if fields.len() != 7 {
            return Err(Error::parse(
                path,
                line,
                format!("expected 7 fields, found {}", fields.len()),
            ));
        }
        let t = nanos_to_secs(path, line, &fields[0])?;
        let v = parse_floats(path, line, &fields[1..], 6)?;
        check_increasing(path, line, out.last().map(|s| s.t), t)?;
        out.push(ImuSample {
            t,
            gyro: Vector3::new(v[0], v[1], v[2]),
            accel: Vector3::new(v[3], v[4], v[5]),
        });
    }
    Ok(out)
}

fn secs_to_nanos(t: f64) -> Result<u64> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "timestamp {t} s has no nanosecond representation"
        )));
    }
    Ok((t * 1e9).round() as u64)
}

fn write_rows(path: &Path, header: &str, rows: impl Iterator<Item = Result<String>>) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "{header}").map_err(|e| Error::io(ctx(), e))?;
    for row in rows {
        writeln!(out, "{}", row?).map_err(|e| Error::io(ctx(), e))?;
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}

/// Same layout [`read_euroc_imu`] accepts, values at 17 significant digits.
pub fn write_euroc_imu(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let header = "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],\
                  a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]";
    write_rows(
        path,
        header,
        samples.iter().map(|s| {
            let vals: Vec<String> = s.gyro.iter().chain(s.accel.iter()).map(|v| f17(*v)).collect();
            Ok(format!("{},{}", secs_to_nanos(s.t)?, vals.join(",")))
        }),
    )
}

/// Full 17-column ground-truth rows; missing velocity or biases are
/// written as zeros.
pub fn write_groundtruth_states(path: &Path, states: &[GroundTruthState]) -> Result<()> {
    let header = "#timestamp,p_RS_R_x [m],p_RS_R_y [m],p_RS_R_z [m],q_RS_w [],q_RS_x [],q_RS_y [],q_RS_z [],\
                  v_RS_R_x [m s^-1],v_RS_R_y [m s^-1],v_RS_R_z [m s^-1],b_w_RS_S_x [rad s^-1],b_w_RS_S_y [rad s^-1],\
                  b_w_RS_S_z [rad s^-1],b_a_RS_S_x [m s^-2],b_a_RS_S_y [m s^-2],b_a_RS_S_z [m s^-2]";
    write_rows(
        path,
        header,
        states.iter().map(|s| {
            let q = rot_to_quat(&s.pose.rot);
            let zero = Vector3::zeros();
            let vals: Vec<String> = s
                .pose
                .pos
                .iter()
                .chain(q.iter())
                .chain(s.vel.as_ref().unwrap_or(&zero).iter())
                .chain(s.gyro_bias.as_ref().unwrap_or(&zero).iter())
                .chain(s.accel_bias.as_ref().unwrap_or(&zero).iter())
                .map(|v| f17(*v))
                .collect();
            Ok(format!("{},{}", secs_to_nanos(s.pose.t)?, vals.join(",")))
        }),
    )
}

/// Rows `timestamp[ns], filename`.
pub fn read_euroc_cam_index(path: &Path) -> Result<Vec<(f64, String)>> {
    let mut out: Vec<(f64, String)> = Vec::new();
    for (line, fields) in csv_rows(path)? {
        if fields.len() != 2 {
            return Err(Error::parse(
                path,
                line,
                format!("expected 2 fields, found {}", fields.len()),
            ));
        }
        let t = nanos_to_secs(path, line, &fields[0])?;
        check_increasing(path, line, out.last().map(|r| r.0), t)?;
        out.push((t, fields[1].clone()));
    }
    Ok(out)
}

/// One ground-truth row: pose plus the velocity and biases when present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthState {
    pub pose: Pose,
    pub vel: Option<Vector3<f64>>,
    pub gyro_bias: Option<Vector3<f64>>,
    pub accel_bias: Option<Vector3<f64>>,
}

/// Rows `timestamp[ns], px, py, pz, qw, qx, qy, qz[, vx, vy, vz, bwx, bwy,
/// bwz, bax, bay, baz]`.
pub fn read_groundtruth_states(path: &Path) -> Result<Vec<GroundTruthState>> {
    let mut out: Vec<GroundTruthState> = Vec::new();
    for (line, fields) in csv_rows(path)? {
        if fields.len() < 8 {
            return Err(Error::parse(
                path,
                line,
                format!("expected at least 8 fields, found {}", fields.len()),
            ));
        }
        let t = nanos_to_secs(path, line, &fields[0])?;
        let v = parse_floats(path, line, &fields[1..], fields.len() - 1)?;
        let qn = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
        if (qn - 1.0).abs() > 1e-3 {
            return Err(Error::parse(path, line, format!("quaternion norm {qn} is not unit")));
        }
        check_increasing(path, line, out.last().map(|s| s.pose.t), t)?;
        let vec_at = |i: usize| (v.len() >= i + 3).then(|| Vector3::new(v[i], v[i + 1], v[i + 2]));
        out.push(GroundTruthState {
            pose: Pose {
                t,
                rot: quat_to_rot(v[3], v[4], v[5], v[6]),
                pos: Vector3::new(v[0], v[1], v[2]),
            },
            vel: vec_at(7),
            gyro_bias: vec_at(10),
            accel_bias: vec_at(13),
        });
    }
    Ok(out)
}

pub fn read_groundtruth(path: &Path) -> Result<Trajectory> {
    Trajectory::new(read_groundtruth_states(path)?.into_iter().map(|s| s.pose).collect())
}

/// Lines `t x y z qx qy qz qw`, nine significant digits (time keeps nine
/// decimals).
pub fn write_tum(traj: &Trajectory, path: &Path) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut out = std::io::BufWriter::new(file);
    for p in traj.poses() {
        let [w, x, y, z] = rot_to_quat(&p.rot);
        let vals = [p.pos.x, p.pos.y, p.pos.z, x, y, z, w].map(|v| sig(v, 9));
        writeln!(out, "{:.9} {}", p.t, vals.join(" ")).map_err(|e| Error::io(ctx(), e))?;
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn read_tum(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut poses = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        let v = parse_floats(path, i + 1, &fields, 8)?;
        poses.push(Pose {
            t: v[0],
            rot: quat_to_rot(v[7], v[4], v[5], v[6]),
            pos: Vector3::new(v[1], v[2], v[3]),
        });
    }
    Trajectory::new(poses)
}

/// Similarity transform `p ↦ s·C·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Transform {
    pub scale: f64,
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Sim3Transform {
            scale: 1.0,
            rot: Matrix3::identity(),
            trans: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Pose) -> Pose {
        Pose {
            t: p.t,
            rot: self.rot * p.rot,
            pos: self.rot * p.pos * self.scale + self.trans,
        }
    }

    pub fn apply_all(&self, traj: &Trajectory) -> Trajectory {
        Trajectory::new(traj.poses().iter().map(|p| self.apply(p)).collect()).expect("timestamps are unchanged")
    }
}

/// Pairs each estimate pose with the nearest ground-truth pose within `tol`.
pub fn associate<'a>(est: &'a Trajectory, gt: &'a Trajectory, tol: f64) -> Vec<(&'a Pose, &'a Pose)> {
    est.poses()
        .iter()
        .filter_map(|p| gt.nearest(p.t, tol).map(|g| (p, g)))
        .collect()
}

/// Closed-form least-squares similarity taking estimated positions onto
/// ground truth (Umeyama), over timestamp-associated pairs.
pub fn sim3_align(est: &Trajectory, gt: &Trajectory) -> Result<Sim3Transform> {
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE);
    if pairs.len() < 3 {
        return Err(Error::Alignment(format!(
            "{} associated pairs, need at least 3",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mu_x = pairs.iter().map(|(e, _)| e.pos).sum::<Vector3<f64>>() / n;
    let mu_y = pairs.iter().map(|(_, g)| g.pos).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut spread_x = Matrix3::zeros();
    for (e, g) in &pairs {
        let (dx, dy) = (e.pos - mu_x, g.pos - mu_y);
        cov += dy * dx.transpose();
        spread_x += dx * dx.transpose();
    }
    cov /= n;
    spread_x /= n;
    let var_x = spread_x.trace();

    let mut spread = spread_x.symmetric_eigenvalues();
    spread.as_mut_slice().sort_by(f64::total_cmp);
    if !(spread[2] > 0.0) || spread[1] <= 1e-12 * spread[2] {
        return Err(Error::Alignment(
            "estimated positions are collinear or coincident".into(),
        ));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rot = u * s * v_t;
    // Singular values come sorted, so the sign flip lands on the smallest.
    let d = svd.singular_values;
    let scale = (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_x;
    let trans = mu_y - rot * mu_x * scale;
    Ok(Sim3Transform { scale, rot, trans })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteReport {
    pub trans_rmse: f64,
    pub rot_rmse_deg: f64,
    pub pairs: usize,
}

/// Translation RMSE (m) and geodesic rotation RMSE (deg) of the aligned
/// estimate.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, transform: &Sim3Transform) -> Result<AteReport> {
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE);
    if pairs.is_empty() {
        return Err(Error::Alignment("no associated pairs".into()));
    }
    let (mut se_t, mut se_r) = (0.0, 0.0);
    for (e, g) in &pairs {
        let a = transform.apply(e);
        se_t += (a.pos - g.pos).norm_squared();
        se_r += so3_log(&(g.rot.transpose() * a.rot)).norm_squared();
    }
    let n = pairs.len() as f64;
    Ok(AteReport {
        trans_rmse: (se_t / n).sqrt(),
        rot_rmse_deg: (se_r / n).sqrt().to_degrees(),
        pairs: pairs.len(),
    })
}

/// Aligns and scores in one step.
pub fn evaluate(est: &Trajectory, gt: &Trajectory) -> Result<(Sim3Transform, AteReport)> {
    let s = sim3_align(est, gt)?;
    Ok((s, ate_rmse(est, gt, &s)?))
}

/// Camera intrinsics and extrinsics from flat `key = value` text: `fx`, `fy`,
/// `cx`, `cy`, `width`, `height`, `ext_rot` (quaternion w, x, y, z) and
/// `ext_trans` (x, y, z).
pub fn read_calibration(kv: &KeyValues) -> Result<(CameraIntrinsics, Extrinsics)> {
    let mut k = CameraIntrinsics::default();
    let req = |key: &str| {
        kv.f64(key)?
            .ok_or_else(|| Error::Config(format!("calibration is missing `{key}`")))
    };
    k.fx = req("fx")?;
    k.fy = req("fy")?;
    k.cx = req("cx")?;
    k.cy = req("cy")?;
    k.width = req("width")? as usize;
    k.height = req("height")? as usize;
    k.validate()?;
    let mut ext = Extrinsics::default();
    if let Some([w, x, y, z]) = kv.array::<4>("ext_rot")? {
        ext.rot = quat_to_rot(w, x, y, z);
    }
    if let Some(t) = kv.array::<3>("ext_trans")? {
        ext.trans = Vector3::from(t);
    }
    Ok((k, ext))
}

pub fn calibration_to_key_values(k: &CameraIntrinsics, ext: &Extrinsics) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.insert("fx", k.fx);
    kv.insert("fy", k.fy);
    kv.insert("cx", k.cx);
    kv.insert("cy", k.cy);
    kv.insert("width", k.width);
    kv.insert("height", k.height);
    let q = rot_to_quat(&ext.rot);
    kv.insert("ext_rot", format!("{}, {}, {}, {}", q[0], q[1], q[2], q[3]));
    kv.insert(
        "ext_trans",
        format!("{}, {}, {}", ext.trans.x, ext.trans.y, ext.trans.z),
    );
    kv
}
