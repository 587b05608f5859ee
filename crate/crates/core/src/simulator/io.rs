//! Sequence directory layout:
//!
//! ```text
//! meta.json       radar config, extrinsics, rates, frame count
//! ras_%05d.f32    range-azimuth power, row-major little-endian f32, H x W
//! dop_%05d.f32    per-pixel Doppler, same layout
//! imu.csv         t,ax,ay,az,wx,wy,wz
//! gt_poses.csv    t,x,y,yaw
//! gt_vel.csv      t,vx,vy,vz        (body-frame ground-truth velocity)
//! gt_map.csv      x,y               (static landmark ground truth)
//! ```
//!
//! All units SI, angles in radians. Matrices are stored single-precision and
//! widened to f64 on load.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Frame, RadarConfig, Sequence, TimedPose};
use crate::error::{Error, Result};
use crate::geom::Se2;
use crate::mat::Mat;
use crate::preintegration::ImuSample;
use crate::velocity::Extrinsics;

#[derive(Serialize, Deserialize)]
struct MetaFile {
    version: u32,
    radar: RadarConfig,
    extrinsics: Extrinsics,
    radar_rate: f64,
    imu_rate: f64,
    frame_count: usize,
}

const META_VERSION: u32 = 1;

fn write_f32_matrix(path: &Path, m: &Mat) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.data().len() * 4);
    for &v in m.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Mat> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let expect = rows * cols * 4;
    if bytes.len() != expect {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: format!(
                "expected {expect} bytes ({rows}x{cols} little-endian f32), found {}",
                bytes.len()
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Mat::from_vec(rows, cols, data)
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut write = |s: &str| -> Result<()> {
        f.write_all(s.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    };
    write(header)?;
    write("\n")?;
    for row in rows {
        write(&row)?;
        write("\n")?;
    }
    Ok(())
}

fn parse_csv(path: &Path, want_cols: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue; // header
        }
        let mut row = Vec::with_capacity(want_cols);
        for field in line.split(',') {
            row.push(field.trim().parse::<f64>().map_err(|_| Error::Format {
                path: path.display().to_string(),
                msg: format!("line {}: cannot parse `{field}` as a number", lineno + 1),
            })?);
        }
        if row.len() != want_cols {
            return Err(Error::Format {
                path: path.display().to_string(),
                msg: format!("line {}: expected {want_cols} columns, found {}", lineno + 1, row.len()),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let meta = MetaFile {
        version: META_VERSION,
        radar: seq.radar.clone(),
        extrinsics: seq.extrinsics.clone(),
        radar_rate: seq.radar_rate,
        imu_rate: seq.imu_rate,
        frame_count: seq.frames.len(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format { path: meta_path.display().to_string(), msg: e.to_string() })?;
    fs::write(&meta_path, json).map_err(|e| Error::io(meta_path.display().to_string(), e))?;

    for (k, frame) in seq.frames.iter().enumerate() {
        write_f32_matrix(&dir.join(format!("ras_{k:05}.f32")), &frame.ras)?;
        write_f32_matrix(&dir.join(format!("dop_{k:05}.f32")), &frame.doppler)?;
    }
    write_csv(
        &dir.join("imu.csv"),
        "t,ax,ay,az,wx,wy,wz",
        seq.imu.iter().map(|s| {
            format!(
                "{},{},{},{},{},{},{}",
                s.t,
                s.specific_force[0],
                s.specific_force[1],
                s.specific_force[2],
                s.angular_rate[0],
                s.angular_rate[1],
                s.angular_rate[2]
            )
        }),
    )?;
    write_csv(
        &dir.join("gt_poses.csv"),
        "t,x,y,yaw",
        seq.gt_poses
            .iter()
            .map(|p| format!("{},{},{},{}", p.t, p.pose.x, p.pose.y, p.pose.yaw)),
    )?;
    write_csv(
        &dir.join("gt_vel.csv"),
        "t,vx,vy,vz",
        seq.gt_poses
            .iter()
            .zip(&seq.gt_velocity)
            .map(|(p, v)| format!("{},{},{},{}", p.t, v[0], v[1], v[2])),
    )?;
    write_csv(
        &dir.join("gt_map.csv"),
        "x,y",
        seq.gt_map.iter().map(|p| format!("{},{}", p[0], p[1])),
    )?;
    Ok(())
}

pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let meta_path = dir.join("meta.json");
    let text =
        fs::read_to_string(&meta_path).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: MetaFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: meta_path.display().to_string(),
        msg: e.to_string(),
    })?;
    if meta.version != META_VERSION {
        return Err(Error::Format {
            path: meta_path.display().to_string(),
            msg: format!("unsupported version {}", meta.version),
        });
    }
    meta.radar.validate()?;
    meta.extrinsics.validate()?;

    let poses = parse_csv(&dir.join("gt_poses.csv"), 4)?;
    if poses.len() != meta.frame_count {
        return Err(Error::Format {
            path: dir.join("gt_poses.csv").display().to_string(),
            msg: format!(
                "{} poses for {} frames declared in meta.json",
                poses.len(),
                meta.frame_count
            ),
        });
    }
    let gt_poses: Vec<TimedPose> = poses
        .iter()
        .map(|r| TimedPose {
            t: r[0],
            pose: Se2 { x: r[1], y: r[2], yaw: r[3] },
        })
        .collect();

    let vels = parse_csv(&dir.join("gt_vel.csv"), 4)?;
    if vels.len() != meta.frame_count {
        return Err(Error::Format {
            path: dir.join("gt_vel.csv").display().to_string(),
            msg: format!("{} rows for {} frames", vels.len(), meta.frame_count),
        });
    }
    let gt_velocity = vels.iter().map(|r| [r[1], r[2], r[3]]).collect();

    let imu_rows = parse_csv(&dir.join("imu.csv"), 7)?;
    let imu: Vec<ImuSample> = imu_rows
        .iter()
        .map(|r| ImuSample {
            t: r[0],
            specific_force: [r[1], r[2], r[3]],
            angular_rate: [r[4], r[5], r[6]],
        })
        .collect();

    let map_rows = parse_csv(&dir.join("gt_map.csv"), 2)?;
    let gt_map = map_rows.iter().map(|r| [r[0], r[1]]).collect();

    let (h, w) = (meta.radar.range_bins, meta.radar.azimuth_bins);
    let mut frames = Vec::with_capacity(meta.frame_count);
    for k in 0..meta.frame_count {
        let ras = read_f32_matrix(&dir.join(format!("ras_{k:05}.f32")), h, w)?;
        let doppler = read_f32_matrix(&dir.join(format!("dop_{k:05}.f32")), h, w)?;
        frames.push(Frame {
            t: gt_poses[k].t,
            ras,
            doppler,
            eta: meta.radar.eta.clone(),
        });
    }

    Ok(Sequence {
        radar: meta.radar,
        extrinsics: meta.extrinsics,
        radar_rate: meta.radar_rate,
        imu_rate: meta.imu_rate,
        frames,
        imu,
        gt_poses,
        gt_velocity,
        gt_map,
    })
}
