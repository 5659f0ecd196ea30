//! On-disk dataset: one directory per sequence.
//!
//! ```text
//! seq_0000/
//!   manifest.toml      scene spec, world config
//!   poses.csv          frame,x,y,yaw (world frame)
//!   occ_00.txt         per-frame occupancy
//! ```
//!
//! Occupancy files start with a `#` header carrying the grid, followed by one
//! `ix iy iz label` line per occupied cell in index order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Pose, SparseOccupancy};
use crate::world::{SceneSequence, SceneSpec, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub world: WorldConfig,
    pub scene: SceneSpec,
}

pub fn format_occupancy(occ: &SparseOccupancy, grid: &GridSpec<f64>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# origin {:?} {:?} {:?} voxel {:?} dims {} {} {}",
        grid.origin[0], grid.origin[1], grid.origin[2], grid.voxel_size, grid.dims[0], grid.dims[1], grid.dims[2]
    );
    for (c, l) in occ.iter() {
        let _ = writeln!(s, "{} {} {} {}", c[0], c[1], c[2], l);
    }
    s
}

pub fn parse_occupancy(text: &str, n_classes: usize) -> Result<(SparseOccupancy, GridSpec<f64>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty occupancy file".into()))?;
    let tok: Vec<&str> = header.split_whitespace().collect();
    if tok.len() != 11 || tok[0] != "#" || tok[1] != "origin" || tok[5] != "voxel" || tok[7] != "dims" {
        return Err(Error::Parse(format!("bad occupancy header: {header}")));
    }
    let f = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("header: {e}")));
    let u = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("occupancy: {e}")));
    let grid = GridSpec::new([f(tok[2])?, f(tok[3])?, f(tok[4])?], f(tok[6])?, [u(tok[8])?, u(tok[9])?, u(tok[10])?])?;
    let mut cells = Vec::new();
    for line in lines {
        let v: Vec<&str> = line.split_whitespace().collect();
        if v.is_empty() {
            continue;
        }
        if v.len() != 4 {
            return Err(Error::Parse(format!("bad occupancy line: {line}")));
        }
        cells.push(([u(v[0])?, u(v[1])?, u(v[2])?], u(v[3])?));
    }
    Ok((SparseOccupancy::from_cells(cells, &grid, n_classes)?, grid))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_sequence(dir: &Path, seq: &SceneSequence, world: &WorldConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        world: world.clone(),
        scene: seq.spec.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    write(&dir.join("manifest.toml"), &text)?;
    let mut poses = String::from("frame,x,y,yaw\n");
    for (k, p) in seq.poses.iter().enumerate() {
        let _ = writeln!(poses, "{k},{:?},{:?},{:?}", p.x, p.y, p.yaw);
    }
    write(&dir.join("poses.csv"), &poses)?;
    for (k, occ) in seq.frames.iter().enumerate() {
        write(&dir.join(format!("occ_{k:02}.txt")), &format_occupancy(occ, &seq.grid))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.toml");
    toml::from_str(&read(&path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn read_sequence(dir: &Path) -> Result<SceneSequence> {
    let m = read_manifest(dir)?;
    let n = m.world.n_frames();
    let mut poses = Vec::with_capacity(n);
    for (i, line) in read(&dir.join("poses.csv"))?.lines().skip(1).enumerate() {
        let v: Vec<&str> = line.split(',').collect();
        let f = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("poses.csv line {}: {e}", i + 2)));
        if v.len() != 4 {
            return Err(Error::Parse(format!("poses.csv line {}: expected 4 fields", i + 2)));
        }
        poses.push(Pose::new(f(v[1])?, f(v[2])?, f(v[3])?, i as i64));
    }
    if poses.len() != n {
        return Err(Error::LengthMismatch {
            what: "poses.csv rows",
            left: poses.len(),
            right: n,
        });
    }
    let mut frames = Vec::with_capacity(n);
    let mut grid = None;
    for k in 0..n {
        let (occ, g) = parse_occupancy(&read(&dir.join(format!("occ_{k:02}.txt")))?, m.world.n_classes)?;
        frames.push(occ);
        grid = Some(g);
    }
    Ok(SceneSequence {
        spec: m.scene,
        grid: grid.unwrap_or(crate::world::frame_grid(&m.world)?),
        past_frames: m.world.past_frames,
        future_frames: m.world.future_frames,
        poses,
        frames,
    })
}

pub fn sequence_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("seq_{index:04}"))
}

/// Generates `count` sequences with seeds `seed, seed + 1, ...` under `root`.
pub fn write_dataset(root: &Path, world: &WorldConfig, seed: u64, count: usize) -> Result<Vec<PathBuf>> {
    world.validate()?;
    (0..count)
        .map(|i| {
            let seq = SceneSequence::generate(seed.wrapping_add(i as u64), world)?;
            let dir = sequence_dir(root, i);
            write_sequence(&dir, &seq, world)?;
            Ok(dir)
        })
        .collect()
}

/// Reads every `seq_*` directory under `root` in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<SceneSequence>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seq_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Parse(format!("no sequences under {}", root.display())));
    }
    dirs.iter().map(|d| read_sequence(d)).collect()
}
