//! Synthetic two-modality scenes.
//!
//! Modality A renders each target as a sharp, narrow blob (point-like
//! ranging sensor); modality B renders the same targets as broad, textured
//! blobs (imaging sensor). The occupancy target marks one cell per target.
//! Five corruption kinds each degrade exactly one modality.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::SeededRng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown corruption kind {0:?}")]
    UnknownKind(String),
    #[error("severity {0} outside [0, 1]")]
    Severity(f64),
    #[error("target count {count} exceeds maximum {max}")]
    TooManyTargets { count: usize, max: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Environment label; the discriminant is the class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    Clean = 0,
    ASparsify = 1,
    BFog = 2,
    BBlur = 3,
    BDark = 4,
    ABlur = 5,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::Clean,
        CorruptionKind::ASparsify,
        CorruptionKind::BFog,
        CorruptionKind::BBlur,
        CorruptionKind::BDark,
        CorruptionKind::ABlur,
    ];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Clean => "clean",
            CorruptionKind::ASparsify => "a-sparsify",
            CorruptionKind::BFog => "b-fog",
            CorruptionKind::BBlur => "b-blur",
            CorruptionKind::BDark => "b-dark",
            CorruptionKind::ABlur => "a-blur",
        }
    }

    /// Modality index degraded by this kind, if any.
    pub fn target_modality(self) -> Option<usize> {
        match self {
            CorruptionKind::Clean => None,
            CorruptionKind::ASparsify | CorruptionKind::ABlur => Some(0),
            CorruptionKind::BFog | CorruptionKind::BBlur | CorruptionKind::BDark => Some(1),
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub row: usize,
    pub col: usize,
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub max_targets: usize,
    pub noise_sigma: f64,
    /// Point-spread width of modality A.
    pub sigma_a: f64,
    /// Point-spread width of modality B.
    pub sigma_b: f64,
    /// Multiplicative texture amplitude on modality B.
    pub texture_b: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 8,
            width: 8,
            max_targets: 5,
            noise_sigma: 0.05,
            sigma_a: 0.5,
            sigma_b: 1.2,
            texture_b: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub targets: Vec<Target>,
    /// Row-major `height × width` grids, one per modality.
    pub grids: [Vec<f64>; 2],
    pub occupancy: Vec<f64>,
    pub corruption: CorruptionKind,
    pub severity: f64,
}

impl Scene {
    pub fn label(&self) -> usize {
        self.corruption.index()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

fn render(params: &SceneParams, targets: &[Target], sigma: f64, texture: f64, rng: &mut SeededRng) -> Vec<f64> {
    let (h, w) = (params.height, params.width);
    let mut grid = vec![0.0; h * w];
    for t in targets {
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - t.row as f64).powi(2) + (c as f64 - t.col as f64).powi(2);
                grid[r * w + c] += t.intensity * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    if texture > 0.0 {
        for v in grid.iter_mut() {
            *v *= 1.0 + texture * rng.uniform_range(-1.0, 1.0);
        }
    }
    for v in grid.iter_mut() {
        *v += params.noise_sigma * rng.normal();
    }
    grid
}

/// A clean scene with `n_targets` targets on distinct cells.
pub fn gen_scene(rng: &mut SeededRng, params: &SceneParams, n_targets: usize) -> Result<Scene> {
    if n_targets > params.max_targets || n_targets > params.height * params.width {
        return Err(DataError::TooManyTargets {
            count: n_targets,
            max: params.max_targets,
        });
    }
    let mut cells: Vec<usize> = (0..params.height * params.width).collect();
    rng.shuffle(&mut cells);
    let targets: Vec<Target> = cells[..n_targets]
        .iter()
        .map(|&cell| Target {
            row: cell / params.width,
            col: cell % params.width,
            intensity: rng.uniform_range(0.5, 1.0),
        })
        .collect();
    let mut occupancy = vec![0.0; params.height * params.width];
    for t in &targets {
        occupancy[t.row * params.width + t.col] = 1.0;
    }
    let grid_a = render(params, &targets, params.sigma_a, 0.0, rng);
    let grid_b = render(params, &targets, params.sigma_b, params.texture_b, rng);
    Ok(Scene {
        height: params.height,
        width: params.width,
        targets,
        grids: [grid_a, grid_b],
        occupancy,
        corruption: CorruptionKind::Clean,
        severity: 0.0,
    })
}

/// Zero-padded convolution with a normalized Gaussian kernel of radius 2.
fn gaussian_blur(grid: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    const R: isize = 2;
    let mut kernel = Vec::new();
    for dy in -R..=R {
        for dx in -R..=R {
            kernel.push((-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let z: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= z);
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for dy in -R..=R {
                for dx in -R..=R {
                    let (rr, cc) = (r + dy, c + dx);
                    if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                        acc += kernel[((dy + R) * (2 * R + 1) + dx + R) as usize] * grid[(rr * w as isize + cc) as usize];
                    }
                }
            }
            out[(r * w as isize + c) as usize] = acc;
        }
    }
    out
}

/// Number of rows zeroed by `ASparsify` at `severity`.
pub fn sparsified_rows(height: usize, severity: f64) -> usize {
    (severity * height as f64).round() as usize
}

/// Applies one corruption kind to a clean scene. The untargeted modality
/// and the occupancy target are left untouched.
pub fn corrupt(scene: &Scene, kind: CorruptionKind, severity: f64, rng: &mut SeededRng) -> Result<Scene> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(DataError::Severity(severity));
    }
    let mut out = scene.clone();
    if kind == CorruptionKind::Clean || severity == 0.0 {
        return Ok(out);
    }
    out.corruption = kind;
    out.severity = severity;
    let (h, w) = (scene.height, scene.width);
    match kind {
        CorruptionKind::Clean => unreachable!(),
        CorruptionKind::ASparsify => {
            let mut rows: Vec<usize> = (0..h).collect();
            rng.shuffle(&mut rows);
            for &r in &rows[..sparsified_rows(h, severity)] {
                out.grids[0][r * w..(r + 1) * w].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        CorruptionKind::BFog => {
            let (fy, fx) = (rng.uniform_range(0.2, 0.6), rng.uniform_range(0.2, 0.6));
            let (py, px) = (rng.uniform_range(0.0, 6.3), rng.uniform_range(0.0, 6.3));
            for r in 0..h {
                for c in 0..w {
                    let haze = 0.5 + 0.3 * (fy * r as f64 + py).sin() * (fx * c as f64 + px).cos();
                    let v = &mut out.grids[1][r * w + c];
                    *v = (1.0 - 0.8 * severity) * *v + 0.6 * severity * haze;
                }
            }
        }
        CorruptionKind::BDark => {
            for v in out.grids[1].iter_mut() {
                *v = (1.0 - severity) * *v + severity * 0.05 * rng.normal();
            }
        }
        CorruptionKind::BBlur => out.grids[1] = gaussian_blur(&scene.grids[1], h, w, 2.0 * severity),
        CorruptionKind::ABlur => out.grids[0] = gaussian_blur(&scene.grids[0], h, w, 2.0 * severity),
    }
    Ok(out)
}

/// Which corruptions a generated dataset contains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CorruptionPolicy {
    Clean,
    /// Kind uniform over all six classes, severity uniform in the range.
    Mixed { min_severity: f64, max_severity: f64 },
    Fixed {
        kind: CorruptionKind,
        min_severity: f64,
        max_severity: f64,
    },
}

/// `count` scenes with 1..=max_targets targets each. Scene `i` depends only
/// on `(seed, i)`.
pub fn gen_dataset(seed: u64, count: usize, params: &SceneParams, policy: CorruptionPolicy) -> Result<Vec<Scene>> {
    let root = SeededRng::new(seed);
    (0..count)
        .map(|i| {
            let mut rng = root.derive(i as u64);
            let n = 1 + rng.below(params.max_targets.max(1));
            let clean = gen_scene(&mut rng, params, n.min(params.max_targets))?;
            let (kind, lo, hi) = match policy {
                CorruptionPolicy::Clean => return Ok(clean),
                CorruptionPolicy::Mixed {
                    min_severity,
                    max_severity,
                } => (CorruptionKind::ALL[rng.below(CorruptionKind::COUNT)], min_severity, max_severity),
                CorruptionPolicy::Fixed {
                    kind,
                    min_severity,
                    max_severity,
                } => (kind, min_severity, max_severity),
            };
            if kind == CorruptionKind::Clean {
                return Ok(clean);
            }
            let severity = rng.uniform_range(lo, hi);
            corrupt(&clean, kind, severity, &mut rng)
        })
        .collect()
}

/// Writes one JSON scene object per line.
pub fn save_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for s in scenes {
        let line = serde_json::to_string(s).expect("scene serializes");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io { path: p.clone(), source })?;
    let mut scenes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io { path: p.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: p.clone(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(scenes)
}
