//! Synthetic indoor CSI: a rectangular room, one multi-antenna server on a
//! linear array along the y axis, a direct path plus single-bounce wall
//! reflections (image method), and rectangular obstacles that attenuate any
//! path leg crossing them.
//!
//! Channel tensors are stored `[C, L]`: one row per antenna, one column per
//! subcarrier (or tap, in the time domain).

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::container::{self, DATASET_MAGIC, FORMAT_VERSION};
use crate::ctensor::ComplexTensor;
use crate::error::{Error, Result};
use crate::training::{Example, TOA_UNIT_S};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormAxis {
    /// Each antenna row is scaled by its own largest modulus.
    #[default]
    PerAntenna,
    /// Each subcarrier column is scaled across antennas.
    PerFeature,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    #[default]
    Frequency,
    Time,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Uniform,
    /// Distinct points of a square grid with the given step, shuffled.
    Grid { step: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Obstacle {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.min[0]..=self.max[0]).contains(&p[0]) && (self.min[1]..=self.max[1]).contains(&p[1])
    }

    /// Whether the closed segment `a-b` touches the rectangle (Liang-Barsky clip).
    pub fn blocks(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let d = [b[0] - a[0], b[1] - a[1]];
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for k in 0..2 {
            let lo = self.min[k] - a[k];
            let hi = self.max[k] - a[k];
            if d[k] == 0.0 {
                if lo > 0.0 || hi < 0.0 {
                    return false;
                }
                continue;
            }
            let (mut e0, mut e1) = (lo / d[k], hi / d[k]);
            if e0 > e1 {
                std::mem::swap(&mut e0, &mut e1);
            }
            t0 = t0.max(e0);
            t1 = t1.min(e1);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Width (x) and height (y) in meters.
    pub room: [f64; 2],
    pub server_position: [f64; 2],
    pub antennas: usize,
    pub antenna_spacing: f64,
    pub subcarriers: usize,
    pub center_frequency: f64,
    pub subcarrier_spacing: f64,
    /// Inclusive bounds on the number of paths kept, direct path included.
    pub path_count: [usize; 2],
    /// Paths weaker than the strongest by more than this are dropped, subject to `path_count`.
    pub path_threshold_db: f64,
    pub reflection_loss_db: f64,
    /// Extra attenuation of a path that crosses an obstacle.
    pub blockage_loss_db: f64,
    pub noise_std: f64,
    pub obstacles: Vec<Obstacle>,
    pub samples_per_user: usize,
    pub user_count: usize,
    pub test_fraction: f64,
    pub placement: Placement,
    pub domain: Domain,
    pub normalization: NormAxis,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            room: [12.0, 8.0],
            server_position: [0.5, 4.0],
            antennas: 2,
            antenna_spacing: 0.0428,
            subcarriers: 250,
            center_frequency: 3.5e9,
            subcarrier_spacing: 240e3,
            path_count: [1, 5],
            path_threshold_db: 20.0,
            reflection_loss_db: 6.0,
            blockage_loss_db: 20.0,
            noise_std: 0.01,
            obstacles: Vec::new(),
            samples_per_user: 100,
            user_count: 6,
            test_fraction: 0.1,
            placement: Placement::Uniform,
            domain: Domain::Frequency,
            normalization: NormAxis::PerAntenna,
            seed: 0,
        }
    }
}

/// Smallest distance between a user and the server antenna array center.
const MIN_DISTANCE: f64 = 0.2;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("room width", self.room[0]),
            ("room height", self.room[1]),
            ("antenna_spacing", self.antenna_spacing),
            ("center_frequency", self.center_frequency),
            ("subcarrier_spacing", self.subcarrier_spacing),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("scene {name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("path_threshold_db", self.path_threshold_db),
            ("reflection_loss_db", self.reflection_loss_db),
            ("blockage_loss_db", self.blockage_loss_db),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("scene {name} must be nonnegative, got {v}")));
            }
        }
        if self.antennas == 0 || self.subcarriers == 0 {
            return Err(Error::config("scene needs at least one antenna and one subcarrier"));
        }
        if self.user_count == 0 || self.samples_per_user == 0 {
            return Err(Error::config("scene needs at least one user and one sample per user"));
        }
        let [lo, hi] = self.path_count;
        if lo == 0 || lo > hi || hi > 5 {
            return Err(Error::config(format!(
                "path_count must satisfy 1 <= min <= max <= 5, got [{lo}, {hi}]"
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        if !self.inside_room(self.server_position) {
            return Err(Error::config("server position lies outside the room"));
        }
        let half = self.antenna_spacing * (self.antennas as f64 - 1.0) / 2.0;
        if self.server_position[1] - half < 0.0 || self.server_position[1] + half > self.room[1] {
            return Err(Error::config("antenna array extends outside the room"));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            let ok = o.min[0] < o.max[0]
                && o.min[1] < o.max[1]
                && o.min[0] >= 0.0
                && o.min[1] >= 0.0
                && o.max[0] <= self.room[0]
                && o.max[1] <= self.room[1];
            if !ok {
                return Err(Error::config(format!(
                    "obstacle {i} is empty or extends outside the room"
                )));
            }
            if o.contains(self.server_position) {
                return Err(Error::config(format!("obstacle {i} covers the server")));
            }
        }
        if let Placement::Grid { step } = self.placement {
            if !(step.is_finite() && step > 0.0) {
                return Err(Error::config("grid step must be positive"));
            }
        }
        Ok(())
    }

    pub fn inside_room(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= self.room[0] && p[1] <= self.room[1] && p.iter().all(|v| v.is_finite())
    }

    pub fn antenna_position(&self, c: usize) -> [f64; 2] {
        let offset = (c as f64 - (self.antennas as f64 - 1.0) / 2.0) * self.antenna_spacing;
        [self.server_position[0], self.server_position[1] + offset]
    }

    /// Frequency of subcarrier `l`, centered on the carrier.
    pub fn frequency(&self, l: usize) -> f64 {
        self.center_frequency + (l as f64 - (self.subcarriers as f64 - 1.0) / 2.0) * self.subcarrier_spacing
    }

    pub fn test_count(&self) -> usize {
        let train = (self.user_count * self.samples_per_user) as f64;
        (self.test_fraction * train / (1.0 - self.test_fraction)).round() as usize
    }
}

/// Candidate propagation path: `None` for the direct path, or the wall index
/// (0: x=0, 1: x=W, 2: y=0, 3: y=H) for a single reflection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    Direct,
    Wall(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Path2 {
    pub kind: PathKind,
    /// Length from the array center, meters.
    pub length: f64,
    pub blocked: bool,
    pub amplitude: f64,
}

fn mirror(p: [f64; 2], wall: usize, room: [f64; 2]) -> [f64; 2] {
    match wall {
        0 => [-p[0], p[1]],
        1 => [2.0 * room[0] - p[0], p[1]],
        2 => [p[0], -p[1]],
        _ => [p[0], 2.0 * room[1] - p[1]],
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Point where the segment from the image `img` to `user` crosses the wall.
fn bounce_point(img: [f64; 2], user: [f64; 2], wall: usize, room: [f64; 2]) -> [f64; 2] {
    let (axis, line) = match wall {
        0 => (0, 0.0),
        1 => (0, room[0]),
        2 => (1, 0.0),
        _ => (1, room[1]),
    };
    let t = (line - img[axis]) / (user[axis] - img[axis]);
    [img[0] + t * (user[0] - img[0]), img[1] + t * (user[1] - img[1])]
}

fn segment_blocked(scene: &SceneConfig, a: [f64; 2], b: [f64; 2]) -> bool {
    scene.obstacles.iter().any(|o| o.blocks(a, b))
}

fn db(x: f64) -> f64 {
    10f64.powf(-x / 20.0)
}

/// All five candidate paths from the array center to `user`, strongest first.
pub fn candidate_paths(scene: &SceneConfig, user: [f64; 2]) -> Vec<Path2> {
    let s = scene.server_position;
    let mut paths = Vec::with_capacity(5);
    let blocked = segment_blocked(scene, s, user);
    let length = dist(s, user);
    paths.push(Path2 {
        kind: PathKind::Direct,
        length,
        blocked,
        amplitude: (1.0 / length) * if blocked { db(scene.blockage_loss_db) } else { 1.0 },
    });
    for wall in 0..4 {
        let img = mirror(s, wall, scene.room);
        let length = dist(img, user);
        let hit = bounce_point(img, user, wall, scene.room);
        let blocked = segment_blocked(scene, s, hit) || segment_blocked(scene, hit, user);
        paths.push(Path2 {
            kind: PathKind::Wall(wall),
            length,
            blocked,
            amplitude: (1.0 / length)
                * db(scene.reflection_loss_db)
                * if blocked { db(scene.blockage_loss_db) } else { 1.0 },
        });
    }
    paths.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude));
    paths
}

/// Paths that contribute to the channel: those within `path_threshold_db` of
/// the strongest, clamped into `path_count`.
pub fn kept_paths(scene: &SceneConfig, user: [f64; 2]) -> Vec<Path2> {
    let mut paths = candidate_paths(scene, user);
    let floor = paths[0].amplitude * db(scene.path_threshold_db);
    let strong = paths.iter().filter(|p| p.amplitude >= floor).count();
    paths.truncate(strong.clamp(scene.path_count[0], scene.path_count[1]));
    paths
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsiSample {
    pub id: u64,
    /// `None` for samples in the test split.
    pub user_id: Option<usize>,
    /// Raw frequency-domain channel, `[C, L]`.
    pub h: ComplexTensor,
    pub position: [f64; 2],
    pub los: bool,
    /// First-path delay in seconds.
    pub toa: f64,
}

/// Synthesizes the channel at `user`. Noise is the only use of `rng`.
pub fn generate_channel(scene: &SceneConfig, user: [f64; 2], rng: &mut impl Rng) -> Result<CsiSample> {
    if !scene.inside_room(user) {
        return Err(Error::config(format!(
            "position ({}, {}) lies outside the room",
            user[0], user[1]
        )));
    }
    let candidates = candidate_paths(scene, user);
    let toa = candidates
        .iter()
        .filter(|p| !p.blocked)
        .map(|p| p.length)
        .fold(f64::INFINITY, f64::min)
        / SPEED_OF_LIGHT;
    if !toa.is_finite() {
        return Err(Error::NoPath(user[0], user[1]));
    }
    let los = candidates.iter().any(|p| p.kind == PathKind::Direct && !p.blocked);
    let paths = kept_paths(scene, user);
    let (c_n, l_n) = (scene.antennas, scene.subcarriers);
    let mut re = vec![0.0; c_n * l_n];
    let mut im = vec![0.0; c_n * l_n];
    for c in 0..c_n {
        let ant = scene.antenna_position(c);
        let delays: Vec<(f64, f64)> = paths
            .iter()
            .map(|p| {
                let origin = match p.kind {
                    PathKind::Direct => ant,
                    PathKind::Wall(w) => mirror(ant, w, scene.room),
                };
                (p.amplitude, dist(origin, user) / SPEED_OF_LIGHT)
            })
            .collect();
        for l in 0..l_n {
            let f = scene.frequency(l);
            let mut acc = Complex64::new(0.0, 0.0);
            for &(a, tau) in &delays {
                // Reduce f*tau modulo 1 before scaling by 2 pi to keep the phase accurate.
                let cycles = (f * tau).fract();
                acc += Complex64::from_polar(a, -std::f64::consts::TAU * cycles);
            }
            re[c * l_n + l] = acc.re;
            im[c * l_n + l] = acc.im;
        }
    }
    if scene.noise_std > 0.0 {
        let s = scene.noise_std * std::f64::consts::FRAC_1_SQRT_2;
        for (r, i) in re.iter_mut().zip(im.iter_mut()) {
            let (a, b): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
            *r += s * a;
            *i += s * b;
        }
    }
    Ok(CsiSample {
        id: 0,
        user_id: None,
        h: ComplexTensor::from_parts(&[c_n, l_n], re, im)?,
        position: user,
        los,
        toa,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedCsi {
    pub h: ComplexTensor,
    /// Indices of all-zero slices, passed through unscaled.
    pub zero_slices: Vec<usize>,
}

/// Scales every slice by its largest modulus so the real and imaginary
/// parts land in `[-1, 1]`.
pub fn normalize_csi(h: &ComplexTensor, axis: NormAxis) -> Result<NormalizedCsi> {
    let (c_n, l_n) = match h.shape() {
        [c, l] => (*c, *l),
        s => {
            return Err(Error::dim(
                "normalize_csi",
                format!("expected a [C, L] matrix, got {s:?}"),
            ))
        }
    };
    let (slices, len, index): (usize, usize, Box<dyn Fn(usize, usize) -> usize>) = match axis {
        NormAxis::PerAntenna => (c_n, l_n, Box::new(move |s, k| s * l_n + k)),
        NormAxis::PerFeature => (l_n, c_n, Box::new(move |s, k| k * l_n + s)),
    };
    let mut out = h.clone();
    let mut zero_slices = Vec::new();
    for s in 0..slices {
        let m = (0..len).map(|k| h.at(index(s, k)).norm()).fold(0.0, f64::max);
        if m == 0.0 {
            zero_slices.push(s);
            continue;
        }
        let (re, im) = out.planes_mut();
        for k in 0..len {
            let i = index(s, k);
            re[i] /= m;
            im[i] /= m;
        }
    }
    Ok(NormalizedCsi { h: out, zero_slices })
}

fn dft_rows(h: &ComplexTensor, inverse: bool) -> Result<ComplexTensor> {
    let (c_n, l_n) = match h.shape() {
        [c, l] => (*c, *l),
        s => return Err(Error::dim("dft", format!("expected a [C, L] matrix, got {s:?}"))),
    };
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(l_n)
    } else {
        planner.plan_fft_forward(l_n)
    };
    let mut data = h.to_complex_vec();
    for row in data.chunks_mut(l_n) {
        fft.process(row);
    }
    if inverse {
        let s = 1.0 / l_n as f64;
        data.iter_mut().for_each(|z| *z *= s);
    }
    ComplexTensor::from_complex(&[c_n, l_n], &data)
}

/// Per-antenna inverse DFT: `h[n] = (1/L) sum_l H[l] exp(i 2 pi l n / L)`.
pub fn to_time_domain(h: &ComplexTensor) -> Result<ComplexTensor> {
    dft_rows(h, true)
}

pub fn to_frequency_domain(h: &ComplexTensor) -> Result<ComplexTensor> {
    dft_rows(h, false)
}

/// Network input for a sample under the scene's domain and normalization.
pub fn features(scene: &SceneConfig, sample: &CsiSample) -> Result<NormalizedCsi> {
    let h = match scene.domain {
        Domain::Frequency => sample.h.clone(),
        Domain::Time => to_time_domain(&sample.h)?,
    };
    normalize_csi(&h, scene.normalization)
}

pub fn to_example(scene: &SceneConfig, sample: &CsiSample) -> Result<Example> {
    Ok(Example {
        id: sample.id,
        input: features(scene, sample)?.h,
        position: sample.position,
        los: sample.los,
        toa: sample.toa / TOA_UNIT_S,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: SceneConfig,
    pub shards: Vec<Vec<CsiSample>>,
    pub test: Vec<CsiSample>,
}

fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn usable(scene: &SceneConfig, p: [f64; 2]) -> bool {
    scene.inside_room(p)
        && dist(p, scene.server_position) >= MIN_DISTANCE
        && !scene.obstacles.iter().any(|o| o.contains(p))
        && candidate_paths(scene, p).iter().any(|c| !c.blocked)
}

fn grid_points(scene: &SceneConfig, step: f64) -> Vec<[f64; 2]> {
    let nx = (scene.room[0] / step).floor() as usize;
    let ny = (scene.room[1] / step).floor() as usize;
    let mut pts = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            let p = [(i as f64 + 0.5) * step, (j as f64 + 0.5) * step];
            if usable(scene, p) {
                pts.push(p);
            }
        }
    }
    pts
}

impl Dataset {
    /// Draws positions and channels. Test samples take the first ids, then
    /// each user receives a contiguous block of `samples_per_user` ids.
    pub fn build(scene: &SceneConfig) -> Result<Self> {
        scene.validate()?;
        let test_count = scene.test_count();
        let total = test_count + scene.user_count * scene.samples_per_user;
        let positions: Option<Vec<[f64; 2]>> = match scene.placement {
            Placement::Uniform => None,
            Placement::Grid { step } => {
                let mut pts = grid_points(scene, step);
                if pts.len() < total {
                    return Err(Error::config(format!(
                        "grid step {step} gives {} usable points, {total} samples requested",
                        pts.len()
                    )));
                }
                pts.shuffle(&mut sample_rng(scene.seed, u64::MAX));
                pts.truncate(total);
                Some(pts)
            }
        };
        let samples = (0..total)
            .into_par_iter()
            .map(|i| {
                let id = i as u64;
                let mut rng = sample_rng(scene.seed, id);
                let pos = match &positions {
                    Some(p) => p[i],
                    None => loop {
                        let p = [rng.random::<f64>() * scene.room[0], rng.random::<f64>() * scene.room[1]];
                        if usable(scene, p) {
                            break p;
                        }
                    },
                };
                let mut s = generate_channel(scene, pos, &mut rng)?;
                s.id = id;
                if i >= test_count {
                    s.user_id = Some((i - test_count) / scene.samples_per_user);
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut it = samples.into_iter();
        let test: Vec<CsiSample> = it.by_ref().take(test_count).collect();
        let rest: Vec<CsiSample> = it.collect();
        let shards = rest.chunks(scene.samples_per_user).map(<[CsiSample]>::to_vec).collect();
        Ok(Self {
            scene: scene.clone(),
            shards,
            test,
        })
    }

    pub fn train_len(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    /// Training shards and test split as network examples.
    pub fn examples(&self) -> Result<(Vec<Vec<Example>>, Vec<Example>)> {
        let conv = |s: &[CsiSample]| s.iter().map(|x| to_example(&self.scene, x)).collect::<Result<Vec<_>>>();
        let shards = self.shards.iter().map(|s| conv(s)).collect::<Result<Vec<_>>>()?;
        Ok((shards, conv(&self.test)?))
    }

    fn all(&self) -> impl Iterator<Item = &CsiSample> {
        self.test.iter().chain(self.shards.iter().flatten())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let width = record_width(&self.scene);
        let mut payload = Vec::with_capacity(width * (self.test.len() + self.train_len()));
        for s in self.all() {
            payload.extend_from_slice(&[
                s.id as f64,
                s.user_id.map_or(-1.0, |u| u as f64),
                s.position[0],
                s.position[1],
                f64::from(u8::from(s.los)),
                s.toa,
            ]);
            payload.extend_from_slice(s.h.re());
            payload.extend_from_slice(s.h.im());
        }
        let header = DatasetHeader {
            schema_version: FORMAT_VERSION,
            scene: self.scene.clone(),
            test_count: self.test.len(),
            shard_sizes: self.shards.iter().map(Vec::len).collect(),
            record_width: width,
        };
        container::encode(DATASET_MAGIC, &header, &payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (DatasetHeader, Vec<f64>) = container::decode(DATASET_MAGIC, bytes)?;
        header.scene.validate()?;
        let width = record_width(&header.scene);
        let count = header.test_count + header.shard_sizes.iter().sum::<usize>();
        if header.record_width != width || payload.len() != width * count {
            return Err(Error::Format(format!(
                "payload of {} values does not hold {count} records of width {width}",
                payload.len()
            )));
        }
        let (c_n, l_n) = (header.scene.antennas, header.scene.subcarriers);
        let mut records = payload.chunks_exact(width).map(|r| -> Result<CsiSample> {
            let cl = c_n * l_n;
            Ok(CsiSample {
                id: r[0] as u64,
                user_id: (r[1] >= 0.0).then_some(r[1] as usize),
                position: [r[2], r[3]],
                los: r[4] != 0.0,
                toa: r[5],
                h: ComplexTensor::from_parts(&[c_n, l_n], r[6..6 + cl].to_vec(), r[6 + cl..].to_vec())?,
            })
        });
        let test = records.by_ref().take(header.test_count).collect::<Result<Vec<_>>>()?;
        let mut shards = Vec::with_capacity(header.shard_sizes.len());
        for &n in &header.shard_sizes {
            shards.push(records.by_ref().take(n).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self {
            scene: header.scene,
            shards,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// One JSON object per sample, test split first.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in self.all() {
            let line = serde_json::json!({
                "schema_version": FORMAT_VERSION,
                "id": s.id,
                "user_id": s.user_id,
                "position": s.position,
                "los": s.los,
                "toa": s.toa,
                "h_re": s.h.re(),
                "h_im": s.h.im(),
            });
            writeln!(out, "{line}").expect("writing to a String");
        }
        out
    }
}

fn record_width(scene: &SceneConfig) -> usize {
    6 + 2 * scene.antennas * scene.subcarriers
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub scene: SceneConfig,
    pub test_count: usize,
    pub shard_sizes: Vec<usize>,
    pub record_width: usize,
}
