//! Deterministic synthetic identities: bound point clouds with region-driven
//! density, ground-truth Gaussians, animation tracks and multi-view targets.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{read_bpc, write_bpc, BoundPoint, BoundPointCloud};
use crate::codec::{encode, quantize_cloud, read_tok, sort_key, write_tok, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::gaussian::{read_gau, write_gau, Gaussian};
use crate::geometry::{GlobalGaussian, LocalGaussian, Point3, Quat};
use crate::image::{read_img, read_ppm, write_img, write_ppm, Image};
use crate::parallel::map_indexed;
use crate::render::{read_camera, render, write_camera, Camera, RenderOptions};
use crate::rig::{
    animate_gaussians, bind_points, locals_from_canonical, read_rig, write_rig, PoseExpression, RigTemplate,
    JOINT_JAW, JOINT_NECK,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Base,
    Hair,
    Beard,
}

/// Azimuths of the camera ring, degrees; the first one is frontal.
const AZIMUTHS: [f64; 8] = [0.0, 90.0, 180.0, 270.0, 45.0, -45.0, 135.0, -135.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub min_points: usize,
    pub max_points: usize,
    pub hair_multiplier: f64,
    pub beard_multiplier: f64,
    /// Largest off-surface displacement of hair points.
    pub hair_height: f64,
    /// Probability that an identity has a beard.
    pub beard_probability: f64,
    pub image_size: usize,
    pub focal: f64,
    pub camera_radius: f64,
    pub elevation: f64,
    pub cameras: usize,
    pub posed_frames: usize,
    pub coord_levels: u32,
    /// Fraction of identities held out for testing.
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_points: 100,
            max_points: 300,
            hair_multiplier: 3.0,
            beard_multiplier: 2.5,
            hair_height: 0.1,
            beard_probability: 0.5,
            image_size: 64,
            focal: 64.0,
            camera_radius: 3.0,
            elevation: 10.0,
            cameras: 6,
            posed_frames: 2,
            coord_levels: 1024,
            test_fraction: 0.125,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("synth: {m}")));
        if self.min_points == 0 || self.min_points > self.max_points {
            return bad(format!("need 0 < min_points <= max_points, got {}..{}", self.min_points, self.max_points));
        }
        if self.hair_multiplier < 2.0 || self.beard_multiplier < 2.0 {
            return bad("feature-region multipliers must be at least 2".into());
        }
        if !(0.0..=0.2).contains(&self.hair_height) {
            return bad(format!("hair_height {} outside [0, 0.2]", self.hair_height));
        }
        if !(0.0..=1.0).contains(&self.beard_probability) || !(0.0..1.0).contains(&self.test_fraction) {
            return bad("probabilities must lie in [0, 1)".into());
        }
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return bad(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        if !(4..=AZIMUTHS.len()).contains(&self.cameras) {
            return bad(format!("cameras must be in 4..={}", AZIMUTHS.len()));
        }
        if self.posed_frames < 2 {
            return bad("need at least 2 posed frames".into());
        }
        if !(self.focal > 0.0 && self.camera_radius > 1.5) {
            return bad("focal must be positive and the camera outside the head".into());
        }
        if self.coord_levels < 2 {
            return bad("coord_levels must be at least 2".into());
        }
        Ok(())
    }

    pub fn camera_set(&self) -> Vec<Camera<f32>> {
        AZIMUTHS[..self.cameras]
            .iter()
            .map(|&az| {
                Camera::orbit(
                    az,
                    self.elevation,
                    self.camera_radius,
                    self.focal,
                    self.image_size,
                    self.image_size,
                )
            })
            .collect()
    }

    pub fn frames(&self) -> usize {
        1 + self.posed_frames
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: usize,
    pub frame: usize,
    pub image: Image<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticIdentity {
    pub seed: u64,
    /// Quantized bin centers in canonical order.
    pub cloud: BoundPointCloud<f64>,
    pub regions: Vec<Region>,
    /// Region label of every template face for this identity.
    pub face_regions: Vec<Region>,
    pub locals: Vec<LocalGaussian<f64>>,
    /// Canonical ground truth, aligned with `cloud`.
    pub gaussians: Vec<Gaussian<f32>>,
    pub tokens: TokenSequence,
    /// Frame 0 is the rest pose.
    pub track: Vec<PoseExpression<f64>>,
    pub views: Vec<View>,
    pub cond: Image<f32>,
}

impl SyntheticIdentity {
    pub fn bindings(&self) -> Vec<u32> {
        self.cloud.points.iter().map(|p| p.binding).collect()
    }
}

fn outward_normal(tpl: &RigTemplate<f64>, f: usize) -> Point3<f64> {
    let n = tpl.face_normal(f);
    if n.dot(tpl.face_centroid(f)) < 0.0 {
        -n
    } else {
        n
    }
}

/// Range of the hairline height (on the unit direction's y axis).
const HAIRLINE: std::ops::Range<f64> = 0.05..0.35;

fn face_weights(tpl: &RigTemplate<f64>, regions: &[Region], cfg: &SynthConfig) -> Vec<f64> {
    regions
        .iter()
        .enumerate()
        .map(|(f, r)| {
            let m = match r {
                Region::Base => 1.0,
                Region::Hair => cfg.hair_multiplier,
                Region::Beard => cfg.beard_multiplier,
            };
            tpl.face_area(f) * m
        })
        .collect()
}

fn face_regions(tpl: &RigTemplate<f64>, hairline: f64, beard: bool) -> Vec<Region> {
    (0..tpl.num_faces())
        .map(|f| {
            let u = tpl.face_centroid(f).normalized();
            if u.y > hairline || (u.z < -0.3 && u.y > -0.35) {
                Region::Hair
            } else if beard && u.z > 0.3 && u.y < -0.45 {
                Region::Beard
            } else {
                Region::Base
            }
        })
        .collect()
}

const SKIN: [[f64; 3]; 4] = [[0.93, 0.76, 0.64], [0.80, 0.60, 0.46], [0.62, 0.44, 0.32], [0.45, 0.31, 0.22]];
const HAIR: [[f64; 3]; 4] = [[0.12, 0.08, 0.05], [0.35, 0.22, 0.12], [0.72, 0.56, 0.30], [0.55, 0.18, 0.08]];

fn nearest_face(p: Point3<f64>, centroids: &[Point3<f64>]) -> u32 {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in centroids.iter().enumerate() {
        let d = (p - *c).dot(p - *c);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1 as u32
}

/// Mean distance to the three nearest neighbours, floored.
fn spacing(points: &[Point3<f64>]) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &q)| (p - q).norm())
                .collect();
            d.sort_by(f64::total_cmp);
            let k = d.len().min(3);
            let mean = if k == 0 { 0.1 } else { d[..k].iter().sum::<f64>() / k as f64 };
            mean.max(0.01)
        })
        .collect()
}

/// Poses canonical Gaussians bound to `faces` and returns renderable ones.
pub fn pose_gaussians(
    canonical: &[Gaussian<f32>],
    faces: &[u32],
    tpl: &RigTemplate<f64>,
    pe: &PoseExpression<f64>,
) -> Result<Vec<Gaussian<f32>>> {
    if canonical.len() != faces.len() {
        return Err(Error::LengthMismatch {
            expected: faces.len(),
            got: canonical.len(),
        });
    }
    let wide: Vec<Gaussian<f64>> = canonical.iter().map(|g| g.cast()).collect();
    let cloud = BoundPointCloud::new(
        wide.iter()
            .zip(faces)
            .map(|(g, &b)| BoundPoint {
                position: g.position,
                binding: b,
            })
            .collect(),
    );
    let globals: Vec<GlobalGaussian<f64>> = wide
        .iter()
        .map(|g| GlobalGaussian {
            position: g.position,
            rotation: g.rotation.normalized(),
            scale: g.scale,
        })
        .collect();
    let bindings = bind_points(&cloud, tpl)?;
    let locals = locals_from_canonical(&globals, faces, tpl)?;
    let posed = animate_gaussians(&bindings, &locals, tpl, pe)?;
    Ok(posed
        .iter()
        .zip(&wide)
        .map(|(p, g)| {
            Gaussian {
                position: p.position,
                rotation: p.rotation,
                scale: p.scale,
                color: g.color,
                opacity: g.opacity,
            }
            .cast()
        })
        .collect())
}

/// Renders one posed view single-threaded, as stored in the dataset.
pub fn render_target(
    canonical: &[Gaussian<f32>],
    faces: &[u32],
    tpl: &RigTemplate<f64>,
    pe: &PoseExpression<f64>,
    cam: &Camera<f32>,
) -> Result<Image<f32>> {
    let posed = pose_gaussians(canonical, faces, tpl, pe)?;
    Ok(render(&posed, cam, RenderOptions::default()).image)
}

fn random_track(rng: &mut ChaCha8Rng, tpl: &RigTemplate<f64>, frames: usize) -> Vec<PoseExpression<f64>> {
    let (j, k) = (tpl.num_joints(), tpl.num_expressions);
    let mut track = vec![PoseExpression::rest(j, k)];
    for _ in 1..frames {
        let mut pe = PoseExpression::rest(j, k);
        if j > JOINT_NECK {
            pe.pose[JOINT_NECK] = Point3::new(rng.gen_range(-0.15..0.15), rng.gen_range(-0.3..0.3), 0.0);
        }
        if j > JOINT_JAW {
            pe.pose[JOINT_JAW] = Point3::new(rng.gen_range(0.1..0.35), 0.0, 0.0);
        }
        pe.expression.iter_mut().for_each(|e| *e = rng.gen_range(-1.5..1.5));
        track.push(pe);
    }
    track
}

/// Generates one identity. Deterministic in `seed`.
pub fn synth_identity(seed: u64, tpl: &RigTemplate<f64>, cfg: &SynthConfig) -> Result<SyntheticIdentity> {
    cfg.validate()?;
    tpl.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = cfg.coord_levels;
    let nf = tpl.num_faces();

    // identity style
    let hairline = rng.gen_range(HAIRLINE);
    let beard = rng.gen_bool(cfg.beard_probability);
    let skin = SKIN[rng.gen_range(0..SKIN.len())];
    let hair = HAIR[rng.gen_range(0..HAIR.len())];
    let noise_freq: Vec<f64> = (0..3).map(|_| rng.gen_range(1.5..4.0)).collect();
    let noise_phase: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();

    let regions = face_regions(tpl, hairline, beard);
    let weight = face_weights(tpl, &regions, cfg);
    let total: f64 = weight.iter().sum();
    // the point budget grows with the density-weighted area, so identities
    // with more hair or a beard get more points; the sparsest possible style
    // maps to min_points and the densest to max_points
    let sparsest: f64 = face_weights(tpl, &face_regions(tpl, HAIRLINE.end, false), cfg).iter().sum();
    let densest: f64 =
        face_weights(tpl, &face_regions(tpl, HAIRLINE.start, cfg.beard_probability > 0.0), cfg).iter().sum();
    let t = if densest > sparsest { ((total - sparsest) / (densest - sparsest)).clamp(0.0, 1.0) } else { 0.0 };
    let target = cfg.min_points + (t * (cfg.max_points - cfg.min_points) as f64).round() as usize;
    // apportioned by systematic sampling: every face gets floor or ceil of
    // its share
    let mut counts = vec![0usize; nf];
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for f in 0..nf {
        let lo = acc;
        // pin the last edge so rounding cannot change the total
        acc = if f + 1 == nf { target as f64 } else { acc + weight[f] / total * target as f64 };
        counts[f] = ((acc - u).floor() - (lo - u).floor()) as usize;
    }

    let centroids: Vec<Point3<f64>> = (0..nf).map(|f| tpl.face_centroid(f)).collect();
    let mut raw = Vec::with_capacity(target);
    for f in 0..nf {
        let [a, b, c] = tpl.face_vertices(f);
        let n = outward_normal(tpl, f);
        for _ in 0..counts[f] {
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            let mut p = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
            let mut face = f as u32;
            if regions[f] == Region::Hair {
                p += n * rng.gen_range(0.0..=cfg.hair_height);
                face = nearest_face(p, &centroids);
            }
            let opacity: f64 = rng.gen_range(0.6..=1.0);
            raw.push((BoundPoint { position: p, binding: face }, regions[f], opacity));
        }
    }

    let snapped = quantize_cloud(&BoundPointCloud::new(raw.iter().map(|r| r.0).collect()), levels);
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by_key(|&i| sort_key(&snapped.points[i], levels));
    let cloud = BoundPointCloud::new(order.iter().map(|&i| snapped.points[i]).collect());
    let point_regions: Vec<Region> = order.iter().map(|&i| raw[i].1).collect();
    let opacity: Vec<f64> = order.iter().map(|&i| raw[i].2).collect();

    let positions = cloud.positions();
    let gap = spacing(&positions);
    let frames = tpl.canonical_face_transforms()?;
    let mut gaussians = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points.iter().enumerate() {
        let base = match point_regions[i] {
            Region::Base => skin,
            Region::Hair => hair,
            Region::Beard => hair.map(|c| c * 0.8),
        };
        let q = p.position;
        let color = std::array::from_fn(|c| {
            let wave = (noise_freq[c] * (q.x + 0.7 * q.y - 0.4 * q.z) + noise_phase[c]).sin();
            (base[c] + 0.06 * wave).clamp(0.0, 1.0)
        });
        let d = gap[i];
        // the face frame's second axis is the normal: flat discs along the surface
        let g = Gaussian {
            position: q,
            rotation: Quat::from_mat3(&frames[p.binding as usize].rotation).normalized(),
            scale: Point3::new(0.6 * d, 0.25 * d, 0.6 * d),
            color,
            opacity: opacity[i],
        };
        gaussians.push(g.cast::<f32>());
    }

    let faces: Vec<u32> = cloud.points.iter().map(|p| p.binding).collect();
    let globals: Vec<GlobalGaussian<f64>> = gaussians
        .iter()
        .map(|g| {
            let g = g.cast::<f64>();
            GlobalGaussian {
                position: g.position,
                rotation: g.rotation,
                scale: g.scale,
            }
        })
        .collect();
    let locals = locals_from_canonical(&globals, &faces, tpl)?;
    let tokens = encode(&cloud, &Vocabulary::new(levels, nf as u32))?;

    let track = random_track(&mut rng, tpl, cfg.frames());
    let cams = cfg.camera_set();
    let mut views = Vec::with_capacity(track.len() * cams.len());
    for (frame, pe) in track.iter().enumerate() {
        let posed = pose_gaussians(&gaussians, &faces, tpl, pe)?;
        for (camera, cam) in cams.iter().enumerate() {
            views.push(View {
                camera,
                frame,
                image: render(&posed, cam, RenderOptions::default()).image,
            });
        }
    }
    let cond = views[0].image.quantized_8bit();

    Ok(SyntheticIdentity {
        seed,
        cloud,
        regions: point_regions,
        face_regions: regions,
        locals,
        gaussians,
        tokens,
        track,
        views,
        cond,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Hash-ordered split: the `max(1, round(n·fraction))` seeds with the
/// smallest hashes are held out.
pub fn split_seeds(seeds: &[u64], test_fraction: f64) -> Result<Vec<Split>> {
    if seeds.len() < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 seeds, got {}", seeds.len())));
    }
    let mut uniq = seeds.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() != seeds.len() {
        return Err(Error::InvalidConfig("duplicate seeds".into()));
    }
    let n_test = ((seeds.len() as f64 * test_fraction).round() as usize).clamp(1, seeds.len() - 1);
    let mut order: Vec<usize> = (0..seeds.len()).collect();
    order.sort_by_key(|&i| (splitmix64(seeds[i]), seeds[i]));
    let mut out = vec![Split::Train; seeds.len()];
    for &i in &order[..n_test] {
        out[i] = Split::Test;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub split: Split,
    pub points: usize,
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub template: String,
    pub coord_levels: u32,
    pub faces: usize,
    pub cameras: usize,
    pub frames: usize,
    pub image_size: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn seeds(&self, split: Split) -> Vec<u64> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.seed).collect()
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "template={}", self.template)?;
        writeln!(out, "coord_levels={}", self.coord_levels)?;
        writeln!(out, "faces={}", self.faces)?;
        writeln!(out, "cameras={}", self.cameras)?;
        writeln!(out, "frames={}", self.frames)?;
        writeln!(out, "image_size={}", self.image_size)?;
        for e in &self.entries {
            writeln!(out, "seed={} split={} points={} dir={}", e.seed, e.split.name(), e.points, e.dir)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("manifest", m);
        let mut header = std::collections::BTreeMap::new();
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with("seed=") {
                let mut kv = std::collections::BTreeMap::new();
                for field in line.split_whitespace() {
                    let (k, v) = field
                        .split_once('=')
                        .ok_or_else(|| bad(format!("line {}: expected key=value", ln + 1)))?;
                    kv.insert(k, v);
                }
                let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("line {}: missing {k}", ln + 1)));
                let num = |k: &str| -> Result<u64> {
                    get(k)?.parse().map_err(|e| bad(format!("line {}: {k}: {e}", ln + 1)))
                };
                let split = match get("split")? {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    s => return Err(bad(format!("line {}: unknown split {s}", ln + 1))),
                };
                entries.push(ManifestEntry {
                    seed: num("seed")?,
                    split,
                    points: num("points")? as usize,
                    dir: get("dir")?.to_string(),
                });
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(format!("line {}: expected key=value", ln + 1)))?;
                header.insert(k.to_string(), v.to_string());
            }
        }
        for k in header.keys() {
            if !["template", "coord_levels", "faces", "cameras", "frames", "image_size"].contains(&k.as_str()) {
                return Err(bad(format!("unknown key {k}")));
            }
        }
        let take = |k: &str| header.get(k).ok_or_else(|| bad(format!("missing key {k}")));
        let num = |k: &str| -> Result<usize> { take(k)?.parse().map_err(|e| bad(format!("{k}: {e}"))) };
        Ok(Self {
            template: take("template")?.clone(),
            coord_levels: num("coord_levels")? as u32,
            faces: num("faces")?,
            cameras: num("cameras")?,
            frames: num("frames")?,
            image_size: num("image_size")?,
            entries,
        })
    }
}

fn fmt_reals(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// One line per frame: `pose=x,y,z;x,y,z;... expression=a,b,...`.
pub fn write_track<W: Write>(out: &mut W, track: &[PoseExpression<f64>]) -> Result<()> {
    for pe in track {
        let pose: Vec<String> = pe.pose.iter().map(|p| fmt_reals(p.to_array())).collect();
        writeln!(out, "pose={} expression={}", pose.join(";"), fmt_reals(pe.expression.iter().copied()))?;
    }
    Ok(())
}

pub fn read_track(text: &str) -> Result<Vec<PoseExpression<f64>>> {
    let bad = |ln: usize, m: String| Error::format("track", format!("line {}: {m}", ln + 1));
    let reals = |ln: usize, s: &str| -> Result<Vec<f64>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|x| x.parse::<f64>().map_err(|e| bad(ln, e.to_string())))
            .collect()
    };
    let mut track = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (mut pose, mut expr) = (None, None);
        for field in line.split_whitespace() {
            match field.split_once('=') {
                Some(("pose", v)) => pose = Some(v),
                Some(("expression", v)) => expr = Some(v),
                _ => return Err(bad(ln, format!("unexpected field {field:?}"))),
            }
        }
        let pose = pose.ok_or_else(|| bad(ln, "missing pose".into()))?;
        let pose = pose
            .split(';')
            .map(|j| {
                let v = reals(ln, j)?;
                if v.len() != 3 {
                    return Err(bad(ln, "pose entries need 3 components".into()));
                }
                Ok(Point3::new(v[0], v[1], v[2]))
            })
            .collect::<Result<Vec<_>>>()?;
        let expression = reals(ln, expr.ok_or_else(|| bad(ln, "missing expression".into()))?)?;
        track.push(PoseExpression { pose, expression });
    }
    Ok(track)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut out = create(path)?;
    body(&mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?))
}

pub fn view_name(camera: usize, frame: usize) -> String {
    format!("{camera}_{frame}.img1")
}

/// Writes `cloud.bpc`, `gauss.gau`, `tokens.tok`, `cond.ppm`, `track.txt`
/// and `views/` under `dir`.
pub fn write_identity(dir: &Path, id: &SyntheticIdentity, faces: usize, levels: u32) -> Result<()> {
    write_file(&dir.join("cloud.bpc"), |o| write_bpc(o, &id.cloud, faces, levels))?;
    write_file(&dir.join("gauss.gau"), |o| write_gau(o, &id.gaussians))?;
    write_file(&dir.join("tokens.tok"), |o| write_tok(o, &id.tokens))?;
    write_file(&dir.join("cond.ppm"), |o| write_ppm(o, &id.cond))?;
    write_file(&dir.join("track.txt"), |o| write_track(o, &id.track))?;
    for v in &id.views {
        write_file(&dir.join("views").join(view_name(v.camera, v.frame)), |o| write_img(o, &v.image))?;
    }
    Ok(())
}

/// Generates every identity and writes the dataset, the shared template
/// (`template.rig`), the camera set (`cameras/<i>.txt`) and `manifest.txt`.
pub fn build_dataset(
    root: &Path,
    seeds: &[u64],
    tpl: &RigTemplate<f64>,
    cfg: &SynthConfig,
    threads: usize,
) -> Result<Manifest> {
    cfg.validate()?;
    let splits = split_seeds(seeds, cfg.test_fraction)?;
    write_file(&root.join("template.rig"), |o| write_rig(o, tpl))?;
    for (i, cam) in cfg.camera_set().iter().enumerate() {
        write_file(&root.join("cameras").join(format!("{i}.txt")), |o| write_camera(o, cam))?;
    }
    let faces = tpl.num_faces();
    let points = map_indexed(seeds.len(), threads, |i| -> Result<usize> {
        let id = synth_identity(seeds[i], tpl, cfg)?;
        write_identity(&root.join(seeds[i].to_string()), &id, faces, cfg.coord_levels)?;
        Ok(id.cloud.len())
    });
    let entries = seeds
        .iter()
        .zip(splits)
        .zip(points)
        .map(|((&seed, split), n)| {
            Ok(ManifestEntry {
                seed,
                split,
                points: n?,
                dir: seed.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        template: "template.rig".into(),
        coord_levels: cfg.coord_levels,
        faces,
        cameras: cfg.cameras,
        frames: cfg.frames(),
        image_size: cfg.image_size,
        entries,
    };
    write_file(&root.join("manifest.txt"), |o| manifest.write(o))?;
    Ok(manifest)
}

/// Ground truth of one identity as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRecord {
    pub seed: u64,
    pub cloud: BoundPointCloud<f64>,
    pub gaussians: Vec<Gaussian<f32>>,
    pub tokens: TokenSequence,
    pub cond: Image<f32>,
    pub track: Vec<PoseExpression<f64>>,
}

impl IdentityRecord {
    pub fn bindings(&self) -> Vec<u32> {
        self.cloud.points.iter().map(|p| p.binding).collect()
    }
}

/// A dataset directory opened through its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub template: RigTemplate<f64>,
    pub cameras: Vec<Camera<f32>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = Manifest::parse(&text)?;
        let template: RigTemplate<f64> = read_rig(open(&root.join(&manifest.template))?)?;
        if template.num_faces() != manifest.faces {
            return Err(Error::format("manifest", "face count disagrees with the template"));
        }
        let cameras = (0..manifest.cameras)
            .map(|i| read_camera(open(&root.join("cameras").join(format!("{i}.txt")))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            template,
            cameras,
        })
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.manifest.coord_levels, self.manifest.faces as u32)
    }

    fn entry(&self, seed: u64) -> Result<&ManifestEntry> {
        self.manifest
            .entries
            .iter()
            .find(|e| e.seed == seed)
            .ok_or_else(|| Error::InvalidConfig(format!("seed {seed} is not in the dataset")))
    }

    pub fn identity_dir(&self, seed: u64) -> Result<PathBuf> {
        Ok(self.root.join(&self.entry(seed)?.dir))
    }

    pub fn identity(&self, seed: u64) -> Result<IdentityRecord> {
        let dir = self.identity_dir(seed)?;
        let (cloud, faces) = read_bpc(open(&dir.join("cloud.bpc"))?)?;
        if faces != self.manifest.faces {
            return Err(Error::format("BPC1", "face count disagrees with the manifest"));
        }
        let gaussians: Vec<Gaussian<f32>> = read_gau(open(&dir.join("gauss.gau"))?)?;
        if gaussians.len() != cloud.len() {
            return Err(Error::LengthMismatch {
                expected: cloud.len(),
                got: gaussians.len(),
            });
        }
        let track_path = dir.join("track.txt");
        let track = read_track(&fs::read_to_string(&track_path).map_err(|e| Error::io(&track_path, e))?)?;
        Ok(IdentityRecord {
            seed,
            cloud,
            gaussians,
            tokens: read_tok(open(&dir.join("tokens.tok"))?)?,
            cond: read_ppm(open(&dir.join("cond.ppm"))?)?,
            track,
        })
    }

    pub fn view(&self, seed: u64, camera: usize, frame: usize) -> Result<Image<f32>> {
        read_img(open(&self.identity_dir(seed)?.join("views").join(view_name(camera, frame)))?)
    }
}
