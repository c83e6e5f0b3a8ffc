//! Pose-sequence and corpus IO, and a procedural gloss→pose corpus whose
//! ground truth is a deterministic function of the token sequence.
//!
//! File layouts:
//! - pose file: `{"topology": str, "fps": num, "frames": [[[x, y, z] × J] × S]}`
//! - corpus manifest: JSON lines `{"gloss": [str...], "pose_file": path}`,
//!   pose paths relative to the manifest's directory
//! - vocabulary: one token per line, index = line number

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acd::GlossSequence;
use crate::disentangle::{reassemble, Pose4D};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::skeleton::{Pose3D, SkeletonTopology};

pub const DEFAULT_FPS: f64 = 25.0;
pub const CROSS_FADE_FRAMES: usize = 3;
/// Glosses per generated sample, inclusive range.
pub const SYNTHETIC_GLOSSES: (usize, usize) = (2, 4);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    pub topology: String,
    pub fps: f64,
    pub frames: Vec<Vec<[f64; 3]>>,
}

impl PoseSequence {
    pub fn new(topology: &SkeletonTopology, frames: Vec<Vec<[f64; 3]>>) -> Result<Self> {
        let seq = Self {
            topology: topology.id().to_string(),
            fps: DEFAULT_FPS,
            frames,
        };
        seq.validate(Some(topology))?;
        Ok(seq)
    }

    /// From a flat `S×J×3` buffer.
    pub fn from_flat(values: &[f64], frames: usize, topology: &SkeletonTopology) -> Result<Self> {
        let j = topology.num_joints();
        if values.len() != frames * j * 3 {
            return Err(Error::Shape(format!(
                "{} values for {frames} frames of {j} joints",
                values.len()
            )));
        }
        let frames = values
            .chunks_exact(j * 3)
            .map(|f| f.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
            .collect();
        Self::new(topology, frames)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_joints(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn frame(&self, s: usize) -> Pose3D {
        Pose3D::new(self.frames[s].clone())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.frames.iter().flatten().flatten().copied().collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.num_frames(), self.num_joints(), 3],
            self.to_flat(),
        )
        .expect("validated shape")
    }

    /// Checks `S ≥ 1`, uniform joint count (matching `topology` when given),
    /// and finiteness.
    pub fn validate(&self, topology: Option<&SkeletonTopology>) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Shape("S ≥ 1 violated: no frames".into()));
        }
        let j = topology.map_or(self.frames[0].len(), SkeletonTopology::num_joints);
        for (s, f) in self.frames.iter().enumerate() {
            if f.len() != j {
                return Err(Error::Shape(format!(
                    "frame {s} has {} joints, expected {j}",
                    f.len()
                )));
            }
            if f.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "frame {s} has non-finite values"
                )));
            }
        }
        Ok(())
    }
}

pub fn read_pose_file(
    path: impl AsRef<Path>,
    topology: Option<&SkeletonTopology>,
) -> Result<PoseSequence> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let seq: PoseSequence = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    seq.validate(topology)?;
    Ok(seq)
}

pub fn write_pose_file(seq: &PoseSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(seq).expect("pose sequence serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub gloss: GlossSequence,
    pub pose: PoseSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocabulary: Vec<String>,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub gloss: Vec<String>,
    pub pose_file: String,
}

impl Corpus {
    pub fn validate(&self, topology: &SkeletonTopology) -> Result<()> {
        for s in &self.samples {
            if let Some(&t) = s.gloss.tokens.iter().find(|&&t| t >= self.vocabulary.len()) {
                return Err(Error::InvalidArgument(format!(
                    "sample {}: token {t} outside vocabulary",
                    s.id
                )));
            }
            s.pose.validate(Some(topology))?;
        }
        Ok(())
    }

    /// First `ceil(fraction·n)` samples and the rest.
    pub fn split(&self, fraction: f64) -> (Corpus, Corpus) {
        let n = (self.samples.len() as f64 * fraction).ceil() as usize;
        let n = n.min(self.samples.len());
        let part = |s: &[Sample]| Corpus {
            vocabulary: self.vocabulary.clone(),
            samples: s.to_vec(),
        };
        (part(&self.samples[..n]), part(&self.samples[n..]))
    }

    pub fn words(&self, gloss: &GlossSequence) -> Vec<String> {
        gloss
            .tokens
            .iter()
            .map(|&t| self.vocabulary[t].clone())
            .collect()
    }

    /// Writes `vocab.txt`, `manifest.jsonl` and `poses/<id>.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let poses = dir.join("poses");
        std::fs::create_dir_all(&poses).map_err(|e| Error::io(&poses, e))?;
        write_vocabulary(&self.vocabulary, dir.join("vocab.txt"))?;
        let entries: Vec<ManifestEntry> = self
            .samples
            .iter()
            .map(|s| {
                let rel = format!("poses/{}.json", s.id);
                write_pose_file(&s.pose, dir.join(&rel))?;
                Ok(ManifestEntry {
                    gloss: self.words(&s.gloss),
                    pose_file: rel,
                })
            })
            .collect::<Result<_>>()?;
        write_manifest(&entries, dir.join("manifest.jsonl"))
    }

    /// Loads a manifest; sample ids are pose-file stems.
    pub fn read(
        manifest: impl AsRef<Path>,
        vocab: impl AsRef<Path>,
        topology: &SkeletonTopology,
    ) -> Result<Self> {
        let manifest = manifest.as_ref();
        let vocabulary = read_vocabulary(vocab)?;
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let samples = read_manifest(manifest)?
            .into_iter()
            .map(|e| {
                let tokens = e
                    .gloss
                    .iter()
                    .map(|w| {
                        vocabulary
                            .iter()
                            .position(|v| v == w)
                            .ok_or_else(|| Error::UnknownToken(w.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let path = base.join(&e.pose_file);
                Ok(Sample {
                    id: sample_id(&e.pose_file),
                    gloss: GlossSequence::new(tokens),
                    pose: read_pose_file(&path, Some(topology))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            vocabulary,
            samples,
        })
    }
}

pub fn sample_id(pose_file: &str) -> String {
    Path::new(pose_file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| pose_file.to_string())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).expect("manifest entry serializes");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_vocabulary(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

pub fn write_vocabulary(vocab: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for v in vocab {
        writeln!(f, "{v}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Rest direction and nominal length of the bone ending at a named joint.
/// Arm and head lengths add up to 1.0 along a vertical chain.
fn rest_bone(name: &str) -> Option<([f64; 3], f64)> {
    let side = |n: &str| -> f64 {
        if n.starts_with('l') {
            1.0
        } else {
            -1.0
        }
    };
    let bone = match name {
        "nose" => ([0.0, 1.0, 0.15], 0.30),
        "r_shoulder" | "l_shoulder" => ([side(name), 0.0, 0.0], 0.20),
        "r_elbow" | "l_elbow" => ([0.15 * side(name), -1.0, 0.1], 0.38),
        "r_wrist" | "l_wrist" => ([-0.1 * side(name), 0.3, 1.0], 0.32),
        n if n.ends_with("h_wrist") => ([0.0, 0.3, 1.0], 0.065),
        n if n.len() > 3 && (n.starts_with("rh_") || n.starts_with("lh_")) => {
            let s = if n.starts_with('l') { 1.0 } else { -1.0 };
            let finger = &n[3..n.len() - 1];
            let fan = match finger {
                "thumb" => -0.6,
                "index" => -0.25,
                "middle" => 0.0,
                "ring" => 0.2,
                _ => 0.4,
            };
            ([fan * s, 0.5, 1.0], 0.06)
        }
        _ => return None,
    };
    Some(bone)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D1_049B_1331_11EB);
    x ^ (x >> 31)
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Rotation about x by `a`, then about z by `b`.
fn rotate(v: [f64; 3], a: f64, b: f64) -> [f64; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let y = ca * v[1] - sa * v[2];
    let z = sa * v[1] + ca * v[2];
    let x = v[0];
    [cb * x - sb * y, sb * x + cb * y, z]
}

/// Per-token motion parameters for every bone.
#[derive(Debug, Clone)]
struct Motif {
    rest: Vec<[f64; 3]>,
    length: Vec<f64>,
    offset: Vec<[f64; 2]>,
    amplitude: Vec<[f64; 2]>,
    cycles: Vec<f64>,
    phase: Vec<[f64; 2]>,
}

impl Motif {
    fn for_token(token: usize, topology: &SkeletonTopology) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(token as u64 ^ 0x5167_6E5F_4D6F_7469));
        let j = topology.num_joints();
        let mut m = Motif {
            rest: vec![[0.0; 3]; j],
            length: vec![0.0; j],
            offset: vec![[0.0; 2]; j],
            amplitude: vec![[0.0; 2]; j],
            cycles: vec![0.0; j],
            phase: vec![[0.0; 2]; j],
        };
        for c in 0..j {
            if c == topology.root() {
                continue;
            }
            let (dir, len) = rest_bone(&topology.joint_names()[c]).unwrap_or_else(|| {
                let h = splitmix64(c as u64);
                let ang = (h % 6283) as f64 / 1000.0;
                ([ang.cos(), -1.0, ang.sin()], 0.2)
            });
            m.rest[c] = unit(dir);
            m.length[c] = len * (1.0 + rng.random_range(-0.1..0.1));
            m.offset[c] = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            m.amplitude[c] = [rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)];
            m.cycles[c] = [0.5, 1.0, 1.5][rng.random_range(0..3)];
            m.phase[c] = [
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ];
        }
        m
    }

    fn frame(&self, f: usize, frames: usize, topology: &SkeletonTopology) -> Pose3D {
        let u = f as f64 / frames as f64;
        let attrs = (0..topology.num_joints())
            .map(|c| {
                if c == topology.root() {
                    return [0.0; 4];
                }
                let w = std::f64::consts::TAU * self.cycles[c] * u;
                let a = self.offset[c][0] + self.amplitude[c][0] * (w + self.phase[c][0]).sin();
                let b = self.offset[c][1] + self.amplitude[c][1] * (w + self.phase[c][1]).sin();
                let d = rotate(self.rest[c], a, b);
                [d[0], d[1], d[2], self.length[c]]
            })
            .collect();
        reassemble(&Pose4D { attrs }, [0.0; 3], topology)
    }
}

/// The motif of a single token, `frames` frames long.
pub fn token_motif(token: usize, frames: usize, topology: &SkeletonTopology) -> Vec<Pose3D> {
    let m = Motif::for_token(token, topology);
    (0..frames).map(|f| m.frame(f, frames, topology)).collect()
}

/// Ground-truth pose for a token sequence: motifs back to back, the first
/// [`CROSS_FADE_FRAMES`] frames of each later motif blended linearly from the
/// previous motif's last frame.
pub fn synthetic_sequence(
    tokens: &[usize],
    frames_per_gloss: usize,
    topology: &SkeletonTopology,
) -> Result<PoseSequence> {
    let mut frames: Vec<Vec<[f64; 3]>> = Vec::with_capacity(tokens.len() * frames_per_gloss);
    for (k, &tok) in tokens.iter().enumerate() {
        let motif = token_motif(tok, frames_per_gloss, topology);
        let prev_last = frames.last().cloned();
        for (i, pose) in motif.into_iter().enumerate() {
            match &prev_last {
                Some(prev) if k > 0 && i < CROSS_FADE_FRAMES => {
                    let w = (i + 1) as f64 / (CROSS_FADE_FRAMES + 1) as f64;
                    frames.push(
                        prev.iter()
                            .zip(&pose.coords)
                            .map(|(a, b)| {
                                [
                                    (1.0 - w) * a[0] + w * b[0],
                                    (1.0 - w) * a[1] + w * b[1],
                                    (1.0 - w) * a[2] + w * b[2],
                                ]
                            })
                            .collect(),
                    );
                }
                _ => frames.push(pose.coords),
            }
        }
    }
    PoseSequence::new(topology, frames)
}

pub fn synthetic_vocabulary(vocab_size: usize) -> Vec<String> {
    (0..vocab_size).map(|i| format!("G{i:03}")).collect()
}

pub fn generate_synthetic_corpus(
    vocab_size: usize,
    samples: usize,
    frames_per_gloss: usize,
    topology: &SkeletonTopology,
    seed: u64,
) -> Result<Corpus> {
    if vocab_size < 2 {
        return Err(Error::InvalidArgument("vocab_size ≥ 2 required".into()));
    }
    if frames_per_gloss == 0 {
        return Err(Error::InvalidArgument(
            "frames_per_gloss ≥ 1 required".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..samples)
        .map(|i| {
            let n = rng.random_range(SYNTHETIC_GLOSSES.0..=SYNTHETIC_GLOSSES.1);
            let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab_size)).collect();
            Ok(Sample {
                id: format!("sample_{i:05}"),
                pose: synthetic_sequence(&tokens, frames_per_gloss, topology)?,
                gloss: GlossSequence::new(tokens),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Corpus {
        vocabulary: synthetic_vocabulary(vocab_size),
        samples,
    })
}
