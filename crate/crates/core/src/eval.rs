//! Pose metrics: joint position error, bone angle error and a Fréchet
//! distance over root-centred pose features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::PoseSequence;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::skeleton::SkeletonTopology;

/// Bones shorter than this in either pose are left out of the angle error.
pub const DEGENERATE_BONE: f64 = 1e-9;

fn check_lengths(target: &PoseSequence, pred: &PoseSequence) -> Result<()> {
    if target.num_frames() != pred.num_frames() || target.num_joints() != pred.num_joints() {
        return Err(Error::Shape(format!(
            "target is {}×{}, prediction is {}×{}",
            target.num_frames(),
            target.num_joints(),
            pred.num_frames(),
            pred.num_joints()
        )));
    }
    Ok(())
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean Euclidean joint distance over frames and joints.
pub fn mpjpe(target: &PoseSequence, pred: &PoseSequence) -> Result<f64> {
    check_lengths(target, pred)?;
    let (sum, n) = target
        .frames
        .iter()
        .zip(&pred.frames)
        .flat_map(|(a, b)| a.iter().zip(b))
        .fold((0.0, 0usize), |(s, n), (a, b)| (s + dist(*a, *b), n + 1));
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleError {
    pub degrees: f64,
    /// Bone-frame pairs that contributed.
    pub counted: usize,
    /// Bone-frame pairs skipped because a bone was degenerate.
    pub excluded: usize,
}

pub fn mpjae_detail(
    target: &PoseSequence,
    pred: &PoseSequence,
    topology: &SkeletonTopology,
) -> Result<AngleError> {
    check_lengths(target, pred)?;
    if target.num_joints() != topology.num_joints() {
        return Err(Error::Shape(format!(
            "{} joints for topology {}",
            target.num_joints(),
            topology.id()
        )));
    }
    let mut err = AngleError {
        degrees: 0.0,
        counted: 0,
        excluded: 0,
    };
    let mut sum = 0.0;
    for (a, b) in target.frames.iter().zip(&pred.frames) {
        for c in (0..topology.num_joints()).filter(|&c| c != topology.root()) {
            let p = topology.parents()[c];
            let u: Vec<f64> = (0..3).map(|k| a[c][k] - a[p][k]).collect();
            let v: Vec<f64> = (0..3).map(|k| b[c][k] - b[p][k]).collect();
            let (nu, nv) = (
                u.iter().map(|x| x * x).sum::<f64>().sqrt(),
                v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            );
            if nu <= DEGENERATE_BONE || nv <= DEGENERATE_BONE {
                err.excluded += 1;
                continue;
            }
            // atan2 stays accurate near 0° and 180°, where acos does not
            let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
            let cross = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            let sin = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
            sum += sin.atan2(dot).to_degrees();
            err.counted += 1;
        }
    }
    if err.counted > 0 {
        err.degrees = sum / err.counted as f64;
    }
    Ok(err)
}

/// Mean bone-direction angle error in degrees.
pub fn mpjae(
    target: &PoseSequence,
    pred: &PoseSequence,
    topology: &SkeletonTopology,
) -> Result<f64> {
    Ok(mpjae_detail(target, pred, topology)?.degrees)
}

/// Per-frame features: coordinates relative to the root, flattened.
pub fn pose_features(seq: &PoseSequence, topology: &SkeletonTopology) -> Vec<Vec<f64>> {
    let r = topology.root();
    seq.frames
        .iter()
        .map(|f| {
            f.iter()
                .flat_map(|p| (0..3).map(move |k| p[k] - f[r][k]))
                .collect()
        })
        .collect()
}

/// Sample mean and unbiased covariance of row vectors.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a Gaussian fit needs at least 2 feature vectors, got {}",
            features.len()
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let n = features.len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians. The trace of `(Σ₁Σ₂)^{1/2}` is
/// taken as that of `(√Σ₁ Σ₂ √Σ₁)^{1/2}`, which has the same eigenvalues and
/// is symmetric.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    sigma2: &DMatrix<f64>,
) -> Result<f64> {
    if mu1.len() != mu2.len() || sigma1.shape() != sigma2.shape() || sigma1.nrows() != mu1.len() {
        return Err(Error::Shape("Gaussian dimensions differ".into()));
    }
    let root1 = psd_sqrt(sigma1);
    let inner = &root1 * sigma2 * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = mu1 - mu2;
    let d = diff.dot(&diff) + sigma1.trace() + sigma2.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

pub fn fid(
    real: &[PoseSequence],
    generated: &[PoseSequence],
    topology: &SkeletonTopology,
) -> Result<f64> {
    let features = |set: &[PoseSequence]| -> Vec<Vec<f64>> {
        set.iter()
            .flat_map(|s| pose_features(s, topology))
            .collect()
    };
    let (m1, s1) = gaussian_fit(&features(real))?;
    let (m2, s2) = gaussian_fit(&features(generated))?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    pub frames: usize,
    pub mpjpe: Option<f64>,
    pub mpjae: Option<f64>,
    pub excluded_bones: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub mpjae: f64,
    pub fid: f64,
    pub evaluated: usize,
    pub failed: usize,
    /// Bone-frame pairs left out of `mpjae` as degenerate.
    pub excluded_bones: usize,
    pub per_sequence: Vec<SequenceMetrics>,
}

/// Metrics over `(id, reference, prediction)` triples. Pairs whose shapes
/// disagree get an error entry and are left out of the aggregates, which are
/// frame-weighted means over the rest.
pub fn evaluate_set(
    pairs: &[(String, PoseSequence, PoseSequence)],
    topology: &SkeletonTopology,
    exec: Execution,
) -> Result<MetricReport> {
    let per_sequence = exec.map(pairs, |(id, reference, pred)| {
        let frames = reference.num_frames();
        match (
            mpjpe(reference, pred),
            mpjae_detail(reference, pred, topology),
        ) {
            (Ok(p), Ok(a)) => SequenceMetrics {
                id: id.clone(),
                frames,
                mpjpe: Some(p),
                mpjae: Some(a.degrees),
                excluded_bones: a.excluded,
                error: None,
            },
            (Err(e), _) | (_, Err(e)) => SequenceMetrics {
                id: id.clone(),
                frames,
                mpjpe: None,
                mpjae: None,
                excluded_bones: 0,
                error: Some(e.to_string()),
            },
        }
    });
    let valid: Vec<usize> = (0..pairs.len())
        .filter(|&i| per_sequence[i].error.is_none())
        .collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument(
            "no comparable sequence pairs".into(),
        ));
    }
    let weight: f64 = valid.iter().map(|&i| per_sequence[i].frames as f64).sum();
    let weighted = |f: fn(&SequenceMetrics) -> Option<f64>| -> f64 {
        valid
            .iter()
            .map(|&i| f(&per_sequence[i]).unwrap_or(0.0) * per_sequence[i].frames as f64)
            .sum::<f64>()
            / weight
    };
    let reals: Vec<PoseSequence> = valid.iter().map(|&i| pairs[i].1.clone()).collect();
    let gens: Vec<PoseSequence> = valid.iter().map(|&i| pairs[i].2.clone()).collect();
    Ok(MetricReport {
        mpjpe: weighted(|m| m.mpjpe),
        mpjae: weighted(|m| m.mpjae),
        fid: fid(&reals, &gens, topology)?,
        evaluated: valid.len(),
        failed: pairs.len() - valid.len(),
        excluded_bones: per_sequence.iter().map(|m| m.excluded_bones).sum(),
        per_sequence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(frames: Vec<Vec<[f64; 3]>>) -> PoseSequence {
        PoseSequence {
            topology: "test".into(),
            fps: 25.0,
            frames,
        }
    }

    fn random_seq(s: usize, j: usize, rng: &mut ChaCha8Rng) -> PoseSequence {
        seq((0..s)
            .map(|_| {
                (0..j)
                    .map(|_| [rng.random(), rng.random(), rng.random()])
                    .collect()
            })
            .collect())
    }

    fn chain3() -> SkeletonTopology {
        SkeletonTopology::new(
            "chain3",
            vec!["a".into(), "b".into(), "c".into()],
            vec![0, 0, 1],
            0,
        )
        .unwrap()
    }

    #[test]
    fn mpjpe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_seq(4, 8, &mut rng);
        assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
        let t = seq(vec![vec![[0.0; 3], [1.0, 1.0, 1.0]]]);
        let p = seq(vec![vec![[3.0, 4.0, 0.0], [1.0, 1.0, 1.0]]]);
        assert_eq!(mpjpe(&t, &p).unwrap(), 2.5);
        let c = [0.3, -1.2, 2.0];
        let moved = seq(a
            .frames
            .iter()
            .map(|f| {
                f.iter()
                    .map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
                    .collect()
            })
            .collect());
        let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        assert!((mpjpe(&a, &moved).unwrap() - norm).abs() < 1e-12);
        let b = random_seq(4, 8, &mut rng);
        assert_eq!(mpjpe(&a, &b).unwrap(), mpjpe(&b, &a).unwrap());
        assert!(mpjpe(&a, &random_seq(3, 8, &mut rng)).is_err());
    }

    #[test]
    fn mpjae_examples() {
        let topo = chain3();
        let t = seq(vec![vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]]);
        assert_eq!(mpjae(&t, &t, &topo).unwrap(), 0.0);
        // second bone turned 90°
        let p = seq(vec![vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]]);
        assert!((mpjae(&t, &p, &topo).unwrap() - 45.0).abs() < 1e-12);
        // second bone reversed
        let q = seq(vec![vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]]);
        assert!((mpjae(&t, &q, &topo).unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(mpjae(&t, &q, &topo).unwrap(), mpjae(&q, &t, &topo).unwrap());
        // coincident joints are excluded, not averaged in
        let d = seq(vec![vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]]);
        let e = mpjae_detail(&t, &d, &topo).unwrap();
        assert_eq!((e.degrees, e.counted, e.excluded), (0.0, 1, 1));
    }

    #[test]
    fn mpjae_is_bounded() {
        let topo = SkeletonTopology::toy8();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (a, b) = (random_seq(3, 8, &mut rng), random_seq(3, 8, &mut rng));
            let v = mpjae(&a, &b, &topo).unwrap();
            assert!((0.0..=180.0).contains(&v));
        }
    }

    #[test]
    fn fid_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let topo = SkeletonTopology::toy8();
        let set: Vec<PoseSequence> = (0..5).map(|_| random_seq(6, 8, &mut rng)).collect();
        assert!(fid(&set, &set, &topo).unwrap() < 1e-6);

        let a: [f64; 4] = [0.5, 2.0, 1.0, 0.1];
        let b: [f64; 4] = [1.5, 0.3, 1.0, 4.0];
        let mu = DVector::from_vec(vec![0.2, -0.1, 0.0, 1.0]);
        let sa = DMatrix::from_diagonal(&DVector::from_vec(a.to_vec()));
        let sb = DMatrix::from_diagonal(&DVector::from_vec(b.to_vec()));
        let oracle: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2))
            .sum();
        assert!((frechet_distance(&mu, &sa, &mu, &sb).unwrap() - oracle).abs() < 1e-9);

        let shift = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0]);
        let mu2 = &mu + &shift;
        let d = frechet_distance(&mu, &sa, &mu2, &sa).unwrap();
        assert!((d - shift.dot(&shift)).abs() < 1e-6);
    }

    #[test]
    fn fid_of_shifted_features_is_squared_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let topo = SkeletonTopology::toy8();
        let set: Vec<PoseSequence> = (0..4).map(|_| random_seq(10, 8, &mut rng)).collect();
        // moving one non-root joint shifts the feature mean only
        let off = [0.3, 0.0, -0.4];
        let moved: Vec<PoseSequence> = set
            .iter()
            .map(|s| {
                let mut s = s.clone();
                for f in &mut s.frames {
                    for k in 0..3 {
                        f[3][k] += off[k];
                    }
                }
                s
            })
            .collect();
        let d = fid(&set, &moved, &topo).unwrap();
        assert!((d - 0.25).abs() < 1e-6, "{d}");
    }

    #[test]
    fn fid_is_symmetric_and_needs_two_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let topo = SkeletonTopology::toy8();
        for _ in 0..5 {
            let a: Vec<PoseSequence> = (0..3).map(|_| random_seq(8, 8, &mut rng)).collect();
            let b: Vec<PoseSequence> = (0..2).map(|_| random_seq(9, 8, &mut rng)).collect();
            let (x, y) = (fid(&a, &b, &topo).unwrap(), fid(&b, &a, &topo).unwrap());
            assert!((x - y).abs() < 1e-6, "{x} {y}");
            assert!(x >= 0.0);
        }
        let one = vec![random_seq(1, 8, &mut rng)];
        assert!(fid(&one, &one, &topo).is_err());
    }

    #[test]
    fn set_report_handles_mismatches() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let topo = SkeletonTopology::toy8();
        let a = random_seq(5, 8, &mut rng);
        let b = random_seq(5, 8, &mut rng);
        let pairs = vec![
            ("x".to_string(), a.clone(), a.clone()),
            ("y".to_string(), b.clone(), b.clone()),
            ("z".to_string(), a.clone(), random_seq(3, 8, &mut rng)),
        ];
        let r = evaluate_set(&pairs, &topo, Execution::default()).unwrap();
        assert_eq!((r.mpjpe, r.mpjae), (0.0, 0.0));
        assert!(r.fid < 1e-6, "{}", r.fid);
        assert_eq!((r.evaluated, r.failed), (2, 1));
        assert!(r.per_sequence[2].error.is_some());
        let json = serde_json::to_value(&r).unwrap();
        for key in ["mpjpe", "mpjae", "fid", "per_sequence", "excluded_bones"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
