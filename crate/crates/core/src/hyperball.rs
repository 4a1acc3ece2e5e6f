//! Monte-Carlo machinery for the stationarity ⇒ compatibility argument.
//!
//! Class clusters are modelled as uniform distributions over closed hyperballs
//! centred at classifier prototypes. Expected distances between draws from two
//! such balls have no closed form in general, so they are estimated by paired
//! sampling. Nearest-neighbour angle and cap probability for `n` random points
//! on the unit sphere are computed in log space.
//!
//! Sampling is split into fixed-size chunks, each with its own ChaCha stream
//! selected by chunk index, and the per-chunk sums are reduced in chunk order.
//! Estimates therefore do not depend on how many worker threads ran.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::simplex::SimplexClassifier;

/// Samples per RNG stream.
pub const CHUNK: usize = 4096;

/// Default Monte-Carlo budget per estimate.
pub const DEFAULT_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperballSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl HyperballSpec {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::Domain(format!("hyperball radius {radius}")));
        }
        Ok(Self { center, radius })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Expected angle from one of `n` uniform points on the unit sphere in `R^d`
/// to its nearest neighbour, in radians.
pub fn expected_nn_angle(n: u64, d: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::Domain("nearest-neighbour angle needs n >= 1".into()));
    }
    if d < 3 {
        return Err(Error::Domain(format!(
            "nearest-neighbour angle needs d >= 3, got {d}"
        )));
    }
    let dm1 = (d - 1) as f64;
    let df = d as f64;
    let ln_inner = ln_gamma(df / 2.0) - (2.0 * PI.sqrt()).ln() - dm1.ln() - ln_gamma(dm1 / 2.0);
    let ln_theta = -(2.0 / dm1) * (n as f64).ln() + ln_gamma(1.0 + 1.0 / dm1) - ln_inner / dm1;
    Ok(ln_theta.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CapProbability {
    pub n: u64,
    pub d: usize,
    pub theta: f64,
    pub p: f64,
    /// `theta <= π/2`; beyond that the disc approximation of the cap no
    /// longer describes a small neighbourhood.
    pub small_angle: bool,
}

/// Probability of a random point of the unit sphere falling in the disc of
/// radius `sin θ_{n,d}` that locally approximates the cap around a point:
/// `sin(θ)^(d-2) · Γ(d/2) / (√π · Γ((d-1)/2))`.
pub fn cap_probability(n: u64, d: usize) -> Result<CapProbability> {
    let theta = expected_nn_angle(n, d)?;
    let s = theta.sin();
    if s <= 0.0 {
        return Err(Error::Domain(format!(
            "θ = {theta} leaves (0, π); cap probability undefined"
        )));
    }
    let df = d as f64;
    let ln_p = -0.5 * PI.ln() + (df - 2.0) * s.ln() + ln_gamma(df / 2.0) - ln_gamma((df - 1.0) / 2.0);
    let mut p = ln_p.exp();
    if p > 1.0 {
        if p - 1.0 <= 1e-12 {
            p = 1.0;
        } else {
            return Err(Error::Domain(format!(
                "cap probability {p} exceeds 1 at n={n}, d={d}"
            )));
        }
    }
    Ok(CapProbability {
        n,
        d,
        theta,
        p,
        small_angle: theta <= PI / 2.0,
    })
}

/// Writes a uniform draw from the ball of radius `radius` centred at the
/// origin into `out`.
pub fn sample_offset<R: Rng + ?Sized>(radius: f64, out: &mut [f64], rng: &mut R) {
    let d = out.len();
    if d == 0 {
        return;
    }
    let len = loop {
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let len = norm(out);
        if len > 0.0 {
            break len;
        }
    };
    // U in (0, 1]
    let u = 1.0 - rng.random::<f64>();
    let scale = radius * u.powf(1.0 / d as f64) / len;
    for v in out.iter_mut() {
        *v *= scale;
    }
}

/// Uniform point in the closed ball: Gaussian direction, radius `r · U^(1/d)`.
pub fn sample_in_ball<R: Rng + ?Sized>(ball: &HyperballSpec, rng: &mut R) -> Vec<f64> {
    let mut x = vec![0.0; ball.dim()];
    sample_offset(ball.radius, &mut x, rng);
    for (xi, ci) in x.iter_mut().zip(&ball.center) {
        *xi += ci;
    }
    x
}

fn chunk_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Mean of `‖x_a − x_b‖` over `samples` independent pairs with `x_a` uniform in
/// `ball_a` and `x_b` uniform in `ball_b`.
pub fn mc_expected_distance(
    ball_a: &HyperballSpec,
    ball_b: &HyperballSpec,
    samples: usize,
    seed: u64,
) -> Result<DistanceEstimate> {
    if ball_a.dim() != ball_b.dim() {
        return Err(Error::DimensionMismatch {
            expected: ball_a.dim(),
            actual: ball_b.dim(),
        });
    }
    if samples == 0 {
        return Err(Error::Domain("Monte-Carlo estimate needs samples >= 1".into()));
    }
    let d = ball_a.dim();
    // Work with centre difference + offset difference so a common translation
    // of both balls cannot change a single sample.
    let delta: Vec<f64> = ball_a
        .center
        .iter()
        .zip(&ball_b.center)
        .map(|(a, b)| a - b)
        .collect();
    let chunks = samples.div_ceil(CHUNK);
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c as u64);
            let n = CHUNK.min(samples - c * CHUNK);
            let mut oa = vec![0.0; d];
            let mut ob = vec![0.0; d];
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                sample_offset(ball_a.radius, &mut oa, &mut rng);
                sample_offset(ball_b.radius, &mut ob, &mut rng);
                let dist = delta
                    .iter()
                    .zip(oa.iter().zip(&ob))
                    .map(|(dc, (a, b))| {
                        let v = dc + (a - b);
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt();
                s += dist;
                s2 += dist * dist;
            }
            (s, s2)
        })
        .collect();
    let (sum, sum_sq) = partial
        .iter()
        .fold((0.0, 0.0), |(a, b), (s, s2)| (a + s, b + s2));
    let n = samples as f64;
    let mean = sum / n;
    let var = if samples > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(DistanceEstimate {
        mean,
        std_error: (var / n).sqrt(),
        samples,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoremMode {
    SameClass,
    DifferentClass,
    Shift,
}

impl TheoremMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TheoremMode::SameClass => "same_class",
            TheoremMode::DifferentClass => "different_class",
            TheoremMode::Shift => "shift",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TheoremParams {
    pub mode: TheoremMode,
    pub dims: Vec<usize>,
    /// Only used by [`TheoremMode::Shift`].
    pub shifts: Vec<f64>,
    pub r_old: f64,
    pub r_new: f64,
    pub simplex_k: usize,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremRow {
    pub mode: TheoremMode,
    pub d: usize,
    pub shift: Option<f64>,
    /// old ball vs updated (shrunk and/or shifted) ball
    pub kt: DistanceEstimate,
    /// old ball vs old ball
    pub kk: DistanceEstimate,
}

impl TheoremRow {
    /// `kk.mean − kt.mean` in units of the combined standard error.
    pub fn margin_sigmas(&self) -> f64 {
        let se = (self.kt.std_error.powi(2) + self.kk.std_error.powi(2)).sqrt();
        (self.kk.mean - self.kt.mean) / se
    }
}

/// splitmix64 finaliser, used to derive independent seeds per table row.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Two distinct unit-norm simplex prototypes embedded in `R^d`.
///
/// Uses `build_simplex(simplex_k)` zero-padded to `d` when it fits, and the
/// `d + 1` simplex otherwise, so the pair keeps the regular-simplex angle
/// available in that dimension.
fn prototype_pair(simplex_k: usize, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = simplex_k.min(d + 1).max(2);
    let cls = SimplexClassifier::build(k)?;
    let embed = |row: &[f64]| {
        let n = norm(row);
        let mut v = vec![0.0; d];
        for (dst, src) in v.iter_mut().zip(row) {
            *dst = src / n;
        }
        v
    };
    Ok((embed(cls.prototype(0)), embed(cls.prototype(1))))
}

pub fn theorem_experiment(p: &TheoremParams) -> Result<Vec<TheoremRow>> {
    if !(p.r_new <= p.r_old) || p.r_new < 0.0 {
        return Err(Error::Domain(format!(
            "updated radius {} must not exceed old radius {}",
            p.r_new, p.r_old
        )));
    }
    if p.simplex_k < 2 {
        return Err(Error::SimplexTooSmall(p.simplex_k));
    }
    let mut rows = Vec::new();
    for &d in &p.dims {
        if d < 1 {
            return Err(Error::Domain("dimension must be >= 1".into()));
        }
        let (wi, wj) = prototype_pair(p.simplex_k, d)?;
        let seed_kt = mix_seed(p.seed, d as u64, 1);
        let seed_kk = mix_seed(p.seed, d as u64, 2);
        let old_i = HyperballSpec::new(wi.clone(), p.r_old)?;
        match p.mode {
            TheoremMode::SameClass => {
                let new_i = HyperballSpec::new(wi.clone(), p.r_new)?;
                rows.push(TheoremRow {
                    mode: p.mode,
                    d,
                    shift: None,
                    kt: mc_expected_distance(&old_i, &new_i, p.samples, seed_kt)?,
                    kk: mc_expected_distance(&old_i, &old_i, p.samples, seed_kk)?,
                });
            }
            TheoremMode::DifferentClass => {
                let old_j = HyperballSpec::new(wj.clone(), p.r_old)?;
                let new_j = HyperballSpec::new(wj.clone(), p.r_new)?;
                rows.push(TheoremRow {
                    mode: p.mode,
                    d,
                    shift: None,
                    kt: mc_expected_distance(&old_i, &new_j, p.samples, seed_kt)?,
                    kk: mc_expected_distance(&old_i, &old_j, p.samples, seed_kk)?,
                });
            }
            TheoremMode::Shift => {
                // same seed across shifts: common random numbers along the sweep
                let kk = mc_expected_distance(&old_i, &old_i, p.samples, seed_kk)?;
                for &s in &p.shifts {
                    let mut c = wi.clone();
                    c[0] += s;
                    let moved = HyperballSpec::new(c, p.r_new)?;
                    rows.push(TheoremRow {
                        mode: p.mode,
                        d,
                        shift: Some(s),
                        kt: mc_expected_distance(&old_i, &moved, p.samples, seed_kt)?,
                        kk,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub const THEOREM_CSV_HEADER: &str = "mode,d_or_shift,mean_kt,stderr_kt,mean_kk,stderr_kk,samples,seed";

/// CSV table; shift rows carry the dimension in the mode column
/// (`shift_d64`) and the shift in `d_or_shift`.
pub fn theorem_csv(rows: &[TheoremRow]) -> String {
    let mut out = String::from(THEOREM_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let (mode, key) = match r.shift {
            Some(s) => (format!("shift_d{}", r.d), format!("{s}")),
            None => (r.mode.as_str().to_string(), r.d.to_string()),
        };
        let _ = writeln!(
            out,
            "{mode},{key},{},{},{},{},{},{}",
            r.kt.mean, r.kt.std_error, r.kk.mean, r.kk.std_error, r.kt.samples, r.kt.seed
        );
    }
    out
}

pub const CAP_CSV_HEADER: &str = "n,d,theta_rad,p";

pub fn cap_probability_csv(rows: &[CapProbability]) -> String {
    let mut out = String::from(CAP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.n, r.d, r.theta, r.p);
    }
    out
}
