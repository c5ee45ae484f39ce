//! Synthetic heads with planted column (attention sink) and slash (fixed
//! offset) patterns.
//!
//! Logits are assembled from disjoint groups of head dimensions:
//!
//! * a bias dimension where every query is 1, so a key's coordinate is a
//!   per-key logit offset (sink strength plus smooth salience);
//! * a log-position dimension where query `i` carries `ln(i + 1)` and sink
//!   keys carry 1, so a sink keeps a stable share of each row as rows grow;
//! * two random-frequency rotary blocks producing a kernel that peaks where
//!   `i − j` equals a slash offset. One block scales with `ln(i + 1)`, the
//!   other carries each slash's strength;
//! * Gaussian noise dimensions at `noise_scale`.
//!
//! Pattern strengths are then calibrated against exact probability rows
//! until each planted mass is close to its target.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{probability_row, AttentionHead, HeadSet};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Half width, in tokens, of a planted slash band.
pub const SLASH_HALF_WIDTH: usize = 8;

const MAX_CALIBRATION_ROUNDS: usize = 20;
const CALIBRATION_TOLERANCE: f64 = 0.2;
const CALIBRATION_GOAL: f64 = 0.04;
const MEASURED_ROWS: usize = 512;

/// Recipe for a synthetic head set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(rename = "S", alias = "seq_len")]
    pub seq_len: usize,
    pub d: usize,
    #[serde(default = "one")]
    pub n_heads: usize,
    /// `(key position, target mass fraction)`
    #[serde(default)]
    pub sink_columns: Vec<(usize, f64)>,
    /// `(offset q − k, target mass fraction)`
    #[serde(default)]
    pub slash_offsets: Vec<(usize, f64)>,
    #[serde(default)]
    pub noise_scale: f64,
    /// Standard deviation of a smooth per-key logit offset shared by all
    /// queries.
    #[serde(default)]
    pub salience_scale: f64,
    /// Correlation length of the salience profile, in tokens.
    #[serde(default = "default_salience_length")]
    pub salience_length: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_salience_length() -> usize {
    256
}

impl SyntheticSpec {
    /// Sink at token 0 plus a local window, with light noise.
    pub fn sink_local(seq_len: usize, d: usize, seed: u64) -> Self {
        Self {
            seq_len,
            d,
            n_heads: 1,
            sink_columns: vec![(0, 0.35)],
            slash_offsets: vec![(0, 0.62)],
            noise_scale: 0.2,
            salience_scale: 0.0,
            salience_length: default_salience_length(),
            seed,
        }
    }

    /// Several sinks and slashes over a salient, noisy background.
    pub fn composed(seq_len: usize, d: usize, seed: u64) -> Self {
        let s = seq_len;
        Self {
            seq_len,
            d,
            n_heads: 1,
            sink_columns: vec![(0, 0.2), (s * 3 / 8, 0.08)],
            slash_offsets: vec![(0, 0.3), (s / 16 + 40, 0.08)],
            noise_scale: 0.5,
            salience_scale: 0.5,
            salience_length: 64,
            seed,
        }
    }

    pub fn with_seq_len(&self, seq_len: usize) -> Self {
        Self {
            seq_len,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.d == 0 || self.n_heads == 0 {
            return Err(Error::invalid("S, d and n_heads must all be at least 1"));
        }
        let targets = self
            .sink_columns
            .iter()
            .chain(&self.slash_offsets)
            .map(|&(_, t)| t);
        let mut total = 0.0;
        for t in targets {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid(format!("target mass {t} outside [0, 1]")));
            }
            total += t;
        }
        if total > 1.0 + 1e-12 {
            return Err(Error::invalid(format!("target masses sum to {total} > 1")));
        }
        if let Some(&(p, _)) = self.sink_columns.iter().find(|&&(p, _)| p >= self.seq_len) {
            return Err(Error::invalid(format!("sink position {p} >= S={}", self.seq_len)));
        }
        if let Some(&(o, _)) = self.slash_offsets.iter().find(|&&(o, _)| o >= self.seq_len) {
            return Err(Error::invalid(format!("slash offset {o} >= S={}", self.seq_len)));
        }
        if !(self.noise_scale >= 0.0 && self.salience_scale >= 0.0) {
            return Err(Error::invalid("noise and salience scales must be >= 0"));
        }
        Ok(())
    }

    fn planted_sinks(&self) -> Vec<(usize, f64)> {
        self.sink_columns.iter().copied().filter(|&(_, t)| t > 0.0).collect()
    }

    fn planted_slashes(&self) -> Vec<(usize, f64)> {
        self.slash_offsets.iter().copied().filter(|&(_, t)| t > 0.0).collect()
    }
}

/// Dimension budget of one head.
#[derive(Debug, Clone, Copy)]
struct Layout {
    bias: Option<usize>,
    log_pos: Option<usize>,
    /// `(start, pairs)` of the `ln(i + 1)`-scaled rotary block.
    rot_pos: Option<(usize, usize)>,
    /// `(start, pairs)` of the strength-carrying rotary block.
    rot_str: Option<(usize, usize)>,
    noise: (usize, usize),
}

impl Layout {
    fn new(spec: &SyntheticSpec) -> Result<Self> {
        let has_sinks = !spec.planted_sinks().is_empty();
        let has_slashes = !spec.planted_slashes().is_empty();
        let mut next = 0;
        let bias = (has_sinks || spec.salience_scale > 0.0).then(|| {
            next += 1;
            next - 1
        });
        let log_pos = has_sinks.then(|| {
            next += 1;
            next - 1
        });
        if next > spec.d {
            return Err(Error::invalid(format!("d={} too small for the planted patterns", spec.d)));
        }
        let free = spec.d - next;
        let (rot_pos, rot_str, noise_dims) = if has_slashes {
            let noise_dims = if spec.noise_scale > 0.0 { (free / 8).max(1) } else { 0 };
            let pairs = free.saturating_sub(noise_dims) / 2;
            if pairs < 2 {
                return Err(Error::invalid(format!(
                    "d={} leaves too few dimensions for slash patterns",
                    spec.d
                )));
            }
            let str_pairs = pairs / 2;
            let pos_pairs = pairs - str_pairs;
            let a = next;
            let b = a + 2 * pos_pairs;
            next = b + 2 * str_pairs;
            (Some((a, pos_pairs)), Some((b, str_pairs)), spec.d - next)
        } else {
            (None, None, free)
        };
        Ok(Self {
            bias,
            log_pos,
            rot_pos,
            rot_str,
            noise: (spec.d - noise_dims, noise_dims),
        })
    }
}

/// Random draws that stay fixed while pattern strengths are calibrated.
struct HeadDraws {
    freq_pos: Vec<f64>,
    freq_str: Vec<f64>,
    q_noise: Vec<f64>,
    k_noise: Vec<f64>,
    salience: Vec<f64>,
    v: Vec<f64>,
}

impl HeadDraws {
    fn new(spec: &SyntheticSpec, layout: &Layout, rng: &mut ChaCha8Rng) -> Self {
        let s = spec.seq_len;
        let omega = PI / SLASH_HALF_WIDTH as f64;
        // one draw per equal-width stratum keeps every kernel sharp
        let mut freqs = |n: usize| {
            (0..n)
                .map(|f| (f as f64 + rng.random::<f64>()) / n as f64 * omega)
                .collect::<Vec<_>>()
        };
        let freq_pos = freqs(layout.rot_pos.map_or(0, |(_, p)| p));
        let freq_str = freqs(layout.rot_str.map_or(0, |(_, p)| p));
        let n_noise = layout.noise.1;
        let sigma = if n_noise > 0 {
            (spec.noise_scale / (n_noise as f64).sqrt()).sqrt()
        } else {
            0.0
        };
        let mut normals = |n: usize, scale: f64| {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect::<Vec<_>>()
        };
        let q_noise = normals(s * n_noise, sigma);
        let k_noise = normals(s * n_noise, sigma);
        let salience = if spec.salience_scale > 0.0 {
            let white = normals(s + 6 * spec.salience_length.max(1), 1.0);
            smooth_profile(&white, s, spec.salience_length.max(1), spec.salience_scale)
        } else {
            vec![0.0; s]
        };
        let v = normals(s * spec.d, 1.0);
        Self {
            freq_pos,
            freq_str,
            q_noise,
            k_noise,
            salience,
            v,
        }
    }
}

/// Gaussian-smoothed white noise rescaled to standard deviation `scale`.
fn smooth_profile(white: &[f64], s: usize, length: usize, scale: f64) -> Vec<f64> {
    let radius = 3 * length;
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|t| {
            let x = (t as f64 - radius as f64) / length as f64;
            (-0.5 * x * x).exp()
        })
        .collect();
    let norm = taps.iter().map(|w| w * w).sum::<f64>().sqrt();
    (0..s)
        .map(|j| {
            let acc: f64 = taps.iter().zip(&white[j..]).map(|(w, x)| w * x).sum();
            scale * acc / norm
        })
        .collect()
}

fn write_rotary(row: &mut [f64], start: usize, freqs: &[f64], t: f64, amp: f64) {
    let norm = amp / (freqs.len() as f64).sqrt();
    for (f, &w) in freqs.iter().enumerate() {
        let (sin, cos) = (w * t).sin_cos();
        row[start + 2 * f] += norm * cos;
        row[start + 2 * f + 1] += norm * sin;
    }
}

/// Builds the head for the given sink and slash strengths (logit offsets).
fn build_head(
    spec: &SyntheticSpec,
    layout: &Layout,
    draws: &HeadDraws,
    sinks: &[(usize, f64)],
    slashes: &[(usize, f64)],
    head_id: usize,
) -> Result<AttentionHead> {
    let (s, d) = (spec.seq_len, spec.d);
    // logit = q'·k' once both sides carry d^{1/4}
    let lift = (d as f64).powf(0.25);
    let mut q = vec![0.0; s * d];
    let mut k = vec![0.0; s * d];
    let (noise_at, n_noise) = layout.noise;
    for i in 0..s {
        let qi = &mut q[i * d..(i + 1) * d];
        let log_pos = ((i + 1) as f64).ln();
        if let Some(b) = layout.bias {
            qi[b] = 1.0;
        }
        if let Some(lp) = layout.log_pos {
            qi[lp] = log_pos;
        }
        if let Some((at, _)) = layout.rot_pos {
            write_rotary(qi, at, &draws.freq_pos, i as f64, log_pos);
        }
        if let Some((at, _)) = layout.rot_str {
            write_rotary(qi, at, &draws.freq_str, i as f64, 1.0);
        }
        qi[noise_at..noise_at + n_noise].copy_from_slice(&draws.q_noise[i * n_noise..(i + 1) * n_noise]);

        let kj = &mut k[i * d..(i + 1) * d];
        if let Some(b) = layout.bias {
            kj[b] = draws.salience[i];
        }
        for &(o, strength) in slashes {
            let t = (i + o) as f64;
            if let Some((at, _)) = layout.rot_pos {
                write_rotary(kj, at, &draws.freq_pos, t, 1.0);
            }
            if let Some((at, _)) = layout.rot_str {
                write_rotary(kj, at, &draws.freq_str, t, strength);
            }
        }
        kj[noise_at..noise_at + n_noise].copy_from_slice(&draws.k_noise[i * n_noise..(i + 1) * n_noise]);
    }
    for &(p, strength) in sinks {
        let kp = &mut k[p * d..(p + 1) * d];
        if let Some(b) = layout.bias {
            kp[b] += strength;
        }
        if let Some(lp) = layout.log_pos {
            kp[lp] = 1.0;
        }
    }
    // f32-representable values make tensor files round-trip bit-exactly
    let finish = |mut m: Vec<f64>, scale: f64| {
        for x in m.iter_mut() {
            *x = ((*x * scale) as f32) as f64;
        }
        Matrix::new(s, d, m)
    };
    AttentionHead::new(
        finish(q, lift)?,
        finish(k, lift)?,
        finish(draws.v.clone(), 1.0)?,
        head_id,
    )
}

/// Query rows used to measure planted mass: all rows up to
/// `MEASURED_ROWS`, otherwise evenly spaced rows.
pub fn measurement_rows(s: usize) -> Vec<usize> {
    if s <= MEASURED_ROWS {
        (0..s).collect()
    } else {
        (0..MEASURED_ROWS)
            .map(|r| ((2 * r + 1) * s) / (2 * MEASURED_ROWS))
            .collect()
    }
}

/// Mean planted mass per pattern, measured on exact probability rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedMass {
    /// Mean over rows `i >= p` of `P[i][p]`.
    pub sinks: Vec<(usize, f64)>,
    /// Mean over rows `i >= o` of the mass on offsets within
    /// `SLASH_HALF_WIDTH` of `o`, not counting sink keys.
    pub slashes: Vec<(usize, f64)>,
}

pub fn measure_planted_mass(
    head: &AttentionHead,
    sinks: &[usize],
    offsets: &[usize],
    rows: &[usize],
) -> PlantedMass {
    let mut sink_sum = vec![(0.0, 0usize); sinks.len()];
    let mut slash_sum = vec![(0.0, 0usize); offsets.len()];
    let mut buf = Vec::with_capacity(head.seq_len());
    for &i in rows {
        probability_row(head, i, &mut buf);
        for (acc, &p) in sink_sum.iter_mut().zip(sinks) {
            if p <= i {
                acc.0 += buf[p];
                acc.1 += 1;
            }
        }
        for (acc, &o) in slash_sum.iter_mut().zip(offsets) {
            if o <= i {
                let lo = o.saturating_sub(SLASH_HALF_WIDTH);
                let hi = (o + SLASH_HALF_WIDTH).min(i);
                // offsets lo..=hi are keys i−hi ..= i−lo; sink keys count
                // toward their column only
                let band: f64 = buf[i - hi..=i - lo].iter().sum();
                let shared: f64 = sinks
                    .iter()
                    .filter(|&&p| i - hi <= p && p <= i - lo)
                    .map(|&p| buf[p])
                    .sum();
                acc.0 += band - shared;
                acc.1 += 1;
            }
        }
    }
    let mean = |(sum, n): (f64, usize)| if n > 0 { sum / n as f64 } else { 0.0 };
    PlantedMass {
        sinks: sinks.iter().zip(sink_sum).map(|(&p, a)| (p, mean(a))).collect(),
        slashes: offsets.iter().zip(slash_sum).map(|(&o, a)| (o, mean(a))).collect(),
    }
}

fn generate_head(spec: &SyntheticSpec, head_id: usize) -> Result<AttentionHead> {
    let layout = Layout::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(head_id as u64);
    let draws = HeadDraws::new(spec, &layout, &mut rng);

    let sinks = spec.planted_sinks();
    let slashes = spec.planted_slashes();
    let targets: Vec<f64> = sinks.iter().chain(&slashes).map(|&(_, t)| t).collect();
    if targets.is_empty() {
        return build_head(spec, &layout, &draws, &[], &[], head_id);
    }
    let background_target = (1.0 - targets.iter().sum::<f64>()).max(0.01);
    let widths = sinks
        .iter()
        .map(|_| 1.0)
        .chain(slashes.iter().map(|&(o, _)| (o.min(SLASH_HALF_WIDTH) + SLASH_HALF_WIDTH + 1) as f64));
    let mut strength: Vec<f64> = targets
        .iter()
        .zip(widths)
        .map(|(&t, w)| (t / background_target).ln() - w.ln())
        .collect();

    let sink_pos: Vec<usize> = sinks.iter().map(|&(p, _)| p).collect();
    let offsets: Vec<usize> = slashes.iter().map(|&(o, _)| o).collect();
    let rows = measurement_rows(spec.seq_len);
    let with = |pos: &[usize], st: &[f64]| -> Vec<(usize, f64)> {
        pos.iter().copied().zip(st.iter().copied()).collect()
    };
    // (head, index of the worst pattern, its mass, its relative error)
    let mut best: Option<(AttentionHead, usize, f64, f64)> = None;
    for _ in 0..MAX_CALIBRATION_ROUNDS {
        let (sink_str, slash_str) = strength.split_at(sinks.len());
        let head = build_head(
            spec,
            &layout,
            &draws,
            &with(&sink_pos, sink_str),
            &with(&offsets, slash_str),
            head_id,
        )?;
        let measured = measure_planted_mass(&head, &sink_pos, &offsets, &rows);
        let masses: Vec<f64> = measured
            .sinks
            .iter()
            .chain(&measured.slashes)
            .map(|&(_, m)| m)
            .collect();
        let (wi, wr) = masses
            .iter()
            .zip(&targets)
            .map(|(m, t)| (m / t - 1.0).abs())
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, r)| if r > acc.1 { (i, r) } else { acc });
        let done = wr <= CALIBRATION_GOAL;
        if best.as_ref().is_none_or(|b| wr < b.3) {
            best = Some((head, wi, masses[wi], wr));
        }
        if done {
            break;
        }
        let background = (1.0 - masses.iter().sum::<f64>()).max(1e-6);
        for ((c, &m), &t) in strength.iter_mut().zip(&masses).zip(&targets) {
            let step = (t / m.max(1e-12)).ln() - (background_target / background).ln();
            *c += step.clamp(-4.0, 4.0);
        }
    }
    let (head, wi, mass, rel) = best.expect("at least one calibration round");
    if rel <= CALIBRATION_TOLERANCE {
        return Ok(head);
    }
    let name = if wi < sinks.len() {
        format!("sink at position {}", sinks[wi].0)
    } else {
        format!("slash at offset {}", slashes[wi - sinks.len()].0)
    };
    Err(Error::Calibration(format!(
        "{name}: target {:.4}, reached {mass:.4} after {MAX_CALIBRATION_ROUNDS} rounds (head {head_id})",
        targets[wi]
    )))
}

/// Generates `spec.n_heads` heads; head `h` draws from stream `h` of the
/// spec's seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<HeadSet> {
    spec.validate()?;
    let heads = (0..spec.n_heads)
        .map(|h| generate_head(spec, h))
        .collect::<Result<Vec<_>>>()?;
    HeadSet::new(heads)
}
