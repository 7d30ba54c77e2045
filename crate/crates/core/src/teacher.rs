//! Teacher RSMs: from recorded sessions, and from the randomized controls.
//!
//! Session file format (plain text, one file per session):
//!
//! ```text
//! <session_id>, <n_neurons>, <n_stimuli>
//! <stim_id_1>, <stim_id_2>, ..., <stim_id_M>
//! <rate of neuron 1 for each stimulus, comma separated>
//! ...                                   (n_neurons rows)
//! ```
//!
//! All randomness uses ChaCha8 (`rand_chacha::ChaCha8Rng`), a counter-based
//! generator whose streams are identical on every platform.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NetworkSpec;
use crate::rsm::{average_rsms, compute_rsm, ResponseMatrix, Rsm};

/// Units per random response vector: the mean number of simultaneously
/// recorded V1 neurons per session.
pub const DEFAULT_NUM_UNITS: usize = 39;
/// Mean of the "random" control (deliberately unlike the recordings).
pub const RANDOM_MU: f64 = 5.0;
/// Mean of the V1 recordings, used by the "random_v1_stats" control.
pub const V1_MU: f64 = 0.495;
/// Spread of the V1 recordings, used as the standard deviation of both
/// random controls.
pub const V1_SIGMA: f64 = 0.582;

#[derive(Clone, Debug, PartialEq)]
pub struct SessionRecording {
    pub session_id: String,
    /// Stimuli × neurons.
    pub responses: ResponseMatrix,
}

impl SessionRecording {
    pub fn num_neurons(&self) -> usize {
        self.responses.dim()
    }

    /// Firing rates of one neuron across stimuli.
    pub fn neuron(&self, n: usize) -> Vec<f64> {
        (0..self.responses.num_stimuli()).map(|s| self.responses.get(s, n)).collect()
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

pub fn parse_session(text: &str, path: &Path) -> Result<SessionRecording> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::parse(path, "empty session file"))?;
    let h = split_fields(header);
    if h.len() != 3 {
        return Err(Error::parse(path, "header must be `session_id, n_neurons, n_stimuli`"));
    }
    let session_id = h[0].to_string();
    let n_neurons: usize = h[1].parse().map_err(|_| Error::parse(path, format!("bad neuron count `{}`", h[1])))?;
    let n_stimuli: usize = h[2].parse().map_err(|_| Error::parse(path, format!("bad stimulus count `{}`", h[2])))?;
    let ids: Vec<String> = split_fields(lines.next().ok_or_else(|| Error::parse(path, "missing stimulus id line"))?)
        .into_iter()
        .map(String::from)
        .collect();
    if ids.len() != n_stimuli {
        return Err(Error::parse(path, format!("expected {n_stimuli} stimulus ids, found {}", ids.len())));
    }
    let mut values = vec![0.0; n_stimuli * n_neurons];
    for n in 0..n_neurons {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(path, format!("session `{session_id}`: missing rates for neuron {n}")))?;
        let rates = split_fields(line);
        if rates.len() != n_stimuli {
            return Err(Error::parse(
                path,
                format!("session `{session_id}`: neuron {n} has {} rates, expected {n_stimuli}", rates.len()),
            ));
        }
        for (s, field) in rates.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(path, format!("neuron {n}: bad rate `{field}`")))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::parse(
                    path,
                    format!("session `{session_id}`: neuron {n} has invalid firing rate {v} for stimulus `{}`", ids[s]),
                ));
            }
            values[s * n_neurons + n] = v;
        }
    }
    if lines.next().is_some() {
        return Err(Error::parse(path, format!("session `{session_id}`: more rows than the {n_neurons} declared")));
    }
    let responses = ResponseMatrix::new(ids, n_neurons, values)
        .map_err(|e| Error::parse(path, format!("session `{session_id}`: {e}")))?;
    Ok(SessionRecording { session_id, responses })
}

pub fn format_session(session: &SessionRecording) -> String {
    let r = &session.responses;
    let mut out = format!("{}, {}, {}\n", session.session_id, r.dim(), r.num_stimuli());
    out.push_str(&r.stimulus_ids().join(", "));
    out.push('\n');
    for n in 0..r.dim() {
        let row: Vec<String> = session.neuron(n).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(", "));
        out.push('\n');
    }
    out
}

pub fn write_session(session: &SessionRecording, path: &Path) -> Result<()> {
    fs::write(path, format_session(session)).map_err(|e| Error::io(path, e))
}

/// Load every session file in `dir` (hidden files skipped), in filename order.
pub fn load_sessions(dir: &Path) -> Result<Vec<SessionRecording>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if p.is_file() && !hidden {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no session files in {}", dir.display())));
    }
    let mut sessions = Vec::with_capacity(paths.len());
    for p in &paths {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        sessions.push(parse_session(&text, p)?);
    }
    check_shared_stimuli(&sessions)?;
    Ok(sessions)
}

fn check_shared_stimuli(sessions: &[SessionRecording]) -> Result<()> {
    let first = sessions
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one session required".into()))?;
    for s in &sessions[1..] {
        if s.responses.stimulus_ids() != first.responses.stimulus_ids() {
            return Err(Error::StimulusMismatch(format!(
                "session `{}` does not share the stimulus ids of session `{}`",
                s.session_id, first.session_id
            )));
        }
    }
    Ok(())
}

/// Per-session RSMs, then their element-wise mean.
pub fn build_neural_teacher(sessions: &[SessionRecording]) -> Result<Rsm> {
    check_shared_stimuli(sessions)?;
    let rsms: Vec<Rsm> = sessions.iter().map(|s| compute_rsm(&s.responses)).collect();
    average_rsms(&rsms)
}

/// RSM of i.i.d. `N(mu, sigma²)` response vectors, one per stimulus.
pub fn generate_random_teacher(stimulus_ids: &[String], num_units: usize, mu: f64, sigma: f64, seed: u64) -> Result<Rsm> {
    if stimulus_ids.len() < 2 {
        return Err(Error::InvalidArgument("random teacher needs at least 2 stimuli".into()));
    }
    if num_units == 0 {
        return Err(Error::InvalidArgument("random teacher needs at least one unit".into()));
    }
    let normal = Normal::new(mu, sigma)
        .ok()
        .filter(|_| sigma > 0.0)
        .ok_or_else(|| Error::InvalidArgument(format!("sigma must be positive, got {sigma}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(stimulus_ids.len() * num_units);
    for id in stimulus_ids {
        let mut draw = || -> Vec<f64> { (0..num_units).map(|_| normal.sample(&mut rng)).collect() };
        let mut v = draw();
        if v.iter().all(|&x| x == 0.0) {
            v = draw();
            if v.iter().all(|&x| x == 0.0) {
                return Err(Error::Degenerate(format!("drew a zero vector twice for stimulus `{id}`")));
            }
        }
        values.extend(v);
    }
    let responses = ResponseMatrix::new(stimulus_ids.to_vec(), num_units, values)?;
    Ok(compute_rsm(&responses))
}

/// Independently permute each neuron's responses across stimuli, session by
/// session, neuron by neuron, from one ChaCha8 stream seeded with `seed`.
pub fn shuffle_sessions(sessions: &[SessionRecording], seed: u64) -> Result<Vec<SessionRecording>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sessions
        .iter()
        .map(|s| {
            let r = &s.responses;
            let (m, d) = (r.num_stimuli(), r.dim());
            let mut values = r.values().to_vec();
            for n in 0..d {
                let mut column = s.neuron(n);
                column.shuffle(&mut rng);
                for (stim, v) in column.into_iter().enumerate() {
                    values[stim * d + n] = v;
                }
            }
            debug_assert_eq!(values.len(), m * d);
            let responses = ResponseMatrix::new(r.stimulus_ids().to_vec(), d, values)
                .map_err(|e| Error::Degenerate(format!("shuffled session `{}`: {e}", s.session_id)))?;
            Ok(SessionRecording {
                session_id: s.session_id.clone(),
                responses,
            })
        })
        .collect()
}

pub fn build_shuffled_teacher(sessions: &[SessionRecording], seed: u64) -> Result<Rsm> {
    build_neural_teacher(&shuffle_sessions(sessions, seed)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Neural,
    Random,
    RandomV1Stats,
    Shuffled,
    None,
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TeacherKind::Neural => "neural",
            TeacherKind::Random => "random",
            TeacherKind::RandomV1Stats => "random_v1_stats",
            TeacherKind::Shuffled => "shuffled",
            TeacherKind::None => "none",
        })
    }
}

impl FromStr for TeacherKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "neural" => TeacherKind::Neural,
            "random" => TeacherKind::Random,
            "random_v1_stats" | "random-v1-stats" => TeacherKind::RandomV1Stats,
            "shuffled" => TeacherKind::Shuffled,
            "none" => TeacherKind::None,
            other => return Err(Error::Config(format!("unknown teacher kind `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    /// Session directory for `neural` and `shuffled`.
    #[serde(default)]
    pub source: Option<PathBuf>,
    #[serde(default = "default_units")]
    pub num_units: usize,
    /// Defaults per kind: 5.0 for `random`, 0.495 for `random_v1_stats`.
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Layer tag the similarity penalty attaches to; defaults to the
    /// architecture's V1-like layer.
    #[serde(default)]
    pub attach_tag: Option<String>,
}

fn default_units() -> usize {
    DEFAULT_NUM_UNITS
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self::of_kind(TeacherKind::None)
    }
}

impl TeacherSpec {
    pub fn of_kind(kind: TeacherKind) -> Self {
        Self {
            kind,
            source: None,
            num_units: DEFAULT_NUM_UNITS,
            mu: None,
            sigma: None,
            seed: 0,
            attach_tag: None,
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu.unwrap_or(match self.kind {
            TeacherKind::Random => RANDOM_MU,
            _ => V1_MU,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(V1_SIGMA)
    }

    pub fn tag<'a>(&'a self, net: &'a NetworkSpec) -> &'a str {
        self.attach_tag.as_deref().unwrap_or_else(|| net.default_teacher_tag())
    }

    pub fn validate(&self, net: &NetworkSpec) -> Result<()> {
        match self.kind {
            TeacherKind::Random | TeacherKind::RandomV1Stats => {
                if !(self.sigma().is_finite() && self.sigma() > 0.0) {
                    return Err(Error::Config(format!("teacher sigma must be positive, got {}", self.sigma())));
                }
                if self.num_units == 0 {
                    return Err(Error::Config("teacher num_units must be positive".into()));
                }
            }
            TeacherKind::Neural | TeacherKind::Shuffled => {
                if self.source.is_none() {
                    return Err(Error::Config(format!("teacher kind `{}` needs a session source", self.kind)));
                }
            }
            TeacherKind::None => {}
        }
        let tag = self.tag(net);
        if !net.tags.contains_key(tag) {
            return Err(Error::Config(format!("teacher attach tag `{tag}` is not a layer tag of {}", net.arch)));
        }
        Ok(())
    }

    /// Build the teacher RSM over `stimulus_ids` (`None` for kind `none`).
    /// Session-based teachers must cover exactly these stimuli, in order.
    pub fn build(&self, stimulus_ids: &[String]) -> Result<Option<Rsm>> {
        let rsm = match self.kind {
            TeacherKind::None => return Ok(None),
            TeacherKind::Random | TeacherKind::RandomV1Stats => {
                generate_random_teacher(stimulus_ids, self.num_units, self.mu(), self.sigma(), self.seed)?
            }
            TeacherKind::Neural | TeacherKind::Shuffled => {
                let dir = self
                    .source
                    .as_deref()
                    .ok_or_else(|| Error::Config(format!("teacher kind `{}` needs a session source", self.kind)))?;
                let sessions = load_sessions(dir)?;
                if sessions[0].responses.stimulus_ids() != stimulus_ids {
                    return Err(Error::StimulusMismatch(format!(
                        "sessions in {} do not cover the stimulus set in order",
                        dir.display()
                    )));
                }
                if self.kind == TeacherKind::Neural {
                    build_neural_teacher(&sessions)?
                } else {
                    build_shuffled_teacher(&sessions, self.seed)?
                }
            }
        };
        Ok(Some(rsm))
    }
}

/// Parses `kind=...,mu=...,sigma=...,seed=...,tag=...,source=...,units=...`.
impl FromStr for TeacherSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = TeacherSpec::default();
        let mut kind_seen = false;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("teacher option `{part}` is not key=value")))?;
            let num = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| Error::Config(format!("teacher option {key}: bad number `{v}`")))
            };
            match key.trim() {
                "kind" => {
                    spec.kind = value.parse()?;
                    kind_seen = true;
                }
                "mu" => spec.mu = Some(num(value)?),
                "sigma" => spec.sigma = Some(num(value)?),
                "seed" => {
                    spec.seed = value.parse().map_err(|_| Error::Config(format!("bad teacher seed `{value}`")))?
                }
                "tag" => spec.attach_tag = Some(value.to_string()),
                "source" => spec.source = Some(PathBuf::from(value)),
                "units" | "num_units" => {
                    spec.num_units = value.parse().map_err(|_| Error::Config(format!("bad unit count `{value}`")))?
                }
                other => return Err(Error::Config(format!("unknown teacher option `{other}`"))),
            }
        }
        if !kind_seen {
            return Err(Error::Config("teacher description needs kind=...".into()));
        }
        Ok(spec)
    }
}

/// Synthetic V1-like recordings: each neuron is a Gabor receptive field on
/// image luminance (simple or complex cell), plus baseline and noise. Each
/// session's rates are rescaled to the recordings' mean rate.
///
/// `images` are `3×height×width`, values in `[0, 1]`, one per stimulus id.
pub fn synthesize_sessions(
    images: &[Vec<f32>],
    stimulus_ids: &[String],
    (height, width): (usize, usize),
    n_sessions: usize,
    seed: u64,
) -> Result<Vec<SessionRecording>> {
    if images.len() != stimulus_ids.len() || images.len() < 2 {
        return Err(Error::InvalidArgument("need one image per stimulus id (at least 2)".into()));
    }
    let plane = height * width;
    let lum: Vec<Vec<f64>> = images
        .iter()
        .map(|img| {
            (0..plane)
                .map(|p| 0.299 * img[p] as f64 + 0.587 * img[plane + p] as f64 + 0.114 * img[2 * plane + p] as f64 - 0.5)
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut sessions = Vec::with_capacity(n_sessions);
    for s in 0..n_sessions {
        let n_neurons = rng.random_range(35..=43);
        let mut values = vec![0.0; images.len() * n_neurons];
        for n in 0..n_neurons {
            let cx = rng.random_range(0.25..0.75) * width as f64;
            let cy = rng.random_range(0.25..0.75) * height as f64;
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.08..0.3);
            let env = rng.random_range(2.0..5.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let complex = rng.random_bool(0.5);
            let gain = rng.random_range(0.5..2.0);
            let baseline = rng.random_range(0.05..0.3);
            let (even, odd): (Vec<f64>, Vec<f64>) = (0..plane)
                .map(|p| {
                    let (x, y) = ((p % width) as f64 - cx, (p / width) as f64 - cy);
                    let xr = x * theta.cos() + y * theta.sin();
                    let g = (-(x * x + y * y) / (2.0 * env * env)).exp();
                    let arg = std::f64::consts::TAU * freq * xr + phase;
                    (g * arg.cos(), g * arg.sin())
                })
                .unzip();
            let norm = even.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (i, l) in lum.iter().enumerate() {
                let e: f64 = even.iter().zip(l).map(|(a, b)| a * b).sum::<f64>() / norm;
                let drive = if complex {
                    let o: f64 = odd.iter().zip(l).map(|(a, b)| a * b).sum::<f64>() / norm;
                    (e * e + o * o).sqrt()
                } else {
                    e.max(0.0)
                };
                let rate = baseline + gain * drive;
                values[i * n_neurons + n] = (rate + 0.1 * rate.sqrt() * noise.sample(&mut rng)).max(0.0);
            }
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        if mean > 0.0 {
            values.iter_mut().for_each(|v| *v *= V1_MU / mean);
        }
        let responses = ResponseMatrix::new(stimulus_ids.to_vec(), n_neurons, values)?;
        sessions.push(SessionRecording {
            session_id: format!("synthetic-{:02}", s + 1),
            responses,
        });
    }
    Ok(sessions)
}

/// Write sessions as `session_XX.txt` files.
pub fn write_sessions(sessions: &[SessionRecording], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in sessions.iter().enumerate() {
        write_session(s, &dir.join(format!("session_{:02}.txt", i + 1)))?;
    }
    Ok(())
}
