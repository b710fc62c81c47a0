//! Score distillation against a pluggable noise-prediction oracle.
//!
//! The optimizer never differentiates through the oracle: it forms the pixel
//! factor `w(t) (eps_hat - eps)` here and hands it to
//! [`crate::renderer::render_backward`].

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::time::Duration;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image_io::ImageRgb;
use crate::raster::{ConditionImage, PALETTE};

pub mod wire;

/// Discrete diffusion noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `alpha_bar[t]` for `t` in `0..T`, strictly decreasing, in `(0, 1]`.
    pub alpha_bar: Vec<f64>,
    /// Sampling range of `t` as fractions of `T`.
    pub t_min: f64,
    pub t_max: f64,
}

impl NoiseSchedule {
    /// Cosine schedule with offset `s = 0.008`; per-step betas are capped at 0.999.
    pub fn cosine(steps: usize) -> Self {
        let s = 0.008;
        let f = |t: f64| ((t + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for t in 0..steps {
            let beta = (1.0 - f((t + 1) as f64 / steps as f64) / f(t as f64 / steps as f64)).min(0.999);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        NoiseSchedule { alpha_bar, t_min: 0.02, t_max: 0.98 }
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        let s = NoiseSchedule { alpha_bar, t_min: 0.0, t_max: 1.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_bar.is_empty() {
            return invalid("noise schedule is empty");
        }
        if self.alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return invalid("alpha_bar values must lie in (0, 1]");
        }
        if self.alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return invalid("alpha_bar must be strictly decreasing");
        }
        if !(0.0 <= self.t_min && self.t_min <= self.t_max && self.t_max <= 1.0) {
            return invalid("t sampling range must satisfy 0 <= t_min <= t_max <= 1");
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("noise level {t} outside [0, {})", self.steps())))
    }

    /// Uniform integer `t` in `[t_min * (T-1), t_max * (T-1)]`.
    pub fn sample_t(&self, rng: &mut impl Rng) -> usize {
        let last = (self.steps() - 1) as f64;
        let lo = (self.t_min * last).round() as usize;
        let hi = ((self.t_max * last).round() as usize).max(lo);
        rng.random_range(lo..=hi)
    }
}

/// SDS weighting `w(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `w(t) = 1 - alpha_bar_t`.
    OneMinusAlphaBar,
    Constant(f64),
}

impl Weighting {
    pub fn weight(&self, alpha_bar: f64) -> f64 {
        match *self {
            Weighting::OneMinusAlphaBar => 1.0 - alpha_bar,
            Weighting::Constant(c) => c,
        }
    }
}

/// Standard-normal noise image.
pub fn sample_noise(width: usize, height: usize, rng: &mut impl Rng) -> ImageRgb {
    let data = (0..width * height)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect();
    ImageRgb { width, height, data }
}

/// `z_t = sqrt(alpha_bar_t) x + sqrt(1 - alpha_bar_t) eps`.
pub fn add_noise(x: &ImageRgb, t: usize, noise: &ImageRgb, schedule: &NoiseSchedule) -> Result<ImageRgb> {
    let ab = schedule.alpha_bar_at(t)?;
    if !x.same_shape(noise) {
        return invalid("image and noise shapes differ");
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x.data.iter().zip(&noise.data).map(|(p, e)| [0, 1, 2].map(|c| a * p[c] + b * e[c])).collect();
    Ok(ImageRgb { width: x.width, height: x.height, data })
}

/// Everything an oracle sees for one prediction.
#[derive(Debug, Clone, Copy)]
pub struct NoiseQuery<'a> {
    pub z_t: &'a ImageRgb,
    pub t: usize,
    pub alpha_bar: f64,
    pub condition: Option<&'a ConditionImage>,
    pub prompt: &'a str,
    /// Classifier-free guidance scale; forwarded to external oracles only.
    pub cfg_scale: f64,
}

/// Noise predictor `eps_phi(z_t; y, t, c)`.
pub trait GuidanceOracle {
    fn predict_noise(&mut self, query: &NoiseQuery<'_>) -> Result<ImageRgb>;
}

/// One SDS request: rendered image, noise level, noise draw and conditioning.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceRequest<'a> {
    pub x: &'a ImageRgb,
    pub t: usize,
    pub noise: &'a ImageRgb,
    pub condition: Option<&'a ConditionImage>,
    pub prompt: &'a str,
    pub cfg_scale: f64,
}

/// Single-sample SDS pixel gradient `w(t) (eps_hat - eps)`.
pub fn sds_pixel_grad(
    request: &GuidanceRequest<'_>,
    oracle: &mut dyn GuidanceOracle,
    schedule: &NoiseSchedule,
    weighting: Weighting,
) -> Result<ImageRgb> {
    let x = request.x;
    if let Some(c) = request.condition {
        if c.width != x.width || c.height != x.height {
            return invalid("condition image and render differ in size");
        }
    }
    let z_t = add_noise(x, request.t, request.noise, schedule)?;
    let alpha_bar = schedule.alpha_bar_at(request.t)?;
    let query = NoiseQuery {
        z_t: &z_t,
        t: request.t,
        alpha_bar,
        condition: request.condition,
        prompt: request.prompt,
        cfg_scale: request.cfg_scale,
    };
    let eps_hat = oracle.predict_noise(&query)?;
    if !eps_hat.same_shape(x) {
        return Err(Error::GuidanceUnavailable(format!(
            "oracle returned {}x{} for a {}x{} request",
            eps_hat.width, eps_hat.height, x.width, x.height
        )));
    }
    if !eps_hat.is_finite() {
        return Err(Error::GuidanceUnavailable("oracle returned non-finite values".into()));
    }
    let w = weighting.weight(alpha_bar);
    let data = eps_hat
        .data
        .iter()
        .zip(&request.noise.data)
        .map(|(h, e)| [0, 1, 2].map(|c| w * (h[c] - e[c])))
        .collect();
    Ok(ImageRgb { width: x.width, height: x.height, data })
}

/// Exact noise predictor for a point-mass data distribution at `target`:
/// `eps_hat = (z_t - sqrt(alpha_bar) target) / sqrt(1 - alpha_bar)`.
#[derive(Debug, Clone)]
pub struct TargetImageOracle {
    pub target: ImageRgb,
}

impl TargetImageOracle {
    pub fn new(target: ImageRgb) -> Self {
        TargetImageOracle { target }
    }
}

/// Exact noise prediction when all data mass sits at `target`.
pub fn point_mass_eps(z_t: &ImageRgb, target: &ImageRgb, alpha_bar: f64) -> Result<ImageRgb> {
    if !z_t.same_shape(target) {
        return invalid(format!(
            "target image is {}x{} but z_t is {}x{}",
            target.width, target.height, z_t.width, z_t.height
        ));
    }
    if !(alpha_bar < 1.0) {
        return invalid("point-mass oracle is undefined at alpha_bar = 1");
    }
    let (a, inv_b) = (alpha_bar.sqrt(), 1.0 / (1.0 - alpha_bar).sqrt());
    let data = z_t.data.iter().zip(&target.data).map(|(z, x)| [0, 1, 2].map(|c| (z[c] - a * x[c]) * inv_b)).collect();
    Ok(ImageRgb { width: z_t.width, height: z_t.height, data })
}

impl GuidanceOracle for TargetImageOracle {
    fn predict_noise(&mut self, query: &NoiseQuery<'_>) -> Result<ImageRgb> {
        point_mass_eps(query.z_t, &self.target, query.alpha_bar)
    }
}

/// Point-mass oracle whose target is the palette rendering of the
/// condition image over `background` (white by default).
#[derive(Debug, Clone)]
pub struct SilhouetteOracle {
    pub background: [f64; 3],
}

impl Default for SilhouetteOracle {
    fn default() -> Self {
        SilhouetteOracle { background: [1.0; 3] }
    }
}

impl SilhouetteOracle {
    pub fn target_image(&self, condition: &ConditionImage) -> ImageRgb {
        let data = condition
            .labels
            .iter()
            .map(|&l| if l == 0 { self.background } else { PALETTE[l as usize].map(|c| c as f64 / 255.0) })
            .collect();
        ImageRgb { width: condition.width, height: condition.height, data }
    }
}

impl GuidanceOracle for SilhouetteOracle {
    fn predict_noise(&mut self, query: &NoiseQuery<'_>) -> Result<ImageRgb> {
        let Some(cond) = query.condition else {
            return invalid("silhouette oracle needs a condition image");
        };
        point_mass_eps(query.z_t, &self.target_image(cond), query.alpha_bar)
    }
}

/// Oracle reached over the newline-delimited JSON wire protocol.
pub struct ExternalOracle {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
    endpoint: String,
    child: Option<Child>,
}

impl std::fmt::Debug for ExternalOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalOracle").field("endpoint", &self.endpoint).field("next_id", &self.next_id).finish()
    }
}

impl ExternalOracle {
    /// Wraps an already connected stream pair.
    pub fn from_streams(reader: impl BufRead + Send + 'static, writer: impl Write + Send + 'static, endpoint: &str) -> Self {
        ExternalOracle { reader: Box::new(reader), writer: Box::new(writer), next_id: 1, endpoint: endpoint.into(), child: None }
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self> {
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| Error::GuidanceUnavailable(format!("resolve {addr}: {e}")))?
            .next()
            .ok_or_else(|| Error::GuidanceUnavailable(format!("no address for {addr}")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout)
            .map_err(|e| Error::GuidanceUnavailable(format!("connect {addr}: {e}")))?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self::from_streams(reader, stream, &format!("tcp://{addr}")))
    }

    /// Spawns `program args...` and talks to it over stdin/stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::GuidanceUnavailable(format!("spawn {program}: {e}")))?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut oracle = Self::from_streams(BufReader::new(stdout), stdin, &format!("stdio:{program}"));
        oracle.child = Some(child);
        Ok(oracle)
    }

    /// Parses `tcp://host:port` or `stdio:program arg...`.
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self> {
        if let Some(addr) = endpoint.strip_prefix("tcp://") {
            Self::connect_tcp(addr, timeout)
        } else if let Some(cmd) = endpoint.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace().map(String::from);
            let program = parts.next().ok_or_else(|| Error::Config("empty stdio command".into()))?;
            Self::spawn(&program, &parts.collect::<Vec<_>>())
        } else {
            Err(Error::Config(format!("unsupported oracle endpoint {endpoint:?}; use tcp://host:port or stdio:cmd")))
        }
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl GuidanceOracle for ExternalOracle {
    fn predict_noise(&mut self, query: &NoiseQuery<'_>) -> Result<ImageRgb> {
        let id = self.next_id;
        self.next_id += 1;
        let request = wire::WireRequest::from_query(id, query);
        let line = wire::encode_request(&request);
        let diag = |what: &str, e: &dyn std::fmt::Display| {
            Error::GuidanceUnavailable(format!("{what} {} (request {id}): {e}", self.endpoint))
        };
        self.writer.write_all(line.as_bytes()).map_err(|e| diag("write to", &e))?;
        self.writer.write_all(b"\n").map_err(|e| diag("write to", &e))?;
        self.writer.flush().map_err(|e| diag("flush", &e))?;
        let mut reply = String::new();
        let n = self.reader.read_line(&mut reply).map_err(|e| diag("read from", &e))?;
        if n == 0 {
            return Err(diag("connection closed by", &"end of stream"));
        }
        let response = wire::decode_response(reply.trim_end())?;
        if response.id != Some(id) {
            return Err(Error::Protocol(format!("response id {:?} does not match request id {id}", response.id)));
        }
        match response.result {
            Err(msg) => Err(Error::GuidanceUnavailable(format!("{} reported: {msg}", self.endpoint))),
            Ok(eps) => {
                let expected = query.z_t.width * query.z_t.height * 3;
                if eps.len() != expected {
                    return Err(Error::Protocol(format!("eps_hat has {} values, expected {expected}", eps.len())));
                }
                let values: Vec<f64> = eps.iter().map(|&v| v as f64).collect();
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Protocol("eps_hat contains non-finite values".into()));
                }
                ImageRgb::from_interleaved(query.z_t.width, query.z_t.height, &values)
            }
        }
    }
}
