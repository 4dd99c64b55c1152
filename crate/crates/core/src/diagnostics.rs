//! Activation statistics and checkpoint-size accounting.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{param_specs, DiT, MODULATION_SITES};
use crate::ops::rms_norm;
use crate::params::Role;
use crate::quant::{ternarize, ternary_linear, QuantConfig};
use crate::real::Real;
use crate::tensor::Matrix;

/// Box-plot summary of a set of values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean_square: f64,
}

impl Stats {
    /// Quartiles interpolate linearly between order statistics.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("statistics of an empty set".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Ok(Self {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            mean_square: values.iter().map(|x| x * x).sum::<f64>() / values.len() as f64,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }
}

/// Geometry of the activation pilot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PilotConfig {
    pub in_features: usize,
    pub out_features: usize,
    pub rows: usize,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self { in_features: 1024, out_features: 9216, rows: 512 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PilotVariant {
    pub name: &'static str,
    pub stats: Stats,
    /// Mean square of each output row.
    pub row_mean_square: Vec<f64>,
    pub rows_identical: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PilotReport {
    pub seed: u64,
    pub config: PilotConfig,
    /// Ternary, ternary + RMS norm, full precision.
    pub variants: Vec<PilotVariant>,
}

impl PilotReport {
    fn variant(&self, name: &str) -> &PilotVariant {
        self.variants.iter().find(|v| v.name == name).expect("pilot variant")
    }

    pub fn ternary(&self) -> &PilotVariant {
        self.variant("ternary")
    }

    pub fn ternary_rms(&self) -> &PilotVariant {
        self.variant("ternary+rms")
    }

    pub fn full_precision(&self) -> &PilotVariant {
        self.variant("full-precision")
    }

    /// Largest `|row mean square − 1|` of the RMS-normed variant (unit gain).
    pub fn rms_deviation(&self) -> f64 {
        self.ternary_rms().row_mean_square.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        stats_table(self.variants.iter().map(|v| (v.name, &v.stats)))
    }

    pub fn to_csv(&self) -> String {
        stats_csv(self.variants.iter().map(|v| (v.name, &v.stats)))
    }
}

/// Human-readable table of named statistics.
pub fn stats_table<'a>(rows: impl Iterator<Item = (&'a str, &'a Stats)>) -> String {
    let mut s = format!(
        "{:<16} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "variant", "min", "q1", "median", "q3", "max", "mean_square"
    );
    for (name, st) in rows {
        let _ = writeln!(
            s,
            "{:<16} {:>12.5} {:>12.5} {:>12.5} {:>12.5} {:>12.5} {:>12.5}",
            name, st.min, st.q1, st.median, st.q3, st.max, st.mean_square
        );
    }
    s
}

/// `variant,min,q1,median,q3,max,mean_square` rows with a header.
pub fn stats_csv<'a>(rows: impl Iterator<Item = (&'a str, &'a Stats)>) -> String {
    let mut s = String::from("variant,min,q1,median,q3,max,mean_square\n");
    for (name, st) in rows {
        let _ = writeln!(s, "{name},{},{},{},{},{},{}", st.min, st.q1, st.median, st.q3, st.max, st.mean_square);
    }
    s
}

/// Output statistics of one linear layer fed an all-ones input, in three
/// forms built from a single weight draw `W ~ N(0, 1/in)`:
///
/// * `ternary`: the absmean trit codes of `W` with `α = 1`;
/// * `ternary+rms`: the same, followed by a unit-gain RMS norm per row;
/// * `full-precision`: `W` itself.
pub fn activation_pilot(seed: u64) -> Result<PilotReport> {
    activation_pilot_with(seed, PilotConfig::default())
}

pub fn activation_pilot_with(seed: u64, cfg: PilotConfig) -> Result<PilotReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (cfg.in_features as f64).sqrt();
    let w: Vec<f32> = (0..cfg.out_features * cfg.in_features)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (std * z) as f32
        })
        .collect();
    let w = Matrix::from_vec(cfg.out_features, cfg.in_features, w)?;
    let x = Matrix::filled(cfg.rows, cfg.in_features, 1.0f32);

    let codes = ternarize(&w, 1.0f32, &QuantConfig::default())?;
    let y_t = ternary_linear(&x, &codes, None)?;
    let gain = vec![1.0f32; cfg.out_features];
    let mut y_r = Matrix::zeros(y_t.rows, y_t.cols);
    for r in 0..y_t.rows {
        y_r.row_mut(r).copy_from_slice(&rms_norm(y_t.row(r), &gain, 1e-5)?);
    }
    let y_f = x.matmul_t(&w)?;

    let variants = [("ternary", y_t), ("ternary+rms", y_r), ("full-precision", y_f)]
        .into_iter()
        .map(|(name, y)| variant(name, &y))
        .collect::<Result<_>>()?;
    Ok(PilotReport { seed, config: cfg, variants })
}

fn variant(name: &'static str, y: &Matrix<f32>) -> Result<PilotVariant> {
    let all: Vec<f64> = y.data.iter().map(|&v| f64::from(v)).collect();
    let row_mean_square =
        (0..y.rows).map(|r| y.row(r).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / y.cols as f64).collect();
    let rows_identical = (1..y.rows).all(|r| y.row(r) == y.row(0));
    Ok(PilotVariant { name, stats: Stats::of(&all)?, row_mean_square, rows_identical })
}

/// One adaLN chunk captured from a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    pub block: usize,
    pub site: String,
    pub t: usize,
    pub label: usize,
    pub values: Vec<f64>,
    pub stats: Stats,
}

/// The `site` chunk of block `block`'s adaLN output for the conditional
/// branch of a denoising step at timestep `t` and class `label`.
///
/// The modulation depends only on the condition vector, so this is the
/// value the sampler sees at that step regardless of the image being
/// denoised. The model is only read.
pub fn activation_capture<T: Real>(
    model: &DiT<T>,
    block: usize,
    site: &str,
    t: usize,
    label: usize,
) -> Result<Capture> {
    if !MODULATION_SITES.contains(&site) {
        return Err(Error::Domain(format!(
            "unknown modulation site {site:?}; expected one of {}",
            MODULATION_SITES.join(", ")
        )));
    }
    let c = model.condition(t, label, false)?;
    let m = model.adaln_modulation(block, &c)?;
    let values: Vec<f64> = m.site(site)?.iter().map(|v| v.to_f64_lossy()).collect();
    let stats = Stats::of(&values)?;
    Ok(Capture { block, site: site.to_string(), t, label, values, stats })
}

/// One tensor's share of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSize {
    pub name: String,
    pub shape: Vec<usize>,
    pub numel: usize,
    pub ternary: bool,
    pub fp_bytes: usize,
    pub packed_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeReport {
    pub fp_bytes: usize,
    pub packed_bytes: usize,
    pub tensors: Vec<TensorSize>,
}

impl SizeReport {
    pub fn ratio(&self) -> f64 {
        self.fp_bytes as f64 / self.packed_bytes as f64
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel).sum()
    }

    pub fn ternary_params(&self) -> usize {
        self.tensors.iter().filter(|t| t.ternary).map(|t| t.numel).sum()
    }

    /// Peak weight bytes resident during inference: `(packed, dense)`.
    /// The packed figure adds one dequantized tile of `tile_rows` rows of
    /// the widest ternary matrix.
    pub fn working_set(&self, tile_rows: usize) -> (usize, usize) {
        let tile = self
            .tensors
            .iter()
            .filter(|t| t.ternary)
            .map(|t| tile_rows.min(t.shape[0]) * t.shape[1] * 4)
            .max()
            .unwrap_or(0);
        (self.packed_bytes + tile, self.fp_bytes)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<36} {:>12} {:>8} {:>14} {:>14}",
            "tensor", "params", "ternary", "fp32 bytes", "packed bytes"
        );
        for t in &self.tensors {
            let _ = writeln!(
                s,
                "{:<36} {:>12} {:>8} {:>14} {:>14}",
                t.name,
                t.numel,
                if t.ternary { "yes" } else { "no" },
                t.fp_bytes,
                t.packed_bytes
            );
        }
        let _ = writeln!(s, "total parameters   {}", self.total_params());
        let _ = writeln!(s, "ternary parameters {}", self.ternary_params());
        let _ = writeln!(s, "fp32 bytes         {}", self.fp_bytes);
        let _ = writeln!(s, "packed bytes       {}", self.packed_bytes);
        let _ = writeln!(s, "ratio              {:.3}", self.ratio());
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tensor,params,ternary,fp_bytes,packed_bytes\n");
        for t in &self.tensors {
            let _ = writeln!(s, "{},{},{},{},{}", t.name, t.numel, t.ternary, t.fp_bytes, t.packed_bytes);
        }
        s
    }
}

/// Analytic sizes for a configuration, without allocating the model.
///
/// Dense storage is 4 bytes per parameter. Packed storage keeps each
/// ternary weight matrix at `ceil(P/4)` bytes plus a 4-byte `α` (which
/// replaces the dense `α` parameter) and every other parameter at 4 bytes.
pub fn size_report(cfg: &ModelConfig) -> Result<SizeReport> {
    cfg.validate()?;
    let specs = param_specs(cfg);
    let mut tensors = Vec::with_capacity(specs.len());
    for s in &specs {
        let numel = s.numel();
        let (ternary, packed_bytes) = match s.role {
            Role::TernaryWeight => (true, numel.div_ceil(4) + 4),
            Role::Alpha => (false, 0),
            _ => (false, 4 * numel),
        };
        tensors.push(TensorSize {
            name: s.name.clone(),
            shape: s.shape.clone(),
            numel,
            ternary,
            fp_bytes: 4 * numel,
            packed_bytes,
        });
    }
    Ok(SizeReport {
        fp_bytes: tensors.iter().map(|t| t.fp_bytes).sum(),
        packed_bytes: tensors.iter().map(|t| t.packed_bytes).sum(),
        tensors,
    })
}

/// [`size_report`] for the configuration a checkpoint carries.
pub fn checkpoint_size_report(ckpt: &Checkpoint) -> Result<SizeReport> {
    size_report(&ModelConfig::from_text(&ckpt.config)?)
}
