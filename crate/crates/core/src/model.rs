//! Toy-scale diffusion transformer with ternary blocks.
//!
//! Each block is pre-norm attention followed by a SwiGLU feedforward, both
//! conditioned through adaLN-Zero:
//!
//! ```text
//! shift/scale/gate ×2 = adaLN(c)            c = t_emb + y_emb
//! h   = x + gate_msa ⊙ Attn(modulate(RMSNorm(x), shift_msa, scale_msa))
//! out = h + gate_mlp ⊙ FFN(modulate(RMSNorm(h), shift_mlp, scale_mlp))
//! modulate(x, s, sc) = x·(1 + sc) + s
//! ```
//!
//! `adaLN(c)` is `Linear(SiLU(c))`, or `RMSNorm(Linear(SiLU(c)))` with one
//! learnable gain over all `6·hidden` outputs when `adaln_rms` is set. With
//! `quantize_blocks`, every attention, feedforward and adaLN projection is a
//! ternary linear; embeddings, norms and the final decoder stay full
//! precision.
//!
//! Forward passes record a [`Tape`]; [`DiT::backward`] replays it to produce
//! parameter and input gradients. Ternary layers use the straight-through
//! estimator for their master weights and the exact gradient for `α`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bitpack::{packed_linear, PackedTernary};
use crate::checkpoint::{Checkpoint, TensorData};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ops::{
    layer_norm_rows, layer_norm_rows_backward, patchify, rms_rows, rms_rows_backward, sigmoid, silu, silu_grad,
    softmax_rows_in_place, unpatchify,
};
use crate::params::{Grads, ParamId, ParamStore, Role};
use crate::quant::{alpha_grad, init_alpha, ternarize, ternary_linear, QuantConfig, TernaryTensor};
use crate::real::{gemm, Real, View, ViewMut};
use crate::tensor::{Image, Matrix};

/// Diffusion steps the timestep embedding accepts by default.
pub const DEFAULT_TIMESTEPS: usize = 1000;

const FINAL_NORM_EPS: f64 = 1e-6;

/// Names of the six adaLN chunks, in output order.
pub const MODULATION_SITES: [&str; 6] = ["shift_msa", "scale_msa", "gate_msa", "shift_mlp", "scale_mlp", "gate_mlp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    /// Present iff the layer is ternary.
    pub alpha: Option<ParamId>,
    pub out_features: usize,
    pub in_features: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub norm1: ParamId,
    pub norm2: ParamId,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ffn_gate: Linear,
    pub ffn_up: Linear,
    pub ffn_down: Linear,
    pub adaln: Linear,
    pub adaln_gain: Option<ParamId>,
}

impl BlockLayout {
    pub fn linears(&self) -> [(&'static str, Linear); 8] {
        [
            ("q", self.q),
            ("k", self.k),
            ("v", self.v),
            ("o", self.o),
            ("ffn_gate", self.ffn_gate),
            ("ffn_up", self.ffn_up),
            ("ffn_down", self.ffn_down),
            ("adaln", self.adaln),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub x_embed: Linear,
    pub pos_embed: ParamId,
    pub t_mlp1: Linear,
    pub t_mlp2: Linear,
    pub y_table: ParamId,
    pub blocks: Vec<BlockLayout>,
    pub final_adaln: Linear,
    pub final_out: Linear,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    Normal(f64),
    Zeros,
    Ones,
    /// `α` for a ternary layer with the given fans.
    Alpha {
        fan_in: usize,
        fan_out: usize,
    },
}

fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Name, shape and role of one parameter, known without allocating it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Default)]
struct Builder {
    specs: Vec<ParamSpec>,
    inits: Vec<Init>,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, role: Role, init: Init) -> ParamId {
        self.inits.push(init);
        self.specs.push(ParamSpec { name, shape, role });
        ParamId(self.specs.len() - 1)
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, bias: bool, ternary: bool, zero: bool) -> Linear {
        let w_init = if zero { Init::Zeros } else { Init::Xavier { fan_in: inp, fan_out: out } };
        let role = if ternary { Role::TernaryWeight } else { Role::Weight };
        let weight = self.param(format!("{name}.weight"), vec![out, inp], role, w_init);
        let bias = bias.then(|| self.param(format!("{name}.bias"), vec![out], Role::Bias, Init::Zeros));
        let alpha = ternary.then(|| {
            self.param(format!("{name}.alpha"), vec![1], Role::Alpha, Init::Alpha { fan_in: inp, fan_out: out })
        });
        Linear { weight, bias, alpha, out_features: out, in_features: inp }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, Vec<Init>, Layout) {
    let d = cfg.hidden_dim;
    let q = cfg.quantize_blocks;
    let mut b = Builder::default();
    let x_embed = b.linear("x_embed", cfg.patch_dim(), d, true, false, false);
    let pos_embed = b.param("pos_embed".into(), vec![cfg.num_patches(), d], Role::Embedding, Init::Normal(0.02));
    let t_mlp1 = b.linear("t_embed.mlp1", cfg.freq_dim(), d, true, false, false);
    let t_mlp2 = b.linear("t_embed.mlp2", d, d, true, false, false);
    let y_table = b.param("y_embed.table".into(), vec![cfg.num_classes + 1, d], Role::Embedding, Init::Normal(0.02));
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        let f = cfg.ffn_dim();
        blocks.push(BlockLayout {
            norm1: b.param(format!("{p}.norm1.gain"), vec![d], Role::Gain, Init::Ones),
            norm2: b.param(format!("{p}.norm2.gain"), vec![d], Role::Gain, Init::Ones),
            q: b.linear(&format!("{p}.attn.q"), d, d, false, q, false),
            k: b.linear(&format!("{p}.attn.k"), d, d, false, q, false),
            v: b.linear(&format!("{p}.attn.v"), d, d, false, q, false),
            o: b.linear(&format!("{p}.attn.o"), d, d, false, q, false),
            ffn_gate: b.linear(&format!("{p}.ffn.gate"), d, f, false, q, false),
            ffn_up: b.linear(&format!("{p}.ffn.up"), d, f, false, q, false),
            ffn_down: b.linear(&format!("{p}.ffn.down"), f, d, false, q, false),
            adaln: b.linear(&format!("{p}.adaln"), d, 6 * d, true, q, true),
            adaln_gain: cfg
                .adaln_rms
                .then(|| b.param(format!("{p}.adaln.rms_gain"), vec![6 * d], Role::Gain, Init::Ones)),
        });
    }
    let final_adaln = b.linear("final.adaln", d, 2 * d, true, false, true);
    let final_out = b.linear("final.linear", d, cfg.patch_dim(), true, false, true);
    let layout = Layout { x_embed, pos_embed, t_mlp1, t_mlp2, y_table, blocks, final_adaln, final_out };
    (b.specs, b.inits, layout)
}

/// Every parameter the model defines for `cfg`, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    build_layout(cfg).0
}

fn materialize<T: Real>(specs: Vec<ParamSpec>) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for s in specs {
        let n = s.numel();
        store.add(s.name, s.shape, s.role, vec![T::zero(); n]);
    }
    store
}

/// The six adaLN outputs of one block for one condition vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation<T> {
    pub shift_msa: Vec<T>,
    pub scale_msa: Vec<T>,
    pub gate_msa: Vec<T>,
    pub shift_mlp: Vec<T>,
    pub scale_mlp: Vec<T>,
    pub gate_mlp: Vec<T>,
}

impl<T: Real> Modulation<T> {
    fn from_flat(flat: &[T], d: usize) -> Self {
        let c = |k: usize| flat[k * d..(k + 1) * d].to_vec();
        Self { shift_msa: c(0), scale_msa: c(1), gate_msa: c(2), shift_mlp: c(3), scale_mlp: c(4), gate_mlp: c(5) }
    }

    /// Looks up a chunk by site name.
    pub fn site(&self, name: &str) -> Result<&[T]> {
        Ok(match name {
            "shift_msa" => &self.shift_msa,
            "scale_msa" => &self.scale_msa,
            "gate_msa" => &self.gate_msa,
            "shift_mlp" => &self.shift_mlp,
            "scale_mlp" => &self.scale_mlp,
            "gate_mlp" => &self.gate_mlp,
            other => return Err(Error::Domain(format!("unknown modulation site {other:?}"))),
        })
    }
}

/// Ternarized weights realized during a forward pass, kept for backward.
type LinTape<T> = Option<TernaryTensor<T>>;

/// Modulation, raw projection output, per-row inverse RMS and the
/// projection's tape.
type ModulationTape<T> = (Matrix<T>, Matrix<T>, Vec<T>, LinTape<T>);

#[derive(Clone, Debug)]
pub struct BlockTape<T> {
    x: Matrix<T>,
    ada_out: Matrix<T>,
    ada_inv: Vec<T>,
    /// Post-norm modulation, `batch × 6·hidden`.
    pub modulation: Matrix<T>,
    inv1: Vec<T>,
    n1: Matrix<T>,
    m1: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<T>,
    a: Matrix<T>,
    o: Matrix<T>,
    h: Matrix<T>,
    inv2: Vec<T>,
    n2: Matrix<T>,
    m2: Matrix<T>,
    gt: Matrix<T>,
    up: Matrix<T>,
    s: Matrix<T>,
    f: Matrix<T>,
    lin: [LinTape<T>; 8],
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    batch: usize,
    xp: Matrix<T>,
    freq: Matrix<T>,
    t1: Matrix<T>,
    t1s: Matrix<T>,
    c: Matrix<T>,
    sc: Matrix<T>,
    table_rows: Vec<usize>,
    pub blocks: Vec<BlockTape<T>>,
    fmod: Matrix<T>,
    fnorm: Matrix<T>,
    finv: Vec<T>,
    fm: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct DiT<T> {
    cfg: ModelConfig,
    num_timesteps: usize,
    quant: QuantConfig,
    pub params: ParamStore<T>,
    layout: Layout,
    /// Deployment weights keyed by the master weight they replace.
    packed: HashMap<ParamId, PackedTernary>,
}

const LQ: usize = 0;
const LK: usize = 1;
const LV: usize = 2;
const LO: usize = 3;
const LG: usize = 4;
const LU: usize = 5;
const LD: usize = 6;
const LA: usize = 7;

impl<T: Real> DiT<T> {
    /// A randomly initialized model in the adaLN-Zero state.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (specs, inits, layout) = build_layout(&cfg);
        let mut params = materialize::<T>(specs);
        for ((_, p), init) in params.iter_mut().zip(&inits) {
            match *init {
                Init::Zeros => {}
                Init::Ones => p.data.iter_mut().for_each(|x| *x = T::one()),
                Init::Normal(std) => {
                    for x in &mut p.data {
                        let z: f64 = StandardNormal.sample(rng);
                        *x = T::from_f64_lossy(std * z);
                    }
                }
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for x in &mut p.data {
                        *x = T::from_f64_lossy(rng.random_range(-a..a));
                    }
                }
                Init::Alpha { fan_in, fan_out } => {
                    p.data[0] = T::from_f64_lossy(init_alpha(xavier_std(fan_in, fan_out), rng));
                }
            }
        }
        Ok(Self {
            cfg,
            num_timesteps: DEFAULT_TIMESTEPS,
            quant: QuantConfig::default(),
            params,
            layout,
            packed: HashMap::new(),
        })
    }

    /// A model with every parameter zero; used when loading checkpoints.
    pub fn zeroed(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (specs, _, layout) = build_layout(&cfg);
        let params = materialize(specs);
        Ok(Self {
            cfg,
            num_timesteps: DEFAULT_TIMESTEPS,
            quant: QuantConfig::default(),
            params,
            layout,
            packed: HashMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    pub fn quant_config(&self) -> &QuantConfig {
        &self.quant
    }

    pub fn is_packed(&self) -> bool {
        !self.packed.is_empty()
    }

    /// Same parameters in another precision. Packed weights are dropped.
    pub fn cast<U: Real>(&self) -> DiT<U> {
        DiT {
            cfg: self.cfg.clone(),
            num_timesteps: self.num_timesteps,
            quant: self.quant,
            params: self.params.cast(),
            layout: self.layout.clone(),
            packed: HashMap::new(),
        }
    }

    /// A full-precision model whose block weights are the current
    /// effective ternary weights `α·codes`.
    pub fn dequantized(&self) -> Result<DiT<T>> {
        let mut cfg = self.cfg.clone();
        cfg.quantize_blocks = false;
        let mut out = DiT::zeroed(cfg)?;
        out.num_timesteps = self.num_timesteps;
        let mut effective = HashMap::new();
        for blk in &self.layout.blocks {
            for (_, lin) in blk.linears() {
                if let Some(t) = self.ternary_weights(&lin)? {
                    effective.insert(self.params.param(lin.weight).name.clone(), t.effective().data);
                }
            }
        }
        let ids: Vec<ParamId> = out.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = out.params.param(id).name.clone();
            let src = match effective.remove(&name) {
                Some(w) => w,
                None => {
                    let sid = self.params.find(&name).ok_or_else(|| Error::Format(format!("no parameter {name}")))?;
                    self.params.get(sid).to_vec()
                }
            };
            out.params.get_mut(id).copy_from_slice(&src);
        }
        Ok(out)
    }

    /// Every linear layer by parameter-name prefix, with whether it is
    /// ternary.
    pub fn linear_census(&self) -> Vec<(String, bool)> {
        let l = &self.layout;
        let mut all = vec![l.x_embed, l.t_mlp1, l.t_mlp2];
        for b in &l.blocks {
            all.extend(b.linears().iter().map(|(_, lin)| *lin));
        }
        all.extend([l.final_adaln, l.final_out]);
        all.iter()
            .map(|lin| {
                let name = &self.params.param(lin.weight).name;
                (name.trim_end_matches(".weight").to_string(), lin.alpha.is_some())
            })
            .collect()
    }

    /// Quantizes (or fetches the packed form of) a ternary layer.
    pub fn ternary_weights(&self, lin: &Linear) -> Result<Option<TernaryTensor<T>>> {
        let Some(alpha) = lin.alpha else { return Ok(None) };
        if let Some(p) = self.packed.get(&lin.weight) {
            let t = p.to_ternary()?;
            let a = T::from_f64_lossy(f64::from(t.alpha()));
            return Ok(Some(TernaryTensor::new(t.rows(), t.cols(), t.codes().to_vec(), a)?));
        }
        let w = Matrix::from_vec(lin.out_features, lin.in_features, self.params.get(lin.weight).to_vec())?;
        Ok(Some(ternarize(&w, self.params.get(alpha)[0], &self.quant)?))
    }

    fn linear_forward(&self, lin: &Linear, x: &Matrix<T>) -> Result<(Matrix<T>, LinTape<T>)> {
        let bias = lin.bias.map(|b| self.params.get(b));
        if lin.alpha.is_some() {
            if let Some(p) = self.packed.get(&lin.weight) {
                return Ok((packed_linear(x, p, bias)?, None));
            }
            let t = self.ternary_weights(lin)?.expect("ternary layer");
            let y = ternary_linear(x, &t, bias)?;
            return Ok((y, Some(t)));
        }
        if x.cols != lin.in_features {
            return Err(Error::Shape(format!("input has {} features, layer expects {}", x.cols, lin.in_features)));
        }
        let mut y = Matrix::zeros(x.rows, lin.out_features);
        let w = View::dense(self.params.get(lin.weight), lin.out_features, lin.in_features);
        gemm(T::one(), x.view(), w.t(), T::zero(), y.view_mut());
        if let Some(b) = bias {
            for r in 0..y.rows {
                for (o, &bv) in y.row_mut(r).iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        Ok((y, None))
    }

    fn linear_backward(
        &self,
        lin: &Linear,
        tape: &LinTape<T>,
        x: &Matrix<T>,
        dy: &Matrix<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Result<Option<Matrix<T>>> {
        if self.packed.contains_key(&lin.weight) {
            return Err(Error::Domain("packed weights are inference-only".into()));
        }
        let (out, inp) = (lin.out_features, lin.in_features);
        match (lin.alpha, tape) {
            (Some(alpha), Some(t)) => {
                let mut dw = Matrix::zeros(out, inp);
                gemm(T::one(), dy.view().t(), x.view(), T::zero(), dw.view_mut());
                grads.get_mut(alpha)[0] += alpha_grad(&dw.data, t.codes());
                for (g, d) in grads.get_mut(lin.weight).iter_mut().zip(&dw.data) {
                    *g += *d;
                }
            }
            (None, _) => {
                let gw = ViewMut::dense(grads.get_mut(lin.weight), out, inp);
                gemm(T::one(), dy.view().t(), x.view(), T::one(), gw);
            }
            (Some(_), None) => return Err(Error::Domain("ternary layer missing from tape".into())),
        }
        if let Some(b) = lin.bias {
            let gb = grads.get_mut(b);
            for r in 0..dy.rows {
                for (g, &d) in gb.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
        if !need_dx {
            return Ok(None);
        }
        let mut dx = Matrix::zeros(dy.rows, inp);
        match tape {
            Some(t) => {
                let w = t.effective();
                gemm(T::one(), dy.view(), w.view(), T::zero(), dx.view_mut());
            }
            None => {
                let w = View::dense(self.params.get(lin.weight), out, inp);
                gemm(T::one(), dy.view(), w, T::zero(), dx.view_mut());
            }
        }
        Ok(Some(dx))
    }

    /// Sinusoidal features `[cos(t·f_i) | sin(t·f_i)]`, `f_i = 10000^(−i/half)`.
    pub fn timestep_frequencies(&self, t: usize) -> Vec<T> {
        let dim = self.cfg.freq_dim();
        let half = dim / 2;
        let mut out = vec![T::zero(); dim];
        for i in 0..half {
            let f = (-(10000f64).ln() * i as f64 / half as f64).exp();
            let arg = t as f64 * f;
            out[i] = T::from_f64_lossy(arg.cos());
            out[half + i] = T::from_f64_lossy(arg.sin());
        }
        out
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_timesteps {
            return Err(Error::Domain(format!("timestep {t} outside [0, {})", self.num_timesteps)));
        }
        Ok(())
    }

    fn check_label(&self, l: usize) -> Result<()> {
        if l >= self.cfg.num_classes {
            return Err(Error::Domain(format!("class {l} outside [0, {})", self.cfg.num_classes)));
        }
        Ok(())
    }

    pub fn timestep_embedding(&self, t: usize) -> Result<Vec<T>> {
        self.check_t(t)?;
        let freq = Matrix::from_vec(1, self.cfg.freq_dim(), self.timestep_frequencies(t))?;
        let (t1, _) = self.linear_forward(&self.layout.t_mlp1, &freq)?;
        let (te, _) = self.linear_forward(&self.layout.t_mlp2, &t1.map(silu))?;
        Ok(te.data)
    }

    /// Row of the label table; `drop` selects the extra null row.
    pub fn label_embedding(&self, l: usize, drop: bool) -> Result<Vec<T>> {
        let row = if drop {
            self.cfg.num_classes
        } else {
            self.check_label(l)?;
            l
        };
        let d = self.cfg.hidden_dim;
        Ok(self.params.get(self.layout.y_table)[row * d..(row + 1) * d].to_vec())
    }

    /// `c = timestep_embedding(t) + label_embedding(l, drop)`.
    pub fn condition(&self, t: usize, l: usize, drop: bool) -> Result<Vec<T>> {
        let te = self.timestep_embedding(t)?;
        let ye = self.label_embedding(l, drop)?;
        Ok(te.iter().zip(&ye).map(|(&a, &b)| a + b).collect())
    }

    fn block_modulation(&self, blk: &BlockLayout, sc: &Matrix<T>) -> Result<ModulationTape<T>> {
        let (ada_out, lt) = self.linear_forward(&blk.adaln, sc)?;
        match blk.adaln_gain {
            Some(g) => {
                let (m, inv) = rms_rows(&ada_out, self.params.get(g), T::from_f64_lossy(self.cfg.rms_eps));
                Ok((m, ada_out, inv, lt))
            }
            None => Ok((ada_out.clone(), ada_out, Vec::new(), lt)),
        }
    }

    /// adaLN output of block `block` for condition `c`.
    pub fn adaln_modulation(&self, block: usize, c: &[T]) -> Result<Modulation<T>> {
        let blk = self.block(block)?;
        let d = self.cfg.hidden_dim;
        if c.len() != d {
            return Err(Error::Shape(format!("condition has {} entries, expected {d}", c.len())));
        }
        let sc = Matrix::from_vec(1, d, c.iter().map(|&x| silu(x)).collect())?;
        let (m, ..) = self.block_modulation(blk, &sc)?;
        Ok(Modulation::from_flat(&m.data, d))
    }

    fn block(&self, i: usize) -> Result<&BlockLayout> {
        self.layout.blocks.get(i).ok_or_else(|| Error::Domain(format!("block {i} outside depth {}", self.cfg.depth)))
    }

    /// One block on a single sample's tokens (`tokens × hidden`).
    pub fn block_forward(&self, block: usize, x: &Matrix<T>, c: &[T]) -> Result<Matrix<T>> {
        let d = self.cfg.hidden_dim;
        if x.cols != d || c.len() != d {
            return Err(Error::Shape(format!(
                "block expects hidden width {d}, got tokens {} and condition {}",
                x.cols,
                c.len()
            )));
        }
        let sc = Matrix::from_vec(1, d, c.iter().map(|&v| silu(v)).collect())?;
        let (out, _) = self.block_forward_batched(self.block(block)?, x.clone(), &sc, 1, x.rows)?;
        Ok(out)
    }

    fn modulate(&self, x: &Matrix<T>, modv: &Matrix<T>, shift: usize, scale: usize, n: usize) -> Matrix<T> {
        let d = self.cfg.hidden_dim;
        let mut out = Matrix::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let m = modv.row(r / n);
            let (sh, sc) = (&m[shift * d..(shift + 1) * d], &m[scale * d..(scale + 1) * d]);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = x.get(r, j) * (T::one() + sc[j]) + sh[j];
            }
        }
        out
    }

    fn block_forward_batched(
        &self,
        blk: &BlockLayout,
        x: Matrix<T>,
        sc: &Matrix<T>,
        batch: usize,
        n: usize,
    ) -> Result<(Matrix<T>, BlockTape<T>)> {
        let d = self.cfg.hidden_dim;
        let (heads, dh) = (self.cfg.num_heads, self.cfg.head_dim());
        let eps = T::from_f64_lossy(self.cfg.rms_eps);
        let (modv, ada_out, ada_inv, lt_a) = self.block_modulation(blk, sc)?;

        let (n1, inv1) = rms_rows(&x, self.params.get(blk.norm1), eps);
        let m1 = self.modulate(&n1, &modv, 0, 1, n);
        let (q, lt_q) = self.linear_forward(&blk.q, &m1)?;
        let (k, lt_k) = self.linear_forward(&blk.k, &m1)?;
        let (v, lt_v) = self.linear_forward(&blk.v, &m1)?;

        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); batch * heads * n * n];
        let mut a = Matrix::zeros(x.rows, d);
        for b in 0..batch {
            for h in 0..heads {
                let off = b * n * d + h * dh;
                let p = &mut probs[(b * heads + h) * n * n..][..n * n];
                gemm(
                    scale,
                    View::new(&q.data[off..], n, dh, d, 1),
                    View::new(&k.data[off..], n, dh, d, 1).t(),
                    T::zero(),
                    ViewMut::dense(p, n, n),
                );
                softmax_rows_in_place(p, n);
                gemm(
                    T::one(),
                    View::dense(p, n, n),
                    View::new(&v.data[off..], n, dh, d, 1),
                    T::zero(),
                    ViewMut::new(&mut a.data[off..], n, dh, d, 1),
                );
            }
        }
        let (o, lt_o) = self.linear_forward(&blk.o, &a)?;
        let mut h = x.clone();
        for r in 0..h.rows {
            let gate = &modv.row(r / n)[2 * d..3 * d];
            for (j, hv) in h.row_mut(r).iter_mut().enumerate() {
                *hv += gate[j] * o.get(r, j);
            }
        }

        let (n2, inv2) = rms_rows(&h, self.params.get(blk.norm2), eps);
        let m2 = self.modulate(&n2, &modv, 3, 4, n);
        let (gt, lt_g) = self.linear_forward(&blk.ffn_gate, &m2)?;
        let (up, lt_u) = self.linear_forward(&blk.ffn_up, &m2)?;
        let mut s = Matrix::zeros(gt.rows, gt.cols);
        for ((sv, &g), &u) in s.data.iter_mut().zip(&gt.data).zip(&up.data) {
            *sv = silu(g) * u;
        }
        let (f, lt_d) = self.linear_forward(&blk.ffn_down, &s)?;
        let mut out = h.clone();
        for r in 0..out.rows {
            let gate = &modv.row(r / n)[5 * d..6 * d];
            for (j, ov) in out.row_mut(r).iter_mut().enumerate() {
                *ov += gate[j] * f.get(r, j);
            }
        }
        let tape = BlockTape {
            x,
            ada_out,
            ada_inv,
            modulation: modv,
            inv1,
            n1,
            m1,
            q,
            k,
            v,
            probs,
            a,
            o,
            h,
            inv2,
            n2,
            m2,
            gt,
            up,
            s,
            f,
            lin: [lt_q, lt_k, lt_v, lt_o, lt_g, lt_u, lt_d, lt_a],
        };
        Ok((out, tape))
    }

    /// Predicts the noise in each `x_t`. Returns predictions and the tape
    /// for [`DiT::backward`].
    pub fn forward(
        &self,
        x_t: &[Image<T>],
        t: &[usize],
        labels: &[usize],
        drop: &[bool],
    ) -> Result<(Vec<Image<T>>, Tape<T>)> {
        let cfg = &self.cfg;
        let batch = x_t.len();
        if t.len() != batch || labels.len() != batch || drop.len() != batch {
            return Err(Error::Shape("images, timesteps, labels and drop flags differ in length".into()));
        }
        let (d, n, pd) = (cfg.hidden_dim, cfg.num_patches(), cfg.patch_dim());
        let mut xp = Matrix::zeros(batch * n, pd);
        for (b, img) in x_t.iter().enumerate() {
            if img.shape() != (cfg.channels, cfg.image_size, cfg.image_size) {
                return Err(Error::Shape(format!(
                    "image {:?} does not match model input {:?}",
                    img.shape(),
                    (cfg.channels, cfg.image_size, cfg.image_size)
                )));
            }
            let p = patchify(img, cfg.patch_size)?;
            xp.data[b * n * pd..(b + 1) * n * pd].copy_from_slice(&p.data);
        }
        let mut table_rows = Vec::with_capacity(batch);
        let mut freq = Matrix::zeros(batch, cfg.freq_dim());
        for b in 0..batch {
            self.check_t(t[b])?;
            table_rows.push(if drop[b] {
                cfg.num_classes
            } else {
                self.check_label(labels[b])?;
                labels[b]
            });
            freq.row_mut(b).copy_from_slice(&self.timestep_frequencies(t[b]));
        }

        let (mut h, _) = self.linear_forward(&self.layout.x_embed, &xp)?;
        let pos = self.params.get(self.layout.pos_embed);
        for r in 0..h.rows {
            let pr = &pos[(r % n) * d..(r % n + 1) * d];
            for (hv, &p) in h.row_mut(r).iter_mut().zip(pr) {
                *hv += p;
            }
        }

        let (t1, _) = self.linear_forward(&self.layout.t_mlp1, &freq)?;
        let t1s = t1.map(silu);
        let (mut c, _) = self.linear_forward(&self.layout.t_mlp2, &t1s)?;
        let table = self.params.get(self.layout.y_table);
        for (b, &row) in table_rows.iter().enumerate() {
            for (cv, &yv) in c.row_mut(b).iter_mut().zip(&table[row * d..(row + 1) * d]) {
                *cv += yv;
            }
        }
        let sc = c.map(silu);

        let mut blocks = Vec::with_capacity(cfg.depth);
        for blk in &self.layout.blocks {
            let (out, tape) = self.block_forward_batched(blk, h, &sc, batch, n)?;
            blocks.push(tape);
            h = out;
        }

        let (fmod, _) = self.linear_forward(&self.layout.final_adaln, &sc)?;
        let (fnorm, finv) = layer_norm_rows(&h, T::from_f64_lossy(FINAL_NORM_EPS));
        let fm = self.modulate(&fnorm, &fmod, 0, 1, n);
        let (y, _) = self.linear_forward(&self.layout.final_out, &fm)?;
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let tok = Matrix::from_vec(n, pd, y.data[b * n * pd..(b + 1) * n * pd].to_vec())?;
            out.push(unpatchify(&tok, cfg.channels, cfg.image_size, cfg.image_size, cfg.patch_size)?);
        }
        let tape = Tape { batch, xp, freq, t1, t1s, c, sc, table_rows, blocks, fmod, fnorm, finv, fm };
        Ok((out, tape))
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, x_t: &[Image<T>], t: &[usize], labels: &[usize], drop: &[bool]) -> Result<Vec<Image<T>>> {
        Ok(self.forward(x_t, t, labels, drop)?.0)
    }

    /// Back-propagates `d_out` (gradient of the loss w.r.t. each
    /// prediction). Returns parameter gradients and input-image gradients.
    pub fn backward(&self, tape: &Tape<T>, d_out: &[Image<T>]) -> Result<(Grads<T>, Vec<Image<T>>)> {
        let cfg = &self.cfg;
        let (batch, d, n, pd) = (tape.batch, cfg.hidden_dim, cfg.num_patches(), cfg.patch_dim());
        if d_out.len() != batch {
            return Err(Error::Shape(format!("{} output gradients for batch {batch}", d_out.len())));
        }
        let mut grads = Grads::zeros_like(&self.params);
        let mut dy = Matrix::zeros(batch * n, pd);
        for (b, g) in d_out.iter().enumerate() {
            let p = patchify(g, cfg.patch_size)?;
            dy.data[b * n * pd..(b + 1) * n * pd].copy_from_slice(&p.data);
        }

        // final layer
        let l = &self.layout;
        let dfm = self.linear_backward(&l.final_out, &None, &tape.fm, &dy, &mut grads, true)?.unwrap();
        let mut dfmod = Matrix::zeros(batch, 2 * d);
        let mut dfnorm = Matrix::zeros(dfm.rows, d);
        for r in 0..dfm.rows {
            let b = r / n;
            let m = tape.fmod.row(b);
            for j in 0..d {
                let g = dfm.get(r, j);
                dfnorm.data[r * d + j] = g * (T::one() + m[d + j]);
                dfmod.data[b * 2 * d + j] += g;
                dfmod.data[b * 2 * d + d + j] += g * tape.fnorm.get(r, j);
            }
        }
        let mut dsc = self.linear_backward(&l.final_adaln, &None, &tape.sc, &dfmod, &mut grads, true)?.unwrap();
        let mut dh = layer_norm_rows_backward(&tape.fnorm, &tape.finv, &dfnorm);

        for (blk, bt) in l.blocks.iter().zip(&tape.blocks).rev() {
            dh = self.block_backward(blk, bt, dh, &tape.sc, &mut dsc, &mut grads, batch, n)?;
        }

        // condition path
        let mut dc = dsc;
        for (g, &cv) in dc.data.iter_mut().zip(&tape.c.data) {
            *g *= silu_grad(cv);
        }
        {
            let gt = grads.get_mut(l.y_table);
            for (b, &row) in tape.table_rows.iter().enumerate() {
                for (g, &v) in gt[row * d..(row + 1) * d].iter_mut().zip(dc.row(b)) {
                    *g += v;
                }
            }
        }
        let mut dt1 = self.linear_backward(&l.t_mlp2, &None, &tape.t1s, &dc, &mut grads, true)?.unwrap();
        for (g, &v) in dt1.data.iter_mut().zip(&tape.t1.data) {
            *g *= silu_grad(v);
        }
        self.linear_backward(&l.t_mlp1, &None, &tape.freq, &dt1, &mut grads, false)?;

        // embedding path
        {
            let gp = grads.get_mut(l.pos_embed);
            for r in 0..dh.rows {
                for (g, &v) in gp[(r % n) * d..(r % n + 1) * d].iter_mut().zip(dh.row(r)) {
                    *g += v;
                }
            }
        }
        let dxp = self.linear_backward(&l.x_embed, &None, &tape.xp, &dh, &mut grads, true)?.unwrap();
        let mut dimgs = Vec::with_capacity(batch);
        for b in 0..batch {
            let tok = Matrix::from_vec(n, pd, dxp.data[b * n * pd..(b + 1) * n * pd].to_vec())?;
            dimgs.push(unpatchify(&tok, cfg.channels, cfg.image_size, cfg.image_size, cfg.patch_size)?);
        }
        Ok((grads, dimgs))
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        blk: &BlockLayout,
        bt: &BlockTape<T>,
        dout: Matrix<T>,
        sc: &Matrix<T>,
        dsc: &mut Matrix<T>,
        grads: &mut Grads<T>,
        batch: usize,
        n: usize,
    ) -> Result<Matrix<T>> {
        let d = self.cfg.hidden_dim;
        let (heads, dh_) = (self.cfg.num_heads, self.cfg.head_dim());
        let rows = dout.rows;
        let mut dmod = Matrix::zeros(batch, 6 * d);

        // out = h + gate_mlp ⊙ f
        let mut df = Matrix::zeros(rows, d);
        for r in 0..rows {
            let b = r / n;
            for j in 0..d {
                let g = dout.get(r, j);
                df.data[r * d + j] = g * bt.modulation.get(b, 5 * d + j);
                dmod.data[b * 6 * d + 5 * d + j] += g * bt.f.get(r, j);
            }
        }
        let ds = self.linear_backward(&blk.ffn_down, &bt.lin[LD], &bt.s, &df, grads, true)?.unwrap();
        let mut dgt = Matrix::zeros(rows, bt.gt.cols);
        let mut dup = Matrix::zeros(rows, bt.gt.cols);
        for i in 0..ds.data.len() {
            let (g, u) = (bt.gt.data[i], bt.up.data[i]);
            let sg = sigmoid(g);
            dgt.data[i] = ds.data[i] * u * sg * (T::one() + g * (T::one() - sg));
            dup.data[i] = ds.data[i] * g * sg;
        }
        let mut dm2 = self.linear_backward(&blk.ffn_gate, &bt.lin[LG], &bt.m2, &dgt, grads, true)?.unwrap();
        let dm2u = self.linear_backward(&blk.ffn_up, &bt.lin[LU], &bt.m2, &dup, grads, true)?.unwrap();
        for (a, b) in dm2.data.iter_mut().zip(&dm2u.data) {
            *a += *b;
        }
        let dn2 = self.modulate_backward(&bt.n2, &bt.modulation, &dm2, &mut dmod, 3, 4, n);
        let mut dh = rms_rows_backward(&bt.h, self.params.get(blk.norm2), &bt.inv2, &dn2, grads.get_mut(blk.norm2));
        for (a, b) in dh.data.iter_mut().zip(&dout.data) {
            *a += *b;
        }

        // h = x + gate_msa ⊙ o
        let mut do_ = Matrix::zeros(rows, d);
        for r in 0..rows {
            let b = r / n;
            for j in 0..d {
                let g = dh.get(r, j);
                do_.data[r * d + j] = g * bt.modulation.get(b, 2 * d + j);
                dmod.data[b * 6 * d + 2 * d + j] += g * bt.o.get(r, j);
            }
        }
        let da = self.linear_backward(&blk.o, &bt.lin[LO], &bt.a, &do_, grads, true)?.unwrap();

        let scale = T::one() / T::from_usize(dh_).unwrap().sqrt();
        let mut dq = Matrix::zeros(rows, d);
        let mut dk = Matrix::zeros(rows, d);
        let mut dv = Matrix::zeros(rows, d);
        let mut dp = vec![T::zero(); n * n];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * n * d + h * dh_;
                let p = &bt.probs[(b * heads + h) * n * n..][..n * n];
                let da_v = View::new(&da.data[off..], n, dh_, d, 1);
                gemm(
                    T::one(),
                    da_v,
                    View::new(&bt.v.data[off..], n, dh_, d, 1).t(),
                    T::zero(),
                    ViewMut::dense(&mut dp, n, n),
                );
                gemm(
                    T::one(),
                    View::dense(p, n, n).t(),
                    da_v,
                    T::zero(),
                    ViewMut::new(&mut dv.data[off..], n, dh_, d, 1),
                );
                for i in 0..n {
                    let pr = &p[i * n..(i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &pv) in dr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot) * scale;
                    }
                }
                gemm(
                    T::one(),
                    View::dense(&dp, n, n),
                    View::new(&bt.k.data[off..], n, dh_, d, 1),
                    T::zero(),
                    ViewMut::new(&mut dq.data[off..], n, dh_, d, 1),
                );
                gemm(
                    T::one(),
                    View::dense(&dp, n, n).t(),
                    View::new(&bt.q.data[off..], n, dh_, d, 1),
                    T::zero(),
                    ViewMut::new(&mut dk.data[off..], n, dh_, d, 1),
                );
            }
        }
        let mut dm1 = self.linear_backward(&blk.q, &bt.lin[LQ], &bt.m1, &dq, grads, true)?.unwrap();
        for (lin, lt, g) in [(&blk.k, &bt.lin[LK], &dk), (&blk.v, &bt.lin[LV], &dv)] {
            let part = self.linear_backward(lin, lt, &bt.m1, g, grads, true)?.unwrap();
            for (a, b) in dm1.data.iter_mut().zip(&part.data) {
                *a += *b;
            }
        }
        let dn1 = self.modulate_backward(&bt.n1, &bt.modulation, &dm1, &mut dmod, 0, 1, n);
        let dx1 = rms_rows_backward(&bt.x, self.params.get(blk.norm1), &bt.inv1, &dn1, grads.get_mut(blk.norm1));
        for (a, b) in dh.data.iter_mut().zip(&dx1.data) {
            *a += *b;
        }

        // modulation path
        let dada = match blk.adaln_gain {
            Some(g) => {
                let gain = self.params.get(g).to_vec();
                rms_rows_backward(&bt.ada_out, &gain, &bt.ada_inv, &dmod, grads.get_mut(g))
            }
            None => dmod,
        };
        // the adaLN input is silu(c), shared with the other blocks
        let part = self.linear_backward(&blk.adaln, &bt.lin[LA], sc, &dada, grads, true)?.unwrap();
        for (a, b) in dsc.data.iter_mut().zip(&part.data) {
            *a += *b;
        }
        Ok(dh)
    }

    #[allow(clippy::too_many_arguments)]
    fn modulate_backward(
        &self,
        normed: &Matrix<T>,
        modv: &Matrix<T>,
        dm: &Matrix<T>,
        dmod: &mut Matrix<T>,
        shift: usize,
        scale: usize,
        n: usize,
    ) -> Matrix<T> {
        let d = self.cfg.hidden_dim;
        let mut dn = Matrix::zeros(dm.rows, d);
        for r in 0..dm.rows {
            let b = r / n;
            for j in 0..d {
                let g = dm.get(r, j);
                dn.data[r * d + j] = g * (T::one() + modv.get(b, scale * d + j));
                dmod.data[b * 6 * d + shift * d + j] += g;
                dmod.data[b * 6 * d + scale * d + j] += g * normed.get(r, j);
            }
        }
        dn
    }
}

impl DiT<f32> {
    /// Full-precision checkpoint of every parameter (masters and `α`s).
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        if self.is_packed() {
            return Err(Error::Domain("model holds packed weights; masters are unavailable".into()));
        }
        let mut ckpt = Checkpoint::new(self.cfg.to_text());
        for (_, p) in self.params.iter() {
            ckpt.push_dense(p.name.clone(), p.shape.clone(), p.data.clone())?;
        }
        Ok(ckpt)
    }

    /// Deployment checkpoint: each ternary layer is quantized once and
    /// stored 2-bit packed with its `α`; everything else stays dense.
    pub fn to_packed_checkpoint(&self) -> Result<Checkpoint> {
        if !self.cfg.quantize_blocks {
            return Err(Error::Domain("model has no ternary layers to pack".into()));
        }
        let mut ternary = HashMap::new();
        let mut alphas = Vec::new();
        for blk in &self.layout.blocks {
            for (_, lin) in blk.linears() {
                let t = self.ternary_weights(&lin)?.expect("quantized block layer");
                ternary.insert(lin.weight, PackedTernary::from_ternary(&t));
                alphas.extend(lin.alpha);
            }
        }
        let mut ckpt = Checkpoint::new(self.cfg.to_text());
        for (id, p) in self.params.iter() {
            if let Some(packed) = ternary.remove(&id) {
                ckpt.push_packed(p.name.clone(), packed)?;
            } else if !alphas.contains(&id) {
                ckpt.push_dense(p.name.clone(), p.shape.clone(), p.data.clone())?;
            }
        }
        Ok(ckpt)
    }

    /// Rebuilds a model from either checkpoint flavor.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::from_text(&ckpt.config)?;
        let mut model = Self::zeroed(cfg)?;
        let mut used = 0;
        let alpha_of: HashMap<ParamId, ParamId> = model
            .layout
            .blocks
            .iter()
            .flat_map(|b| b.linears())
            .filter_map(|(_, lin)| lin.alpha.map(|a| (a, lin.weight)))
            .collect();
        let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let (name, shape, role) = {
                let p = model.params.param(id);
                (p.name.clone(), p.shape.clone(), p.role)
            };
            match ckpt.get(&name) {
                Some(TensorData::Dense { shape: s, values }) => {
                    if *s != shape {
                        return Err(Error::Format(format!("{name}: shape {s:?}, model expects {shape:?}")));
                    }
                    model.params.get_mut(id).copy_from_slice(values);
                    used += 1;
                }
                Some(TensorData::Packed(p)) => {
                    if role != Role::TernaryWeight || [p.rows(), p.cols()] != shape[..] {
                        return Err(Error::Format(format!("{name}: unexpected packed tensor")));
                    }
                    model.packed.insert(id, p.clone());
                    used += 1;
                }
                None if role == Role::Alpha => {
                    // carried inside the packed weight
                    let w = alpha_of[&id];
                    let p = model.packed.get(&w).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
                    model.params.get_mut(id)[0] = p.alpha();
                }
                None => return Err(Error::Format(format!("missing tensor {name}"))),
            }
        }
        if used != ckpt.tensors.len() {
            return Err(Error::Format("checkpoint holds tensors the model does not define".into()));
        }
        Ok(model)
    }
}
