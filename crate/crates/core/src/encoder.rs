//! The slide encoder: input MLP, pre-norm transformer blocks with per-head
//! distance-penalty attention bias (2D ALiBi), cls pooling.
//!
//! The encoder is size-agnostic: bias is computed from token coordinates, so
//! parameters trained on 16x16 crops apply unchanged to whole grids. A cls
//! token (zero bias to and from everything) is prepended for pooling.
//! Background tokens are hidden from attention: nobody attends to them and
//! their own attention output is zeroed, so they ride the residual stream
//! without influencing tissue tokens.
//!
//! Two forward paths exist: [`encode_graph`] builds the autodiff tape for
//! training, [`encode`] is the pure evaluation path. Both compute bias
//! entries with the same function and share the slice kernels.

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha20Rng;

use crate::graph::{Graph, Var};
use crate::grid::{CropView, FeatureGrid};
use crate::params::{Binder, ParamSet};
use crate::tensor::kernels;
use crate::{arg_err, fm, shape_err, Error, Result, Tensor};

/// Positional information scheme. `Alibi` is the model default; the others
/// exist for ablation and are tested for forward correctness only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosScheme {
    Alibi,
    Absolute,
    Rotary,
    None,
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub input_dim: usize,
    pub drop_path_rate: f64,
    pub pos: PosScheme,
    /// Multiplier on every head slope; 0 turns ALiBi into a no-bias model.
    pub alibi_slope_scale: f64,
    /// Side of the learned position table for the absolute scheme.
    pub abs_pos_side: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    /// Desk-scale default; [`EncoderConfig::paper`] gives the full size.
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            heads: 4,
            head_dim: 16,
            mlp_hidden: 256,
            input_dim: 32,
            drop_path_rate: 0.1,
            pos: PosScheme::Alibi,
            alibi_slope_scale: 1.0,
            abs_pos_side: 64,
            ln_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn paper() -> Self {
        EncoderConfig {
            layers: 6,
            heads: 12,
            head_dim: 64,
            mlp_hidden: 3072,
            input_dim: 768,
            ..EncoderConfig::default()
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.input_dim == 0 {
            return Err(arg_err!("encoder dims must be positive"));
        }
        if self.pos == PosScheme::Rotary && self.head_dim % 4 != 0 {
            return Err(arg_err!("rotary needs head_dim divisible by 4"));
        }
        if self.ln_eps <= 0.0 {
            return Err(arg_err!("ln_eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(arg_err!("drop_path_rate must be in [0,1)"));
        }
        Ok(())
    }
}

/// Token coordinate: a grid cell position or the cls sentinel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coord {
    Cls,
    Cell(f64, f64),
}

/// Flattened encoder input: N tokens with features, coordinates in units of
/// the reference patch size, and an activity mask (false = background).
#[derive(Clone, Debug)]
pub struct TokenInput {
    pub n: usize,
    pub dim: usize,
    pub feats: Vec<f64>,
    pub coords: Vec<(f64, f64)>,
    pub active: Vec<bool>,
}

impl TokenInput {
    pub fn from_view(view: &CropView) -> Result<TokenInput> {
        if view.tissue_count() == 0 {
            return Err(Error::Empty(String::from("view has no tissue tokens")));
        }
        let n = view.side * view.side;
        let feats = view.features.iter().map(|&v| v as f64).collect();
        let coords = view
            .coords
            .iter()
            .map(|&(r, c)| (c as f64 * view.coord_scale, r as f64 * view.coord_scale))
            .collect();
        Ok(TokenInput {
            n,
            dim: view.dim,
            feats,
            coords,
            active: view.mask.clone(),
        })
    }

    pub fn from_grid(grid: &FeatureGrid) -> Result<TokenInput> {
        if grid.tissue_count() == 0 {
            return Err(Error::Empty(String::from("grid has no tissue tokens")));
        }
        let n = grid.height * grid.width;
        let scale = grid.coord_scale();
        let feats = grid.features().iter().map(|&v| v as f64).collect();
        let mut coords = Vec::with_capacity(n);
        for r in 0..grid.height {
            for c in 0..grid.width {
                coords.push((c as f64 * scale, r as f64 * scale));
            }
        }
        Ok(TokenInput {
            n,
            dim: grid.dim,
            feats,
            coords,
            active: grid.mask().to_vec(),
        })
    }

    /// Coordinates including the cls sentinel at index 0.
    pub fn coords_with_cls(&self) -> Vec<Coord> {
        let mut out = Vec::with_capacity(self.n + 1);
        out.push(Coord::Cls);
        for &(x, y) in &self.coords {
            out.push(Coord::Cell(x, y));
        }
        out
    }

    /// Activity including the always-active cls at index 0.
    pub fn active_with_cls(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n + 1);
        out.push(true);
        out.extend_from_slice(&self.active);
        out
    }
}

/// Geometric head slopes m_h = 2^(-8h/H), h = 1..H.
pub fn head_slopes(n_heads: usize) -> Vec<f64> {
    (1..=n_heads)
        .map(|h| fm::pow(2.0, -8.0 * h as f64 / n_heads as f64))
        .collect()
}

fn coord_distance(a: Coord, b: Coord) -> Option<f64> {
    match (a, b) {
        (Coord::Cell(ax, ay), Coord::Cell(bx, by)) => {
            let dx = ax - bx;
            let dy = ay - by;
            Some(fm::sqrt(dx * dx + dy * dy))
        }
        _ => None,
    }
}

/// Distance-penalty bias: -m * Euclidean distance between grid coordinates;
/// pairs involving the cls sentinel get 0.
pub fn alibi_bias(coords_q: &[Coord], coords_k: &[Coord], slope: f64) -> Tensor {
    let (nq, nk) = (coords_q.len(), coords_k.len());
    let mut out = Tensor::zeros(&[nq, nk]);
    for i in 0..nq {
        for j in 0..nk {
            if let Some(d) = coord_distance(coords_q[i], coords_k[j]) {
                out.data_mut()[i * nk + j] = -slope * d;
            }
        }
    }
    out
}

/// One bias entry for the full (mask + position) policy shared by the train
/// and eval paths. Background keys are hidden from every other token;
/// a background query keeps only its self entry so softmax stays finite
/// (its output is zeroed afterwards).
fn bias_entry(coords: &[Coord], active: &[bool], slope: f64, i: usize, j: usize) -> f64 {
    if !active[j] && j != i {
        return f64::NEG_INFINITY;
    }
    if !active[i] || !active[j] {
        return 0.0;
    }
    match coord_distance(coords[i], coords[j]) {
        Some(d) => -slope * d,
        None => 0.0,
    }
}

/// Per-head bias matrices over tokens-with-cls. For schemes without a
/// distance term all heads share one matrix.
fn build_bias_matrices(
    cfg: &EncoderConfig,
    coords: &[Coord],
    active: &[bool],
) -> Vec<Rc<Vec<f64>>> {
    let n = coords.len();
    let slopes: Vec<f64> = match cfg.pos {
        PosScheme::Alibi => head_slopes(cfg.heads)
            .iter()
            .map(|m| m * cfg.alibi_slope_scale)
            .collect(),
        _ => vec![0.0],
    };
    let mats: Vec<Rc<Vec<f64>>> = slopes
        .iter()
        .map(|&m| {
            let mut b = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    b[i * n + j] = bias_entry(coords, active, m, i, j);
                }
            }
            Rc::new(b)
        })
        .collect();
    if mats.len() == cfg.heads {
        mats
    } else {
        (0..cfg.heads).map(|_| Rc::clone(&mats[0])).collect()
    }
}

/// Rotary cos/sin tables, one row per token (with cls), head_dim wide:
/// the first half of the dim pairs rotates with the x coordinate, the second
/// half with y; cls stays unrotated.
fn rotary_tables(cfg: &EncoderConfig, coords: &[Coord]) -> (Rc<Vec<f64>>, Rc<Vec<f64>>) {
    let n = coords.len();
    let d = cfg.head_dim;
    let pairs = d / 2;
    let per_axis = pairs / 2;
    let mut cos = vec![1.0; n * d];
    let mut sin = vec![0.0; n * d];
    for (i, coord) in coords.iter().enumerate() {
        let Coord::Cell(x, y) = *coord else { continue };
        for p in 0..pairs {
            let (axis_val, k) = if p < per_axis {
                (x, p)
            } else {
                (y, p - per_axis)
            };
            let inv_freq = fm::pow(10_000.0, -(k as f64) / per_axis.max(1) as f64);
            let theta = axis_val * inv_freq;
            let a = i * d + 2 * p;
            cos[a] = fm::cos(theta);
            cos[a + 1] = cos[a];
            sin[a] = fm::sin(theta);
            sin[a + 1] = sin[a];
        }
    }
    (Rc::new(cos), Rc::new(sin))
}

fn abs_pos_ids(cfg: &EncoderConfig, coords: &[Coord]) -> Vec<usize> {
    let side = cfg.abs_pos_side;
    coords
        .iter()
        .map(|c| match *c {
            Coord::Cls => 0,
            Coord::Cell(x, y) => {
                let col = (fm::round(x).max(0.0) as usize).min(side - 1);
                let row = (fm::round(y).max(0.0) as usize).min(side - 1);
                1 + row * side + col
            }
        })
        .collect()
}

/// Initialize all encoder parameters (names under "enc.").
pub fn init_params(cfg: &EncoderConfig, rng: &mut ChaCha20Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let e = cfg.embed_dim();
    let std = cfg.init_std;
    let mut p = ParamSet::new();
    let mut mat = |p: &mut ParamSet, name: &str, r: usize, c: usize, rng: &mut ChaCha20Rng| {
        p.insert(name, Tensor::randn(&[r, c], std, rng));
    };
    mat(&mut p, "enc.in.w1", cfg.input_dim, e, rng);
    p.insert("enc.in.b1", Tensor::zeros(&[1, e]));
    mat(&mut p, "enc.in.w2", e, e, rng);
    p.insert("enc.in.b2", Tensor::zeros(&[1, e]));
    p.insert("enc.cls", Tensor::randn(&[1, e], std, rng));
    p.insert("enc.mask", Tensor::randn(&[1, e], std, rng));
    if cfg.pos == PosScheme::Absolute {
        let rows = cfg.abs_pos_side * cfg.abs_pos_side + 1;
        p.insert("enc.pos", Tensor::randn(&[rows, e], std, rng));
    }
    for l in 0..cfg.layers {
        let b = alloc::format!("enc.blk{l}");
        p.insert(&alloc::format!("{b}.ln1.w"), Tensor::full(&[1, e], 1.0));
        p.insert(&alloc::format!("{b}.ln1.b"), Tensor::zeros(&[1, e]));
        for w in ["wq", "wk", "wv", "wo"] {
            mat(&mut p, &alloc::format!("{b}.attn.{w}"), e, e, rng);
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            p.insert(&alloc::format!("{b}.attn.{bias}"), Tensor::zeros(&[1, e]));
        }
        p.insert(&alloc::format!("{b}.ln2.w"), Tensor::full(&[1, e], 1.0));
        p.insert(&alloc::format!("{b}.ln2.b"), Tensor::zeros(&[1, e]));
        mat(&mut p, &alloc::format!("{b}.mlp.w1"), e, cfg.mlp_hidden, rng);
        p.insert(&alloc::format!("{b}.mlp.b1"), Tensor::zeros(&[1, cfg.mlp_hidden]));
        mat(&mut p, &alloc::format!("{b}.mlp.w2"), cfg.mlp_hidden, e, rng);
        p.insert(&alloc::format!("{b}.mlp.b2"), Tensor::zeros(&[1, e]));
    }
    p.insert("enc.norm.w", Tensor::full(&[1, e], 1.0));
    p.insert("enc.norm.b", Tensor::zeros(&[1, e]));
    Ok(p)
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.")
}

/// Training-path forward on the autodiff graph. Returns the post-norm token
/// matrix (n+1 rows, cls at row 0). `droppath_rng` enables stochastic depth;
/// pass `None` for teacher/eval-semantics forwards.
pub fn encode_graph(
    g: &mut Graph,
    binder: &mut Binder,
    params: &ParamSet,
    cfg: &EncoderConfig,
    input: &TokenInput,
    mask_token_at: &[usize],
    droppath_rng: Option<&mut ChaCha20Rng>,
) -> Result<Var> {
    cfg.validate()?;
    if input.dim != cfg.input_dim {
        return Err(shape_err!("input dim {} vs config {}", input.dim, cfg.input_dim));
    }
    let e = cfg.embed_dim();
    let n = input.n;
    let coords = input.coords_with_cls();
    let active = input.active_with_cls();
    let biases = build_bias_matrices(cfg, &coords, &active);

    // input MLP
    let feats = g.constant(n, input.dim, input.feats.clone())?;
    let w1 = binder.var(g, params, "enc.in.w1")?;
    let b1 = binder.var(g, params, "enc.in.b1")?;
    let w2 = binder.var(g, params, "enc.in.w2")?;
    let b2 = binder.var(g, params, "enc.in.b2")?;
    let h = g.matmul(feats, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, w2)?;
    let mut tokens = g.add_row(h, b2)?;

    // masked-position substitution with the learned mask embedding
    if !mask_token_at.is_empty() {
        let mask_emb = binder.var(g, params, "enc.mask")?;
        let keep = {
            let mut keep = vec![1.0; n];
            for &i in mask_token_at {
                if i >= n {
                    return Err(arg_err!("mask position {i} out of {n} tokens"));
                }
                keep[i] = 0.0;
            }
            g.constant(n, 1, keep)?
        };
        let dropd = g.mul_col(tokens, keep)?;
        let fill = {
            let mut fill = vec![0.0; n];
            for &i in mask_token_at {
                fill[i] = 1.0;
            }
            g.constant(n, 1, fill)?
        };
        let ones = g.constant(n, e, vec![1.0; n * e])?;
        let mask_rows = {
            let broadcast = g.mul(ones, ones)?; // placeholder-free identity
            let m = g.add_row(broadcast, mask_emb)?;
            let m = g.sub(m, ones)?;
            g.mul_col(m, fill)?
        };
        tokens = g.add(dropd, mask_rows)?;
    }

    let cls = binder.var(g, params, "enc.cls")?;
    let mut x = g.concat_rows(&[cls, tokens])?;

    if cfg.pos == PosScheme::Absolute {
        let table = binder.var(g, params, "enc.pos")?;
        let ids = abs_pos_ids(cfg, &coords);
        let pos = g.gather_rows(table, &ids)?;
        x = g.add(x, pos)?;
    }

    let rot = if cfg.pos == PosScheme::Rotary {
        Some(rotary_tables(cfg, &coords))
    } else {
        None
    };

    let qmask = {
        let col: Vec<f64> = active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        g.constant(n + 1, 1, col)?
    };
    let scale = 1.0 / fm::sqrt(cfg.head_dim as f64);
    let mut dp = droppath_rng;

    for l in 0..cfg.layers {
        let b = alloc::format!("enc.blk{l}");
        let gate_attn = draw_gate(cfg, &mut dp);
        let gate_mlp = draw_gate(cfg, &mut dp);

        if gate_attn > 0.0 {
            let ln_w = binder.var(g, params, &alloc::format!("{b}.ln1.w"))?;
            let ln_b = binder.var(g, params, &alloc::format!("{b}.ln1.b"))?;
            let hn = g.layer_norm(x, ln_w, ln_b, cfg.ln_eps)?;
            let wq = binder.var(g, params, &alloc::format!("{b}.attn.wq"))?;
            let bq = binder.var(g, params, &alloc::format!("{b}.attn.bq"))?;
            let wk = binder.var(g, params, &alloc::format!("{b}.attn.wk"))?;
            let bk = binder.var(g, params, &alloc::format!("{b}.attn.bk"))?;
            let wv = binder.var(g, params, &alloc::format!("{b}.attn.wv"))?;
            let bv = binder.var(g, params, &alloc::format!("{b}.attn.bv"))?;
            let wo = binder.var(g, params, &alloc::format!("{b}.attn.wo"))?;
            let bo = binder.var(g, params, &alloc::format!("{b}.attn.bo"))?;
            let q = g.matmul(hn, wq)?;
            let q = g.add_row(q, bq)?;
            let k = g.matmul(hn, wk)?;
            let k = g.add_row(k, bk)?;
            let v = g.matmul(hn, wv)?;
            let v = g.add_row(v, bv)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let off = hd * cfg.head_dim;
                let mut qh = g.slice_cols(q, off, cfg.head_dim)?;
                let mut kh = g.slice_cols(k, off, cfg.head_dim)?;
                let vh = g.slice_cols(v, off, cfg.head_dim)?;
                if let Some((cos, sin)) = &rot {
                    qh = g.rotate_rows(qh, Rc::clone(cos), Rc::clone(sin))?;
                    kh = g.rotate_rows(kh, Rc::clone(cos), Rc::clone(sin))?;
                }
                let p = g.attn_softmax(qh, kh, scale, Rc::clone(&biases[hd]))?;
                let p = g.mul_col(p, qmask)?;
                heads.push(g.matmul(p, vh)?);
            }
            let ctx = g.concat_cols(&heads)?;
            let o = g.matmul(ctx, wo)?;
            let o = g.add_row(o, bo)?;
            let o = if gate_attn != 1.0 { g.scale(o, gate_attn) } else { o };
            x = g.add(x, o)?;
        }

        if gate_mlp > 0.0 {
            let ln_w = binder.var(g, params, &alloc::format!("{b}.ln2.w"))?;
            let ln_b = binder.var(g, params, &alloc::format!("{b}.ln2.b"))?;
            let hn = g.layer_norm(x, ln_w, ln_b, cfg.ln_eps)?;
            let w1 = binder.var(g, params, &alloc::format!("{b}.mlp.w1"))?;
            let b1 = binder.var(g, params, &alloc::format!("{b}.mlp.b1"))?;
            let w2 = binder.var(g, params, &alloc::format!("{b}.mlp.w2"))?;
            let b2 = binder.var(g, params, &alloc::format!("{b}.mlp.b2"))?;
            let m = g.matmul(hn, w1)?;
            let m = g.add_row(m, b1)?;
            let m = g.gelu(m);
            let m = g.matmul(m, w2)?;
            let m = g.add_row(m, b2)?;
            let m = if gate_mlp != 1.0 { g.scale(m, gate_mlp) } else { m };
            x = g.add(x, m)?;
        }
    }

    let nw = binder.var(g, params, "enc.norm.w")?;
    let nb = binder.var(g, params, "enc.norm.b")?;
    g.layer_norm(x, nw, nb, cfg.ln_eps)
}

/// Stochastic-depth gate: 0 (skip branch) or 1/(1-rate) (keep, rescaled);
/// 1.0 when no rng is supplied (eval semantics).
fn draw_gate(cfg: &EncoderConfig, dp: &mut Option<&mut ChaCha20Rng>) -> f64 {
    match dp {
        Some(rng) if cfg.drop_path_rate > 0.0 => {
            use rand::Rng;
            let u: f64 = rng.random();
            if u < cfg.drop_path_rate {
                0.0
            } else {
                1.0 / (1.0 - cfg.drop_path_rate)
            }
        }
        _ => 1.0,
    }
}

/// Evaluation-path output.
#[derive(Clone, Debug)]
pub struct EncodeOut {
    /// Post-norm cls embedding (the default slide embedding).
    pub cls: Vec<f64>,
    /// Pre-norm cls state, exposed for the raw-cls alternative.
    pub cls_prenorm: Vec<f64>,
    /// Post-norm token matrix, (n+1) x embed_dim, cls at row 0.
    pub tokens: Tensor,
}

/// Deterministic evaluation forward (no tape, no drop-path). Attention is
/// streamed over query-row chunks so whole grids fit in memory.
pub fn encode(params: &ParamSet, cfg: &EncoderConfig, input: &TokenInput) -> Result<EncodeOut> {
    cfg.validate()?;
    if input.dim != cfg.input_dim {
        return Err(shape_err!("input dim {} vs config {}", input.dim, cfg.input_dim));
    }
    let e = cfg.embed_dim();
    let n = input.n;
    let rows = n + 1;
    let coords = input.coords_with_cls();
    let active = input.active_with_cls();
    let slopes: Vec<f64> = match cfg.pos {
        PosScheme::Alibi => head_slopes(cfg.heads)
            .iter()
            .map(|m| m * cfg.alibi_slope_scale)
            .collect(),
        _ => vec![0.0; cfg.heads],
    };

    let get = |p: &ParamSet, name: &str| -> Result<Tensor> { Ok(p.expect(name)?.clone()) };

    // input MLP
    let w1 = get(params, "enc.in.w1")?;
    let b1 = get(params, "enc.in.b1")?;
    let w2 = get(params, "enc.in.w2")?;
    let b2 = get(params, "enc.in.b2")?;
    let mut h = vec![0.0; n * e];
    kernels::matmul(&input.feats, w1.data(), &mut h, n, input.dim, e);
    add_row_inplace(&mut h, b1.data(), n, e);
    h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
    let mut tokens = vec![0.0; n * e];
    kernels::matmul(&h, w2.data(), &mut tokens, n, e, e);
    add_row_inplace(&mut tokens, b2.data(), n, e);

    let mut x = vec![0.0; rows * e];
    x[..e].copy_from_slice(params.expect("enc.cls")?.data());
    x[e..].copy_from_slice(&tokens);
    drop(tokens);

    if cfg.pos == PosScheme::Absolute {
        let table = params.expect("enc.pos")?;
        for (i, id) in abs_pos_ids(cfg, &coords).iter().enumerate() {
            for d in 0..e {
                x[i * e + d] += table.data()[id * e + d];
            }
        }
    }
    let rot = if cfg.pos == PosScheme::Rotary {
        Some(rotary_tables(cfg, &coords))
    } else {
        None
    };

    let scale = 1.0 / fm::sqrt(cfg.head_dim as f64);
    let dh = cfg.head_dim;
    const CHUNK: usize = 256;

    let mut hn = vec![0.0; rows * e];
    let mut q = vec![0.0; rows * e];
    let mut k = vec![0.0; rows * e];
    let mut v = vec![0.0; rows * e];
    let mut ctx = vec![0.0; rows * e];
    let mut o = vec![0.0; rows * e];
    let mut mlp_h = vec![0.0; rows * cfg.mlp_hidden];

    for l in 0..cfg.layers {
        let b = alloc::format!("enc.blk{l}");
        let ln1w = get(params, &alloc::format!("{b}.ln1.w"))?;
        let ln1b = get(params, &alloc::format!("{b}.ln1.b"))?;
        kernels::layer_norm(&x, ln1w.data(), ln1b.data(), cfg.ln_eps, rows, e, &mut hn);

        for (name, out) in [("wq", &mut q), ("wk", &mut k), ("wv", &mut v)] {
            let w = get(params, &alloc::format!("{b}.attn.{name}"))?;
            let bias = get(params, &alloc::format!("{b}.attn.b{}", &name[1..]))?;
            out.iter_mut().for_each(|z| *z = 0.0);
            kernels::matmul(&hn, w.data(), out, rows, e, e);
            add_row_inplace(out, bias.data(), rows, e);
        }
        if let Some((cos, sin)) = &rot {
            for hd in 0..cfg.heads {
                rotate_head_inplace(&mut q, cos, sin, rows, e, hd * dh, dh);
                rotate_head_inplace(&mut k, cos, sin, rows, e, hd * dh, dh);
            }
        }

        ctx.iter_mut().for_each(|z| *z = 0.0);
        let mut scores = vec![0.0; CHUNK.min(rows) * rows];
        for hd in 0..cfg.heads {
            let off = hd * dh;
            let slope = slopes[hd];
            let mut start = 0;
            while start < rows {
                let len = CHUNK.min(rows - start);
                let sc = &mut scores[..len * rows];
                for (bi, i) in (start..start + len).enumerate() {
                    for j in 0..rows {
                        let mut dot = 0.0;
                        for d in 0..dh {
                            dot += q[i * e + off + d] * k[j * e + off + d];
                        }
                        sc[bi * rows + j] =
                            bias_entry(&coords, &active, slope, i, j) + scale * dot;
                    }
                }
                kernels::softmax_rows(sc, &mut vec![0.0; 0][..].to_vec(), 0, 0).ok();
                let mut probs = vec![0.0; len * rows];
                kernels::softmax_rows(sc, &mut probs, len, rows)?;
                for (bi, i) in (start..start + len).enumerate() {
                    if !active[i] {
                        continue; // background query: attention output stays zero
                    }
                    for j in 0..rows {
                        let p = probs[bi * rows + j];
                        if p == 0.0 {
                            continue;
                        }
                        for d in 0..dh {
                            ctx[i * e + off + d] += p * v[j * e + off + d];
                        }
                    }
                }
                start += len;
            }
        }

        let wo = get(params, &alloc::format!("{b}.attn.wo"))?;
        let bo = get(params, &alloc::format!("{b}.attn.bo"))?;
        o.iter_mut().for_each(|z| *z = 0.0);
        kernels::matmul(&ctx, wo.data(), &mut o, rows, e, e);
        add_row_inplace(&mut o, bo.data(), rows, e);
        for (xi, oi) in x.iter_mut().zip(o.iter()) {
            *xi += oi;
        }

        let ln2w = get(params, &alloc::format!("{b}.ln2.w"))?;
        let ln2b = get(params, &alloc::format!("{b}.ln2.b"))?;
        kernels::layer_norm(&x, ln2w.data(), ln2b.data(), cfg.ln_eps, rows, e, &mut hn);
        let w1 = get(params, &alloc::format!("{b}.mlp.w1"))?;
        let b1 = get(params, &alloc::format!("{b}.mlp.b1"))?;
        let w2 = get(params, &alloc::format!("{b}.mlp.w2"))?;
        let b2 = get(params, &alloc::format!("{b}.mlp.b2"))?;
        mlp_h.iter_mut().for_each(|z| *z = 0.0);
        kernels::matmul(&hn, w1.data(), &mut mlp_h, rows, e, cfg.mlp_hidden);
        add_row_inplace(&mut mlp_h, b1.data(), rows, cfg.mlp_hidden);
        mlp_h.iter_mut().for_each(|z| *z = kernels::gelu(*z));
        o.iter_mut().for_each(|z| *z = 0.0);
        kernels::matmul(&mlp_h, w2.data(), &mut o, rows, cfg.mlp_hidden, e);
        add_row_inplace(&mut o, b2.data(), rows, e);
        for (xi, oi) in x.iter_mut().zip(o.iter()) {
            *xi += oi;
        }
    }

    let cls_prenorm = x[..e].to_vec();
    let nw = get(params, "enc.norm.w")?;
    let nb = get(params, "enc.norm.b")?;
    let mut y = vec![0.0; rows * e];
    kernels::layer_norm(&x, nw.data(), nb.data(), cfg.ln_eps, rows, e, &mut y);
    let cls = y[..e].to_vec();
    Ok(EncodeOut {
        cls,
        cls_prenorm,
        tokens: Tensor::from_vec(&[rows, e], y)?,
    })
}

fn add_row_inplace(x: &mut [f64], b: &[f64], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            x[i * cols + j] += b[j];
        }
    }
}

fn rotate_head_inplace(
    x: &mut [f64],
    cos: &[f64],
    sin: &[f64],
    rows: usize,
    e: usize,
    off: usize,
    dh: usize,
) {
    for i in 0..rows {
        for p in 0..dh / 2 {
            let a = i * e + off + 2 * p;
            let t = i * dh + 2 * p;
            let (c, s) = (cos[t], sin[t]);
            let (x0, x1) = (x[a], x[a + 1]);
            x[a] = x0 * c - x1 * s;
            x[a + 1] = x0 * s + x1 * c;
        }
    }
}

/// Standalone single-head attention with distance bias and key masking, the
/// reference operation for the encoder's attention contract.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    coords: &[Coord],
    slope: f64,
    attn_mask: &[bool],
) -> Result<Tensor> {
    let (nq, d) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, dv) = v.dims2()?;
    if d != dk || nk != nv {
        return Err(shape_err!("attention q {nq}x{d} k {nk}x{dk} v {nv}x{dv}"));
    }
    if coords.len() != nk || attn_mask.len() != nk {
        return Err(shape_err!("attention coords/mask length"));
    }
    let coords_q: Vec<Coord> = coords.to_vec();
    let scale = 1.0 / fm::sqrt(d as f64);
    let mut scores = vec![0.0; nq * nk];
    kernels::matmul_a_bt(q.data(), k.data(), &mut scores, nq, d, nk);
    for i in 0..nq {
        for j in 0..nk {
            let cell = &mut scores[i * nk + j];
            *cell *= scale;
            if !attn_mask[j] {
                *cell = f64::NEG_INFINITY;
            } else if i < coords_q.len() {
                if let Some(dist) = coord_distance(coords_q[i], coords[j]) {
                    *cell -= slope * dist;
                }
            }
        }
    }
    let mut probs = vec![0.0; nq * nk];
    kernels::softmax_rows(&scores, &mut probs, nq, nk).map_err(|_| {
        Error::Numerical(String::from("attention row with every key masked"))
    })?;
    let mut out = vec![0.0; nq * dv];
    kernels::matmul(&probs, v.data(), &mut out, nq, nk, dv);
    Tensor::from_vec(&[nq, dv], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            heads: 2,
            head_dim: 4,
            mlp_hidden: 16,
            input_dim: 5,
            drop_path_rate: 0.0,
            ..EncoderConfig::default()
        }
    }

    fn random_input(n_side: usize, dim: usize, seed: u64) -> TokenInput {
        let s = Streams::new(seed);
        let mut rng = s.stream("inp");
        let n = n_side * n_side;
        let feats = crate::rng::normal_vec(&mut rng, n * dim, 1.0);
        let mut coords = Vec::new();
        let mut active = Vec::new();
        for r in 0..n_side {
            for c in 0..n_side {
                coords.push((c as f64, r as f64));
                active.push(true);
            }
        }
        TokenInput {
            n,
            dim,
            feats,
            coords,
            active,
        }
    }

    #[test]
    fn head_slopes_geometric() {
        let s8 = head_slopes(8);
        for (i, &m) in s8.iter().enumerate() {
            assert!((m - fm::pow(2.0, -(i as f64 + 1.0))).abs() < 1e-15);
        }
        assert_eq!(head_slopes(1), alloc::vec![fm::pow(2.0, -8.0)]);
        let s12 = head_slopes(12);
        assert!((s12[0] - 0.6299605249474366).abs() < 1e-12);
    }

    #[test]
    fn alibi_bias_cases() {
        let a = [Coord::Cell(0.0, 0.0), Coord::Cell(3.0, 4.0)];
        let b = alibi_bias(&a, &a, 0.5);
        assert_eq!(b.at2(0, 0), 0.0);
        assert!((b.at2(0, 1) + 2.5).abs() < 1e-12);

        // full 2x2 grid, slope 1, row-major
        let g = [
            Coord::Cell(0.0, 0.0),
            Coord::Cell(1.0, 0.0),
            Coord::Cell(0.0, 1.0),
            Coord::Cell(1.0, 1.0),
        ];
        let bg = alibi_bias(&g, &g, 1.0);
        let row0: Vec<f64> = (1..4).map(|j| bg.at2(0, j)).collect();
        let mut sorted = row0.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((sorted[0] + fm::sqrt(2.0)).abs() < 1e-12);
        assert!((sorted[1] + 1.0).abs() < 1e-12);
        assert!((sorted[2] + 1.0).abs() < 1e-12);

        // cls row/col zero
        let with_cls = [Coord::Cls, Coord::Cell(5.0, 5.0)];
        let bc = alibi_bias(&with_cls, &with_cls, 2.0);
        assert_eq!(bc.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn attention_singleton_and_plain_oracle() {
        let s = Streams::new(31);
        let mut rng = s.stream("attn");
        let v1 = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let out = attention(
            &Tensor::randn(&[1, 4], 1.0, &mut rng),
            &Tensor::randn(&[1, 4], 1.0, &mut rng),
            &v1,
            &[Coord::Cell(0.0, 0.0)],
            1.0,
            &[true],
        )
        .unwrap();
        for (a, b) in out.data().iter().zip(v1.data()) {
            assert!((a - b).abs() < 1e-15);
        }

        // slope 0, identical coords: plain scaled dot-product attention
        let n = 6;
        let q = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let coords = alloc::vec![Coord::Cell(1.0, 1.0); n];
        let got = attention(&q, &k, &v, &coords, 0.0, &alloc::vec![true; n]).unwrap();
        let kt = k.transpose().unwrap();
        let want = q
            .matmul(&kt)
            .unwrap()
            .scale(0.5)
            .softmax_rows()
            .unwrap()
            .matmul(&v)
            .unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_huge_slope_attends_self() {
        let s = Streams::new(33);
        let mut rng = s.stream("attn");
        let n = 5;
        let q = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let coords: Vec<Coord> = (0..n).map(|i| Coord::Cell(i as f64 * 3.0, 0.0)).collect();
        let out = attention(&q, &k, &v, &coords, 1e4, &alloc::vec![true; n]).unwrap();
        for i in 0..n {
            for d in 0..4 {
                assert!((out.at2(i, d) - v.at2(i, d)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rejects_fully_masked() {
        let q = Tensor::zeros(&[1, 2]);
        let res = attention(
            &q,
            &Tensor::zeros(&[1, 2]),
            &Tensor::zeros(&[1, 2]),
            &[Coord::Cell(0.0, 0.0)],
            0.0,
            &[false],
        );
        assert!(res.is_err());
    }

    #[test]
    fn encode_shapes_and_size_agnostic() {
        let cfg = tiny_cfg();
        let s = Streams::new(41);
        let mut rng = s.stream("init");
        let params = init_params(&cfg, &mut rng).unwrap();
        for side in [3usize, 6, 14, 16] {
            let input = random_input(side, 5, side as u64);
            let out = encode(&params, &cfg, &input).unwrap();
            assert_eq!(out.cls.len(), cfg.embed_dim());
            assert_eq!(out.tokens.shape(), &[side * side + 1, cfg.embed_dim()]);
        }
    }

    #[test]
    fn graph_and_eval_forward_agree() {
        let cfg = tiny_cfg();
        let s = Streams::new(43);
        let mut rng = s.stream("init");
        let params = init_params(&cfg, &mut rng).unwrap();
        let input = random_input(4, 5, 99);

        let evaled = encode(&params, &cfg, &input).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let tokens = encode_graph(&mut g, &mut binder, &params, &cfg, &input, &[], None).unwrap();
        for (a, b) in g.value(tokens).iter().zip(evaled.tokens.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn background_tokens_do_not_influence_cls() {
        // same tissue, one input padded with extra background tokens
        let cfg = tiny_cfg();
        let s = Streams::new(47);
        let mut rng = s.stream("init");
        let params = init_params(&cfg, &mut rng).unwrap();

        let base = random_input(3, 5, 7);
        let mut padded = base.clone();
        padded.n += 2;
        padded.feats.extend(crate::rng::normal_vec(&mut rng, 10, 1.0));
        padded.coords.push((90.0, 90.0));
        padded.coords.push((91.0, 90.0));
        padded.active.push(false);
        padded.active.push(false);

        let a = encode(&params, &cfg, &base).unwrap();
        let b = encode(&params, &cfg, &padded).unwrap();
        for (x, y) in a.cls.iter().zip(b.cls.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_invariance_of_cls() {
        let cfg = EncoderConfig {
            input_dim: 3,
            ..tiny_cfg()
        };
        let s = Streams::new(53);
        let mut rng = s.stream("init");
        let params = init_params(&cfg, &mut rng).unwrap();

        let mut grid = crate::grid::FeatureGrid::new(6, 6, 3, 512).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                if (r + c) % 7 != 0 {
                    let f: Vec<f32> = (0..3).map(|_| crate::rng::normal(&mut rng) as f32).collect();
                    grid.set_cell(r, c, &f).unwrap();
                }
            }
        }
        let mut crop_rng = s.stream("crop");
        let region = crate::grid::sample_region_crop(&grid, 16, &mut crop_rng).unwrap();
        let base = encode(&params, &cfg, &TokenInput::from_view(&region).unwrap()).unwrap();
        for &(fh, fv) in &[(true, false), (false, true), (true, true)] {
            let flipped = crate::grid::augment(
                &region,
                crate::grid::AugmentSpec {
                    flip_h: fh,
                    flip_v: fv,
                    posterize_bits: None,
                },
            )
            .unwrap();
            let out = encode(&params, &cfg, &TokenInput::from_view(&flipped).unwrap()).unwrap();
            for (a, b) in base.cls.iter().zip(out.cls.iter()) {
                assert!((a - b).abs() < 1e-9, "flip ({fh},{fv}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn permutation_invariance_of_cls() {
        let cfg = tiny_cfg();
        let s = Streams::new(59);
        let mut rng = s.stream("init");
        let params = init_params(&cfg, &mut rng).unwrap();
        let base = random_input(4, 5, 3);

        let mut order: Vec<usize> = (0..base.n).collect();
        let mut shuf = s.stream("perm");
        crate::rng::shuffle(&mut shuf, &mut order);
        let mut permuted = base.clone();
        for (new_i, &old_i) in order.iter().enumerate() {
            permuted.feats[new_i * 5..(new_i + 1) * 5]
                .copy_from_slice(&base.feats[old_i * 5..(old_i + 1) * 5]);
            permuted.coords[new_i] = base.coords[old_i];
            permuted.active[new_i] = base.active[old_i];
        }
        let a = encode(&params, &cfg, &base).unwrap();
        let b = encode(&params, &cfg, &permuted).unwrap();
        for (x, y) in a.cls.iter().zip(b.cls.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn slope_zero_matches_no_position_scheme() {
        let mut cfg = tiny_cfg();
        let s = Streams::new(61);
        let mut rng = s.stream("init");
        let params = init_params(&cfg, &mut rng).unwrap();
        let input = random_input(5, 5, 17);

        cfg.alibi_slope_scale = 0.0;
        let zeroed = encode(&params, &cfg, &input).unwrap();
        cfg.pos = PosScheme::None;
        let nopos = encode(&params, &cfg, &input).unwrap();
        for (a, b) in zeroed.cls.iter().zip(nopos.cls.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn alternative_position_schemes_forward() {
        for pos in [PosScheme::Absolute, PosScheme::Rotary, PosScheme::None] {
            let cfg = EncoderConfig {
                pos,
                ..tiny_cfg()
            };
            let s = Streams::new(67);
            let mut rng = s.stream("init");
            let params = init_params(&cfg, &mut rng).unwrap();
            let input = random_input(4, 5, 23);
            let out = encode(&params, &cfg, &input).unwrap();
            assert!(out.cls.iter().all(|v| v.is_finite()), "{pos:?}");

            let mut g = Graph::new();
            let mut binder = Binder::new();
            let tok = encode_graph(&mut g, &mut binder, &params, &cfg, &input, &[], None).unwrap();
            for (a, b) in g.value(tok).iter().zip(out.tokens.data()) {
                assert!((a - b).abs() < 1e-12, "{pos:?}");
            }
        }
    }

    #[test]
    fn droppath_gates_are_deterministic_per_seed() {
        let cfg = EncoderConfig {
            drop_path_rate: 0.5,
            ..tiny_cfg()
        };
        let s = Streams::new(71);
        let mut rng = s.stream("init");
        let params = init_params(&cfg, &mut rng).unwrap();
        let input = random_input(3, 5, 29);
        let run = || {
            let mut dp = s.stream("droppath");
            let mut g = Graph::new();
            let mut binder = Binder::new();
            let tok =
                encode_graph(&mut g, &mut binder, &params, &cfg, &input, &[], Some(&mut dp))
                    .unwrap();
            g.value(tok).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mask_substitution_replaces_projected_tokens() {
        let cfg = tiny_cfg();
        let s = Streams::new(73);
        let mut rng = s.stream("init");
        let params = init_params(&cfg, &mut rng).unwrap();
        let input = random_input(3, 5, 31);

        // masking all tokens makes every non-cls row's input the mask token,
        // so two different inputs must produce identical outputs
        let all: Vec<usize> = (0..input.n).collect();
        let other = random_input(3, 5, 32);
        let fwd = |inp: &TokenInput| {
            let mut g = Graph::new();
            let mut binder = Binder::new();
            let tok = encode_graph(&mut g, &mut binder, &params, &cfg, inp, &all, None).unwrap();
            g.value(tok).to_vec()
        };
        assert_eq!(fwd(&input), fwd(&other));
    }
}
