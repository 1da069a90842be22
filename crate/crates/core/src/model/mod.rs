//! Manifold-aware transformer encoder.
//!
//! Tokens (one per garment face) are embedded linearly and passed through
//! pre-norm encoder layers. In every layer the first `n_conn` attention heads
//! use the fixed [`AttentionBias`] in place of learned query-key scores; their
//! value and output projections remain learned. A final layer norm feeds two
//! heads: a per-face linear map to 12 outputs (Ψ as `I + raw`, then Σ through
//! a softplus shifted so a zero input gives exactly 1) and a linear map from
//! the mean-pooled token embedding to the global velocity `q`, expressed in
//! units of the root-mean-square newest input velocity.
//!
//! Gradients are computed by hand: [`Session::forward`] records the
//! activations each layer needs and [`Session::backward`] replays them in
//! reverse.

pub mod attention;
pub mod checkpoint;
pub mod layers;

use ndarray::{s, Array2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{token_dim, NormStats, STD_FLOOR};
use crate::geometry::{unflatten_row_major, Mat3, Vec3};
use layers::*;

pub use attention::{geodesic_attention, geodesic_attention_scaled, split_faces, AttentionBias};

/// `softplus(SIGMA_OFFSET) == 1`
pub const SIGMA_OFFSET: f64 = 0.541_324_854_612_918_1; // ln(e − 1)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_hist: usize,
    pub n_layers: usize,
    pub n_embed: usize,
    pub n_ff: usize,
    pub n_heads: usize,
    pub n_conn: usize,
    pub p_drop: f64,
    pub p_geo: f64,
    /// Divisor applied to geodesic distances (meters) before the power.
    pub geo_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_hist: 10,
            n_layers: 8,
            n_embed: 512,
            n_ff: 512,
            n_heads: 8,
            n_conn: 2,
            p_drop: 0.1,
            p_geo: 20.0,
            geo_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_hist < 2 {
            return bad(format!("n_hist must be at least 2, got {}", self.n_hist));
        }
        if self.n_heads == 0 || self.n_embed % self.n_heads != 0 {
            return bad(format!(
                "n_embed ({}) must be a positive multiple of n_heads ({})",
                self.n_embed, self.n_heads
            ));
        }
        if self.n_conn > self.n_heads {
            return bad(format!("n_conn ({}) exceeds n_heads ({})", self.n_conn, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return bad(format!("p_drop must lie in [0, 1), got {}", self.p_drop));
        }
        if !(self.p_geo > 0.0) || !(self.geo_scale > 0.0) {
            return bad("p_geo and geo_scale must be positive".into());
        }
        if self.n_layers == 0 || self.n_ff == 0 {
            return bad("n_layers and n_ff must be positive".into());
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        token_dim(self.n_hist)
    }

    pub fn head_dim(&self) -> usize {
        self.n_embed / self.n_heads
    }

    /// Width of the learned query/key projections.
    pub fn learned_dim(&self) -> usize {
        (self.n_heads - self.n_conn) * self.head_dim()
    }

    /// Scalar parameter count implied by the hyperparameters.
    pub fn parameter_count(&self) -> usize {
        let (t, e, f, l) = (self.token_dim(), self.n_embed, self.n_ff, self.learned_dim());
        let per_layer = 4 * e // two layer norms
            + 2 * (e * l + l) // query, key
            + 2 * (e * e + e) // value, output
            + (e * f + f)
            + (f * e + e);
        (t * e + e) + self.n_layers * per_layer + 2 * e + (e * 12 + 12) + (e * 3 + 3)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIndex {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    layers: Vec<LayerIndex>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
    vel_w: usize,
    vel_b: usize,
}

/// Named parameter tensors, all stored as matrices (biases and gains are `1 × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
}

impl Params {
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect()
    }
}

enum Init {
    FanIn,
    Zeros,
    Ones,
}

fn build_layout<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> (Layout, Params) {
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    let mut add = |name: String, rows: usize, cols: usize, init: Init, rng: &mut R| -> usize {
        let t = match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::FanIn => {
                let bound = 1.0 / (rows as f64).sqrt();
                Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
            }
        };
        names.push(name);
        tensors.push(t);
        tensors.len() - 1
    };
    let (t, e, f, l) = (config.token_dim(), config.n_embed, config.n_ff, config.learned_dim());
    let embed_w = add("embed.weight".into(), t, e, Init::FanIn, rng);
    let embed_b = add("embed.bias".into(), 1, e, Init::Zeros, rng);
    let mut layer_idx = Vec::new();
    for k in 0..config.n_layers {
        let p = |s: &str| format!("layer{k}.{s}");
        layer_idx.push(LayerIndex {
            ln1_g: add(p("ln1.gain"), 1, e, Init::Ones, rng),
            ln1_b: add(p("ln1.bias"), 1, e, Init::Zeros, rng),
            wq: add(p("attn.query.weight"), e, l, Init::FanIn, rng),
            bq: add(p("attn.query.bias"), 1, l, Init::Zeros, rng),
            wk: add(p("attn.key.weight"), e, l, Init::FanIn, rng),
            bk: add(p("attn.key.bias"), 1, l, Init::Zeros, rng),
            wv: add(p("attn.value.weight"), e, e, Init::FanIn, rng),
            bv: add(p("attn.value.bias"), 1, e, Init::Zeros, rng),
            wo: add(p("attn.out.weight"), e, e, Init::FanIn, rng),
            bo: add(p("attn.out.bias"), 1, e, Init::Zeros, rng),
            ln2_g: add(p("ln2.gain"), 1, e, Init::Ones, rng),
            ln2_b: add(p("ln2.bias"), 1, e, Init::Zeros, rng),
            w1: add(p("ff.in.weight"), e, f, Init::FanIn, rng),
            b1: add(p("ff.in.bias"), 1, f, Init::Zeros, rng),
            w2: add(p("ff.out.weight"), f, e, Init::FanIn, rng),
            b2: add(p("ff.out.bias"), 1, e, Init::Zeros, rng),
        });
    }
    let lnf_g = add("final_ln.gain".into(), 1, e, Init::Ones, rng);
    let lnf_b = add("final_ln.bias".into(), 1, e, Init::Zeros, rng);
    let head_w = add("head.weight".into(), e, 12, Init::FanIn, rng);
    let head_b = add("head.bias".into(), 1, 12, Init::Zeros, rng);
    let vel_w = add("velocity.weight".into(), e, 3, Init::FanIn, rng);
    let vel_b = add("velocity.bias".into(), 1, 3, Init::Zeros, rng);
    (
        Layout {
            embed_w,
            embed_b,
            layers: layer_idx,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            vel_w,
            vel_b,
        },
        Params { names, tensors },
    )
}

/// Per-face and global predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    /// `faces × 9`, row-major Ψ.
    pub psi: Array2<f64>,
    /// `faces × 3`, positive, in head order (not sorted).
    pub sigma: Array2<f64>,
    pub q: Vec3,
}

impl NetworkOutput {
    pub fn psi_matrices(&self) -> Vec<Mat3> {
        self.psi
            .rows()
            .into_iter()
            .map(|r| unflatten_row_major(r.as_slice().expect("contiguous row")))
            .collect()
    }

    /// Σ per face, sorted descending.
    pub fn sigma_sorted(&self) -> Vec<Vec3> {
        self.sigma
            .rows()
            .into_iter()
            .map(|r| {
                let mut v = [r[0], r[1], r[2]];
                v.sort_by(|a, b| b.total_cmp(a));
                Vec3::from(v)
            })
            .collect()
    }
}

/// Loss gradients with respect to the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub psi: Array2<f64>,
    pub sigma: Array2<f64>,
    pub q: Vec3,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LayerNormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax probabilities of each learned head.
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln2: LayerNormCache,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    drop_hidden: Option<Array2<f64>>,
    drop_ff: Option<Array2<f64>>,
}

/// Activations recorded by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Array2<f64>,
    bias: Array2<f64>,
    layers: Vec<LayerCache>,
    lnf: LayerNormCache,
    hf: Array2<f64>,
    pooled: Array2<f64>,
    raw: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: Params,
    stats: NormStats,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, stats: NormStats, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if stats.dim() != config.token_dim() {
            return Err(Error::Dimension(format!(
                "normalization statistics cover {} dims, tokens have {}",
                stats.dim(),
                config.token_dim()
            )));
        }
        let (layout, params) = build_layout(&config, rng);
        Ok(Model {
            config,
            layout,
            params,
            stats,
        })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: Params, stats: NormStats) -> Result<Self> {
        let template = Model::new(config.clone(), stats, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        if template.params.names != params.names {
            return Err(Error::Format("parameter names do not match the configuration".into()));
        }
        for (name, (a, b)) in params
            .names
            .iter()
            .zip(template.params.tensors.iter().zip(&params.tensors))
        {
            if a.dim() != b.dim() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    b.dim(),
                    a.dim()
                )));
            }
        }
        Ok(Model { params, ..template })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: NormStats) -> Result<()> {
        if stats.dim() != self.config.token_dim() {
            return Err(Error::Dimension("normalization statistics width".into()));
        }
        self.stats = stats;
        Ok(())
    }

    /// Zeroes both output heads: Ψ = I, Σ = (1, 1, 1), q = 0 for every input.
    pub fn zero_output_heads(&mut self) {
        for idx in [self.layout.head_w, self.layout.head_b, self.layout.vel_w, self.layout.vel_b] {
            self.params.tensors[idx].fill(0.0);
        }
    }

    /// Root-mean-square size of the newest global velocity under the token
    /// statistics, shared by the three axes.
    fn velocity_scale(&self) -> f64 {
        let d = self.stats.std.len();
        let ms = (d - 3..d)
            .map(|k| self.stats.mean[k].powi(2) + self.stats.std[k].powi(2))
            .sum::<f64>()
            / 3.0;
        ms.sqrt().max(STD_FLOOR)
    }

    /// Inference forward pass on normalized tokens.
    pub fn forward(&self, tokens: &Array2<f64>, bias: &AttentionBias) -> Result<NetworkOutput> {
        self.run(tokens, bias, None, false).map(|(out, _)| out)
    }

    fn check_inputs(&self, tokens: &Array2<f64>, bias: &AttentionBias) -> Result<()> {
        if tokens.ncols() != self.config.token_dim() {
            return Err(Error::Dimension(format!(
                "tokens have {} features, model expects {}",
                tokens.ncols(),
                self.config.token_dim()
            )));
        }
        if tokens.nrows() == 0 {
            return Err(Error::InvalidArgument("no tokens".into()));
        }
        if bias.len() != tokens.nrows() {
            return Err(Error::Dimension(format!(
                "attention bias covers {} faces, got {} tokens",
                bias.len(),
                tokens.nrows()
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        tokens: &Array2<f64>,
        bias: &AttentionBias,
        mut dropout: Option<&mut dyn RngCore>,
        keep: bool,
    ) -> Result<(NetworkOutput, Option<ForwardCache>)> {
        self.check_inputs(tokens, bias)?;
        let cfg = &self.config;
        let p = &self.params.tensors;
        let lay = &self.layout;
        let n = tokens.nrows();
        let (heads, conn, dh) = (cfg.n_heads, cfg.n_conn, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let rate = cfg.p_drop;

        let finite = |x: &Array2<f64>, what: &str| -> Result<()> {
            if x.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(Error::NonFiniteActivation(what.to_string()))
            }
        };

        let mut h = linear(&tokens.view(), &p[lay.embed_w], &p[lay.embed_b]);
        finite(&h, "embedding")?;
        let mut layer_caches = Vec::new();
        for (li, idx) in lay.layers.iter().enumerate() {
            let (a, ln1) = layer_norm(&h.view(), &p[idx.ln1_g], &p[idx.ln1_b]);
            let q = linear(&a.view(), &p[idx.wq], &p[idx.bq]);
            let k = linear(&a.view(), &p[idx.wk], &p[idx.bk]);
            let v = linear(&a.view(), &p[idx.wv], &p[idx.bv]);
            let mut o = Array2::zeros((n, cfg.n_embed));
            let mut probs = Vec::new();
            for hd in 0..heads {
                let vs = v.slice(s![.., hd * dh..(hd + 1) * dh]);
                if hd < conn {
                    o.slice_mut(s![.., hd * dh..(hd + 1) * dh]).assign(&bias.weights().dot(&vs));
                } else {
                    let j = hd - conn;
                    let qs = q.slice(s![.., j * dh..(j + 1) * dh]);
                    let ks = k.slice(s![.., j * dh..(j + 1) * dh]);
                    let mut scores = qs.dot(&ks.t()) * scale;
                    softmax_rows(&mut scores);
                    o.slice_mut(s![.., hd * dh..(hd + 1) * dh]).assign(&scores.dot(&vs));
                    if keep {
                        probs.push(scores);
                    }
                }
            }
            let mut attn = linear(&o.view(), &p[idx.wo], &p[idx.bo]);
            let drop_attn = match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let m = dropout_mask(n, cfg.n_embed, rate, rng);
                    attn *= &m;
                    Some(m)
                }
                _ => None,
            };
            h += &attn;
            finite(&h, &format!("layer {li} attention"))?;

            let (b, ln2) = layer_norm(&h.view(), &p[idx.ln2_g], &p[idx.ln2_b]);
            let u = linear(&b.view(), &p[idx.w1], &p[idx.b1]);
            let mut g = u.mapv(gelu);
            let drop_hidden = match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let m = dropout_mask(n, cfg.n_ff, rate, rng);
                    g *= &m;
                    Some(m)
                }
                _ => None,
            };
            let mut ff = linear(&g.view(), &p[idx.w2], &p[idx.b2]);
            let drop_ff = match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let m = dropout_mask(n, cfg.n_embed, rate, rng);
                    ff *= &m;
                    Some(m)
                }
                _ => None,
            };
            h += &ff;
            finite(&h, &format!("layer {li} feed-forward"))?;
            if keep {
                layer_caches.push(LayerCache {
                    ln1,
                    a,
                    q,
                    k,
                    v,
                    probs,
                    o,
                    drop_attn,
                    ln2,
                    b,
                    u,
                    g,
                    drop_hidden,
                    drop_ff,
                });
            }
        }
        let (hf, lnf) = layer_norm(&h.view(), &p[lay.lnf_g], &p[lay.lnf_b]);
        let raw = linear(&hf.view(), &p[lay.head_w], &p[lay.head_b]);
        let pooled = hf.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let qv = linear(&pooled.view(), &p[lay.vel_w], &p[lay.vel_b]);
        finite(&raw, "output head")?;
        finite(&qv, "velocity head")?;

        let mut psi = raw.slice(s![.., 0..9]).to_owned();
        for d in [0, 4, 8] {
            psi.column_mut(d).mapv_inplace(|v| v + 1.0);
        }
        let sigma = raw.slice(s![.., 9..12]).mapv(|v| softplus(v + SIGMA_OFFSET));
        let out = NetworkOutput {
            psi,
            sigma,
            q: Vec3::new(qv[(0, 0)], qv[(0, 1)], qv[(0, 2)]) * self.velocity_scale(),
        };
        let cache = keep.then(|| ForwardCache {
            tokens: tokens.clone(),
            bias: bias.weights().clone(),
            layers: layer_caches,
            lnf,
            hf,
            pooled,
            raw,
        });
        Ok((out, cache))
    }

    fn backward_impl(&self, cache: &ForwardCache, grad: &OutputGrad) -> Result<Vec<Array2<f64>>> {
        let cfg = &self.config;
        let p = &self.params.tensors;
        let lay = &self.layout;
        let n = cache.tokens.nrows();
        if grad.psi.dim() != (n, 9) || grad.sigma.dim() != (n, 3) {
            return Err(Error::Dimension("output gradient shape".into()));
        }
        let (heads, conn, hd_dim) = (cfg.n_heads, cfg.n_conn, cfg.head_dim());
        let scale = 1.0 / (hd_dim as f64).sqrt();
        let mut grads = self.params.zeros_like();

        let mut draw = Array2::zeros((n, 12));
        draw.slice_mut(s![.., 0..9]).assign(&grad.psi);
        for i in 0..n {
            for c in 0..3 {
                draw[(i, 9 + c)] = grad.sigma[(i, c)] * sigmoid(cache.raw[(i, 9 + c)] + SIGMA_OFFSET);
            }
        }
        let (gw, gb) = pair_mut(&mut grads, lay.head_w, lay.head_b);
        let mut dhf = linear_backward(&cache.hf.view(), &p[lay.head_w], &draw.view(), gw, gb);
        let vs = self.velocity_scale();
        let dq = Array2::from_shape_fn((1, 3), |(_, a)| grad.q[a] * vs);
        let (gw, gb) = pair_mut(&mut grads, lay.vel_w, lay.vel_b);
        let dpooled = linear_backward(&cache.pooled.view(), &p[lay.vel_w], &dq.view(), gw, gb);
        dhf += &(dpooled.row(0).to_owned() / n as f64);

        let (gg, gb) = pair_mut(&mut grads, lay.lnf_g, lay.lnf_b);
        let mut dh = layer_norm_backward(&cache.lnf, &p[lay.lnf_g], &dhf.view(), gg, gb);

        for (idx, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // feed-forward branch
            let mut dff = dh.clone();
            if let Some(m) = &lc.drop_ff {
                dff *= m;
            }
            let (gw, gb) = pair_mut(&mut grads, idx.w2, idx.b2);
            let mut dg = linear_backward(&lc.g.view(), &p[idx.w2], &dff.view(), gw, gb);
            if let Some(m) = &lc.drop_hidden {
                dg *= m;
            }
            ndarray::Zip::from(&mut dg).and(&lc.u).for_each(|d, &u| *d *= gelu_grad(u));
            let (gw, gb) = pair_mut(&mut grads, idx.w1, idx.b1);
            let db = linear_backward(&lc.b.view(), &p[idx.w1], &dg.view(), gw, gb);
            let (gg, gb) = pair_mut(&mut grads, idx.ln2_g, idx.ln2_b);
            dh += &layer_norm_backward(&lc.ln2, &p[idx.ln2_g], &db.view(), gg, gb);

            // attention branch
            let mut dattn = dh.clone();
            if let Some(m) = &lc.drop_attn {
                dattn *= m;
            }
            let (gw, gb) = pair_mut(&mut grads, idx.wo, idx.bo);
            let d_o = linear_backward(&lc.o.view(), &p[idx.wo], &dattn.view(), gw, gb);
            let mut dq = Array2::zeros(lc.q.raw_dim());
            let mut dk = Array2::zeros(lc.k.raw_dim());
            let mut dv = Array2::zeros(lc.v.raw_dim());
            for hd in 0..heads {
                let dos = d_o.slice(s![.., hd * hd_dim..(hd + 1) * hd_dim]);
                if hd < conn {
                    dv.slice_mut(s![.., hd * hd_dim..(hd + 1) * hd_dim]).assign(&cache.bias.t().dot(&dos));
                } else {
                    let j = hd - conn;
                    let pr = &lc.probs[j];
                    let vs = lc.v.slice(s![.., hd * hd_dim..(hd + 1) * hd_dim]);
                    dv.slice_mut(s![.., hd * hd_dim..(hd + 1) * hd_dim]).assign(&pr.t().dot(&dos));
                    let dp = dos.dot(&vs.t());
                    let ds = softmax_rows_backward(pr, &dp) * scale;
                    let qs = lc.q.slice(s![.., j * hd_dim..(j + 1) * hd_dim]);
                    let ks = lc.k.slice(s![.., j * hd_dim..(j + 1) * hd_dim]);
                    dq.slice_mut(s![.., j * hd_dim..(j + 1) * hd_dim]).assign(&ds.dot(&ks));
                    dk.slice_mut(s![.., j * hd_dim..(j + 1) * hd_dim]).assign(&ds.t().dot(&qs));
                }
            }
            let (gw, gb) = pair_mut(&mut grads, idx.wq, idx.bq);
            let mut da = linear_backward(&lc.a.view(), &p[idx.wq], &dq.view(), gw, gb);
            let (gw, gb) = pair_mut(&mut grads, idx.wk, idx.bk);
            da += &linear_backward(&lc.a.view(), &p[idx.wk], &dk.view(), gw, gb);
            let (gw, gb) = pair_mut(&mut grads, idx.wv, idx.bv);
            da += &linear_backward(&lc.a.view(), &p[idx.wv], &dv.view(), gw, gb);
            let (gg, gb) = pair_mut(&mut grads, idx.ln1_g, idx.ln1_b);
            dh += &layer_norm_backward(&lc.ln1, &p[idx.ln1_g], &da.view(), gg, gb);
        }

        let (gw, gb) = pair_mut(&mut grads, lay.embed_w, lay.embed_b);
        linear_backward(&cache.tokens.view(), &p[lay.embed_w], &dh.view(), gw, gb);
        Ok(grads)
    }
}

fn pair_mut(v: &mut [Array2<f64>], a: usize, b: usize) -> (&mut Array2<f64>, &mut Array2<f64>) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Holds the activations of one training forward pass until `backward`
/// consumes them.
#[derive(Debug, Default)]
pub struct Session {
    cache: Option<ForwardCache>,
}

impl Session {
    pub fn new() -> Self {
        Session::default()
    }

    /// Forward pass that records activations. Dropout is active when `dropout`
    /// is provided.
    pub fn forward(
        &mut self,
        model: &Model,
        tokens: &Array2<f64>,
        bias: &AttentionBias,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<NetworkOutput> {
        let (out, cache) = model.run(tokens, bias, dropout, true)?;
        self.cache = cache;
        Ok(out)
    }

    /// Parameter gradients for the recorded pass. Consumes the cache.
    pub fn backward(&mut self, model: &Model, grad: &OutputGrad) -> Result<Vec<Array2<f64>>> {
        let cache = self.cache.take().ok_or(Error::MissingCache)?;
        model.backward_impl(&cache, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_hist: 2,
            n_layers: 2,
            n_embed: 8,
            n_ff: 12,
            n_heads: 4,
            n_conn: 1,
            p_drop: 0.1,
            p_geo: 2.0,
            geo_scale: 1.0,
        }
    }

    fn tiny_model(seed: u64) -> Model {
        let cfg = tiny_config();
        let stats = NormStats::identity(cfg.token_dim());
        Model::new(cfg, stats, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_tokens(n: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, dim), || rng.random_range(-1.0..1.0))
    }

    fn random_bias(n: usize, seed: u64) -> AttentionBias {
        let mut w = random_tokens(n, n, seed).mapv(|v| v * 2.0);
        softmax_rows(&mut w);
        AttentionBias::from_weights(w).unwrap()
    }

    #[test]
    fn default_hyperparameters() {
        let c = ModelConfig::default();
        assert_eq!(
            (c.n_layers, c.n_embed, c.n_ff, c.n_heads, c.n_conn, c.n_hist),
            (8, 512, 512, 8, 2, 10)
        );
        assert_eq!(c.p_drop, 0.1);
        assert_eq!(c.p_geo, 20.0);
        assert_eq!(c.token_dim(), 367);
    }

    #[test]
    fn parameter_count_matches_tensors() {
        for cfg in [tiny_config(), ModelConfig { n_conn: 0, ..tiny_config() }, ModelConfig { n_conn: 4, ..tiny_config() }] {
            let stats = NormStats::identity(cfg.token_dim());
            let m = Model::new(cfg.clone(), stats, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(m.params().scalar_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn zero_heads_give_neutral_output() {
        let mut m = tiny_model(1);
        m.zero_output_heads();
        let t = random_tokens(5, m.config().token_dim(), 2);
        let out = m.forward(&t, &random_bias(5, 3)).unwrap();
        for row in out.psi.rows() {
            assert_eq!(row.to_vec(), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        }
        for v in out.sigma.iter() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        assert_eq!(out.q, Vec3::zeros());
    }

    #[test]
    fn permutation_equivariance() {
        let m = tiny_model(4);
        let n = 6;
        let t = random_tokens(n, m.config().token_dim(), 5);
        let bias = random_bias(n, 6);
        let perm = [3, 0, 5, 1, 4, 2];
        let tp = Array2::from_shape_fn(t.raw_dim(), |(i, j)| t[(perm[i], j)]);
        let a = m.forward(&t, &bias).unwrap();
        let b = m.forward(&tp, &bias.permuted(&perm)).unwrap();
        for i in 0..n {
            for c in 0..9 {
                assert!((b.psi[(i, c)] - a.psi[(perm[i], c)]).abs() < 1e-12);
            }
            for c in 0..3 {
                assert!((b.sigma[(i, c)] - a.sigma[(perm[i], c)]).abs() < 1e-12);
            }
        }
        assert!((a.q - b.q).norm() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let m = tiny_model(0);
        let t = random_tokens(4, m.config().token_dim() + 1, 0);
        assert!(matches!(m.forward(&t, &AttentionBias::uniform(4)), Err(Error::Dimension(_))));
        let t = random_tokens(4, m.config().token_dim(), 0);
        assert!(matches!(m.forward(&t, &AttentionBias::uniform(3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_without_forward_fails() {
        let m = tiny_model(0);
        let g = OutputGrad {
            psi: Array2::zeros((2, 9)),
            sigma: Array2::zeros((2, 3)),
            q: Vec3::zeros(),
        };
        assert!(matches!(Session::new().backward(&m, &g), Err(Error::MissingCache)));
    }

    #[test]
    fn nan_input_reports_layer() {
        let m = tiny_model(0);
        let mut t = random_tokens(3, m.config().token_dim(), 0);
        t[(1, 2)] = f64::NAN;
        let err = m.forward(&t, &AttentionBias::uniform(3)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteActivation(ref s) if s == "embedding"));
    }

    #[test]
    fn dropout_only_in_training() {
        let m = tiny_model(2);
        let t = random_tokens(4, m.config().token_dim(), 1);
        let bias = random_bias(4, 2);
        let a = m.forward(&t, &bias).unwrap();
        let b = Session::new().forward(&m, &t, &bias, None).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = Session::new().forward(&m, &t, &bias, Some(&mut rng)).unwrap();
        assert_ne!(a, c);
    }

    /// Weighted sum of all outputs; its gradient is the weights themselves.
    fn probe_loss(out: &NetworkOutput, w: &OutputGrad) -> f64 {
        (&out.psi * &w.psi).sum() + (&out.sigma * &w.sigma).sum() + out.q.dot(&w.q)
    }

    #[test]
    fn gradients_match_finite_differences_per_tensor() {
        let mut m = tiny_model(8);
        let n = 5;
        let t = random_tokens(n, m.config().token_dim(), 9);
        let bias = random_bias(n, 10);
        let w = OutputGrad {
            psi: random_tokens(n, 9, 11),
            sigma: random_tokens(n, 3, 12),
            q: Vec3::new(0.3, -0.7, 0.5),
        };
        let mut session = Session::new();
        session.forward(&m, &t, &bias, None).unwrap();
        let grads = session.backward(&m, &w).unwrap();
        let h = 1e-6;
        for ti in 0..m.params.tensors.len() {
            let len = m.params.tensors[ti].len();
            for e in (0..len).step_by(1 + len / 7) {
                let orig = m.params.tensors[ti].as_slice().unwrap()[e];
                m.params.tensors[ti].as_slice_mut().unwrap()[e] = orig + h;
                let lp = probe_loss(&m.forward(&t, &bias).unwrap(), &w);
                m.params.tensors[ti].as_slice_mut().unwrap()[e] = orig - h;
                let lm = probe_loss(&m.forward(&t, &bias).unwrap(), &w);
                m.params.tensors[ti].as_slice_mut().unwrap()[e] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[ti].as_slice().unwrap()[e];
                assert!((fd - an).abs() < 1e-8 + 1e-5 * fd.abs().max(an.abs()), "{}[{e}]: analytic {an} vs numeric {fd}", m.params.names[ti]);
            }
        }
    }

    #[test]
    fn doubling_loss_gradient_doubles_parameter_gradients() {
        let m = tiny_model(3);
        let t = random_tokens(4, m.config().token_dim(), 1);
        let bias = random_bias(4, 2);
        let w = OutputGrad {
            psi: random_tokens(4, 9, 3),
            sigma: random_tokens(4, 3, 4),
            q: Vec3::new(1.0, 2.0, 3.0),
        };
        let w2 = OutputGrad {
            psi: &w.psi * 2.0,
            sigma: &w.sigma * 2.0,
            q: w.q * 2.0,
        };
        let mut s = Session::new();
        s.forward(&m, &t, &bias, None).unwrap();
        let g1 = s.backward(&m, &w).unwrap();
        s.forward(&m, &t, &bias, None).unwrap();
        let g2 = s.backward(&m, &w2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}
