use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::config::{AttentionMode, ToyDiTConfig};
use super::linalg::{
    add_assign, add_bias, add_column_sums, add_matmul_at_b, gelu, gelu_grad, layer_norm, layer_norm_backward,
    matmul, matmul_a_bt,
};
use crate::attention::{
    attention_backward, block_sparse_attention_counted, dense_attention, AttentionInputs, FlopCount,
};
use crate::error::{bail, Result};
use crate::layout::{cached_permutation, gather_rows, Permutation};
use crate::masks::{join_masks, nabla_mask, nabla_mask_cost, sparsity, sta_mask, BlockMask, NablaParams};
use crate::tensor::Tensor;

const W_IN: usize = 0;
const B_IN: usize = 1;
const POS: usize = 2;
const T_EMB: usize = 3;
const LAYER_BASE: usize = 4;
const PER_LAYER: usize = 8;
const WQ: usize = 0;
const WK: usize = 1;
const WV: usize = 2;
const WO: usize = 3;
const W1: usize = 4;
const B1: usize = 5;
const W2: usize = 6;
const B2: usize = 7;

/// Attention bookkeeping accumulated over a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardStats {
    pub flops: FlopCount,
    /// True bits of the adaptive masks alone, before any STA union.
    pub nabla_popcount: u64,
    pub sta_popcount: u64,
    pub sparsity_sum: f64,
    pub masks: usize,
}

impl ForwardStats {
    pub fn mean_sparsity(&self) -> f64 {
        if self.masks == 0 {
            0.0
        } else {
            self.sparsity_sum / self.masks as f64
        }
    }

    pub(crate) fn merge(&mut self, o: &ForwardStats) {
        self.flops += o.flops;
        self.nabla_popcount += o.nabla_popcount;
        self.sta_popcount += o.sta_popcount;
        self.sparsity_sum += o.sparsity_sum;
        self.masks += o.masks;
    }
}

/// An attention mode together with its precomputed static mask.
#[derive(Debug, Clone)]
pub(crate) struct AttentionPlan {
    mode: AttentionMode,
    sta: Option<BlockMask>,
}

impl AttentionPlan {
    pub(crate) fn new(mode: AttentionMode, config: &ToyDiTConfig) -> Result<Self> {
        let sta = match mode.sta_window(config.grid)? {
            Some(w) => Some(sta_mask(&w)?),
            None => None,
        };
        Ok(Self { mode, sta })
    }
}

struct LayerCache {
    identity: bool,
    a: Vec<f32>,
    r1: Vec<f32>,
    inp: AttentionInputs,
    mask: Option<BlockMask>,
    merged: Vec<f32>,
    a2: Vec<f32>,
    r2: Vec<f32>,
    u: Vec<f32>,
    g: Vec<f32>,
}

struct Cache {
    xb: Vec<f32>,
    t: f32,
    layers: Vec<LayerCache>,
    af: Vec<f32>,
    rf: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDiT {
    config: ToyDiTConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Vec<f32>>,
    perm: Arc<Permutation>,
}

fn permutation_for(config: &ToyDiTConfig) -> Result<Arc<Permutation>> {
    if config.reorder {
        cached_permutation(&config.grid)
    } else {
        Ok(Arc::new(Permutation::identity(config.grid.seq_len())))
    }
}

pub(crate) fn param_layout(c: &ToyDiTConfig) -> Vec<(String, Vec<usize>)> {
    let (s, ch, e, f) = (c.grid.seq_len(), c.channels, c.width(), c.width() * c.mlp_ratio);
    let mut out = vec![
        ("embed.weight".to_string(), vec![ch, e]),
        ("embed.bias".to_string(), vec![e]),
        ("pos_embed".to_string(), vec![s, e]),
        ("noise_embed".to_string(), vec![e]),
    ];
    for l in 0..c.depth {
        for (name, shape) in [
            ("attn.wq", vec![e, e]),
            ("attn.wk", vec![e, e]),
            ("attn.wv", vec![e, e]),
            ("attn.wo", vec![e, e]),
            ("mlp.w1", vec![e, f]),
            ("mlp.b1", vec![f]),
            ("mlp.w2", vec![f, e]),
            ("mlp.b2", vec![e]),
        ] {
            out.push((format!("blocks.{l}.{name}"), shape));
        }
    }
    out.push(("head.weight".to_string(), vec![e, ch]));
    out.push(("head.bias".to_string(), vec![ch]));
    out
}

impl ToyDiT {
    pub fn init<R: Rng>(config: &ToyDiTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(config);
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let n: usize = shape.iter().product();
            let std = if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                0.0
            } else if name == "pos_embed" {
                0.1
            } else if name == "noise_embed" {
                0.5
            } else {
                let fan_in = shape[0] as f32;
                let gain = if name.starts_with("head") || name.ends_with("wo") || name.ends_with("w2") {
                    0.5
                } else {
                    1.0
                };
                gain / fan_in.sqrt()
            };
            params.push(
                (0..n)
                    .map(|_| {
                        if std == 0.0 {
                            0.0
                        } else {
                            std * rng.sample::<f32, _>(StandardNormal)
                        }
                    })
                    .collect(),
            );
        }
        let (names, shapes) = layout.into_iter().unzip();
        Ok(Self {
            config: config.clone(),
            names,
            shapes,
            params,
            perm: permutation_for(config)?,
        })
    }

    pub(crate) fn from_parts(config: &ToyDiTConfig, params: Vec<Vec<f32>>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(config);
        if layout.len() != params.len() {
            bail!(
                Geometry,
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            );
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if shape.iter().product::<usize>() != p.len() {
                bail!(
                    Geometry,
                    "parameter {name} has {} values, expected shape {:?}",
                    p.len(),
                    shape
                );
            }
        }
        let (names, shapes) = layout.into_iter().unzip();
        Ok(Self {
            config: config.clone(),
            names,
            shapes,
            params,
            perm: permutation_for(config)?,
        })
    }

    pub fn config(&self) -> &ToyDiTConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn params(&self) -> &[Vec<f32>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Switches the token permutation at the model boundary on or off,
    /// keeping the weights.
    pub fn set_reorder(&mut self, on: bool) -> Result<()> {
        self.config.reorder = on;
        self.perm = permutation_for(&self.config)?;
        Ok(())
    }

    fn p(&self, i: usize) -> &[f32] {
        &self.params[i]
    }

    fn layer(&self, l: usize, which: usize) -> usize {
        LAYER_BASE + l * PER_LAYER + which
    }

    fn head_index(&self) -> usize {
        LAYER_BASE + self.config.depth * PER_LAYER
    }

    fn split_heads(&self, x: &[f32]) -> Result<Tensor> {
        let (s, h, d) = (self.config.grid.seq_len(), self.config.heads, self.config.dim);
        let mut out = vec![0.0f32; x.len()];
        for (i, row) in x.chunks_exact(h * d).enumerate() {
            for hh in 0..h {
                out[(hh * s + i) * d..(hh * s + i + 1) * d].copy_from_slice(&row[hh * d..(hh + 1) * d]);
            }
        }
        Tensor::new(vec![h, s, d], out)
    }

    fn merge_heads(&self, x: &[f32]) -> Vec<f32> {
        let (s, h, d) = (self.config.grid.seq_len(), self.config.heads, self.config.dim);
        let mut out = vec![0.0f32; x.len()];
        for hh in 0..h {
            for i in 0..s {
                out[i * h * d + hh * d..i * h * d + (hh + 1) * d]
                    .copy_from_slice(&x[(hh * s + i) * d..(hh * s + i + 1) * d]);
            }
        }
        out
    }

    fn attend(
        &self,
        plan: &AttentionPlan,
        inp: &AttentionInputs,
        stats: &mut ForwardStats,
    ) -> Result<(Tensor, Option<BlockMask>)> {
        let (h, s, d) = (self.config.heads, self.config.grid.seq_len(), self.config.dim);
        let thr = match plan.mode {
            AttentionMode::Full => {
                stats.flops += FlopCount::dense(h, s, d);
                return Ok((dense_attention(inp)?, None));
            }
            AttentionMode::Identity => return Ok((inp.v.clone(), None)),
            AttentionMode::Nabla { thr } | AttentionMode::NablaSta { thr, .. } => thr,
        };
        let n = self.config.grid.block_size();
        let params = NablaParams {
            thr,
            block_n: n,
            scale: inp.scale,
        };
        let mut mask = nabla_mask(&inp.q, &inp.k, &params)?;
        stats.nabla_popcount += mask.popcount();
        stats.flops.mask_macs += nabla_mask_cost(h, s, d, n);
        if let Some(sta) = &plan.sta {
            stats.sta_popcount += sta.popcount() * h as u64;
            mask = join_masks(&mask, sta)?;
        }
        stats.sparsity_sum += sparsity(&mask);
        stats.masks += 1;
        if mask.is_full() {
            // A saturated mask is full attention; take the dense route.
            stats.flops += FlopCount::dense(h, s, d);
            return Ok((dense_attention(inp)?, None));
        }
        let (out, flops) = block_sparse_attention_counted(inp, &mask, n)?;
        stats.flops += flops;
        Ok((out, Some(mask)))
    }

    fn forward_cached(
        &self,
        plan: &AttentionPlan,
        x: &[f32],
        t: f32,
        stats: &mut ForwardStats,
    ) -> Result<(Vec<f32>, Cache)> {
        let c = &self.config;
        let (s, ch, e, f) = (c.grid.seq_len(), c.channels, c.width(), c.width() * c.mlp_ratio);
        if x.len() != s * ch {
            bail!(Geometry, "input has {} values, expected {}x{}", x.len(), s, ch);
        }
        let xb = gather_rows(x, ch, &self.perm.forward);
        let mut h = matmul(&xb, self.p(W_IN), s, ch, e);
        add_bias(&mut h, self.p(B_IN));
        let pos = self.p(POS);
        let temb = self.p(T_EMB);
        for (i, row) in h.chunks_exact_mut(e).enumerate() {
            let src = self.perm.forward[i];
            for ((v, p), te) in row.iter_mut().zip(&pos[src * e..(src + 1) * e]).zip(temb) {
                *v += p + t * te;
            }
        }

        let mut layers = Vec::with_capacity(c.depth);
        for l in 0..c.depth {
            let (a, r1) = layer_norm(&h, e);
            let q = matmul(&a, self.p(self.layer(l, WQ)), s, e, e);
            let k = matmul(&a, self.p(self.layer(l, WK)), s, e, e);
            let v = matmul(&a, self.p(self.layer(l, WV)), s, e, e);
            let inp = AttentionInputs::with_scale(
                self.split_heads(&q)?,
                self.split_heads(&k)?,
                self.split_heads(&v)?,
                1.0 / (c.dim as f64).sqrt(),
            )?;
            let (o, mask) = self.attend(plan, &inp, stats)?;
            let merged = self.merge_heads(o.data());
            add_assign(&mut h, &matmul(&merged, self.p(self.layer(l, WO)), s, e, e));

            let (a2, r2) = layer_norm(&h, e);
            let mut u = matmul(&a2, self.p(self.layer(l, W1)), s, e, f);
            add_bias(&mut u, self.p(self.layer(l, B1)));
            let g: Vec<f32> = u.iter().map(|&z| gelu(z)).collect();
            let mut m = matmul(&g, self.p(self.layer(l, W2)), s, f, e);
            add_bias(&mut m, self.p(self.layer(l, B2)));
            add_assign(&mut h, &m);
            layers.push(LayerCache {
                identity: matches!(plan.mode, AttentionMode::Identity),
                a,
                r1,
                inp,
                mask,
                merged,
                a2,
                r2,
                u,
                g,
            });
        }

        let (af, rf) = layer_norm(&h, e);
        let hi = self.head_index();
        let mut yb = matmul(&af, self.p(hi), s, e, ch);
        add_bias(&mut yb, self.p(hi + 1));
        let y = gather_rows(&yb, ch, &self.perm.inverse);
        Ok((
            y,
            Cache {
                xb,
                t,
                layers,
                af,
                rf,
            },
        ))
    }

    fn backward(&self, cache: &Cache, dy: &[f32], grads: &mut [Vec<f32>]) -> Result<()> {
        let c = &self.config;
        let (s, ch, e, f) = (c.grid.seq_len(), c.channels, c.width(), c.width() * c.mlp_ratio);
        let n = c.grid.block_size();
        let dyb = gather_rows(dy, ch, &self.perm.forward);
        let hi = self.head_index();
        add_matmul_at_b(&mut grads[hi], &cache.af, &dyb, s, e, ch);
        add_column_sums(&mut grads[hi + 1], &dyb);
        let daf = matmul_a_bt(&dyb, self.p(hi), s, ch, e);
        let mut dh = layer_norm_backward(&cache.af, &cache.rf, &daf, e);

        for l in (0..c.depth).rev() {
            let lc = &cache.layers[l];
            add_matmul_at_b(&mut grads[self.layer(l, W2)], &lc.g, &dh, s, f, e);
            add_column_sums(&mut grads[self.layer(l, B2)], &dh);
            let dg = matmul_a_bt(&dh, self.p(self.layer(l, W2)), s, e, f);
            let du: Vec<f32> = dg.iter().zip(&lc.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            add_matmul_at_b(&mut grads[self.layer(l, W1)], &lc.a2, &du, s, e, f);
            add_column_sums(&mut grads[self.layer(l, B1)], &du);
            let da2 = matmul_a_bt(&du, self.p(self.layer(l, W1)), s, f, e);
            add_assign(&mut dh, &layer_norm_backward(&lc.a2, &lc.r2, &da2, e));

            add_matmul_at_b(&mut grads[self.layer(l, WO)], &lc.merged, &dh, s, e, e);
            let dmerged = matmul_a_bt(&dh, self.p(self.layer(l, WO)), s, e, e);
            let dout = self.split_heads(&dmerged)?;
            let (dq, dk, dv) = if lc.identity {
                (vec![0.0; s * e], vec![0.0; s * e], dmerged)
            } else {
                let g = attention_backward(&lc.inp, lc.mask.as_ref().map(|m| (m, n)), &dout)?;
                (
                    self.merge_heads(g.dq.data()),
                    self.merge_heads(g.dk.data()),
                    self.merge_heads(g.dv.data()),
                )
            };
            let mut da = vec![0.0f32; s * e];
            for (which, d) in [(WQ, &dq), (WK, &dk), (WV, &dv)] {
                add_matmul_at_b(&mut grads[self.layer(l, which)], &lc.a, d, s, e, e);
                add_assign(&mut da, &matmul_a_bt(d, self.p(self.layer(l, which)), s, e, e));
            }
            add_assign(&mut dh, &layer_norm_backward(&lc.a, &lc.r1, &da, e));
        }

        add_matmul_at_b(&mut grads[W_IN], &cache.xb, &dh, s, ch, e);
        add_column_sums(&mut grads[B_IN], &dh);
        let mut dt = vec![0.0f32; e];
        add_column_sums(&mut dt, &dh);
        for (g, d) in grads[T_EMB].iter_mut().zip(&dt) {
            *g += cache.t * d;
        }
        for (i, row) in dh.chunks_exact(e).enumerate() {
            let dst = self.perm.forward[i];
            add_assign(&mut grads[POS][dst * e..(dst + 1) * e], row);
        }
        Ok(())
    }

    pub(crate) fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// Denoiser output for one raster-order `[S, C]` input at noise level `t`.
    pub fn predict(&self, mode: AttentionMode, x: &Tensor, t: f32) -> Result<(Tensor, ForwardStats)> {
        let plan = AttentionPlan::new(mode, &self.config)?;
        let mut stats = ForwardStats::default();
        let (y, _) = self.forward_cached(&plan, x.data(), t, &mut stats)?;
        Ok((Tensor::new(x.shape().to_vec(), y)?, stats))
    }

    pub(crate) fn forward(
        &self,
        plan: &AttentionPlan,
        x: &[f32],
        t: f32,
    ) -> Result<(Vec<f32>, ForwardStats)> {
        let mut stats = ForwardStats::default();
        let (y, _) = self.forward_cached(plan, x, t, &mut stats)?;
        Ok((y, stats))
    }

    /// Mean squared error against per-sample targets, averaged over the
    /// batch, with gradients for every parameter. Samples run in parallel and
    /// are reduced in index order.
    pub(crate) fn loss_and_grad(
        &self,
        plan: &AttentionPlan,
        batch: &[BatchItem],
    ) -> Result<(f64, Vec<Vec<f32>>, ForwardStats)> {
        let per_sample: Vec<Result<SampleGrad>> = batch
            .par_iter()
            .map(|item| {
                let mut stats = ForwardStats::default();
                let (y, cache) = self.forward_cached(plan, &item.input, item.t, &mut stats)?;
                let count = y.len() as f64;
                let loss = y
                    .iter()
                    .zip(&item.target)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    / count;
                let dy: Vec<f32> = y
                    .iter()
                    .zip(&item.target)
                    .map(|(a, b)| (2.0 * (a - b) as f64 / count) as f32)
                    .collect();
                let mut grads = self.zero_grads();
                self.backward(&cache, &dy, &mut grads)?;
                Ok((loss, grads, stats))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = self.zero_grads();
        let mut stats = ForwardStats::default();
        for r in per_sample {
            let (loss, g, st) = r?;
            total += loss;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                add_assign(acc, gi);
            }
            stats.merge(&st);
        }
        let scale = 1.0 / batch.len() as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        Ok((total / batch.len() as f64, grads, stats))
    }

    /// Mean loss over `batch` without gradients.
    pub(crate) fn eval_loss(&self, plan: &AttentionPlan, batch: &[BatchItem]) -> Result<f64> {
        let losses: Vec<Result<f64>> = batch
            .par_iter()
            .map(|item| {
                let (y, _) = self.forward(plan, &item.input, item.t)?;
                Ok(y.iter()
                    .zip(&item.target)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    / y.len() as f64)
            })
            .collect();
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / batch.len() as f64)
    }
}

/// Loss, parameter gradients and attention counters of one sample.
type SampleGrad = (f64, Vec<Vec<f32>>, ForwardStats);

/// One training example: raster-order input, its noise level and target.
#[derive(Debug, Clone)]
pub(crate) struct BatchItem {
    pub input: Vec<f32>,
    pub t: f32,
    pub target: Vec<f32>,
}
