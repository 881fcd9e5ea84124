//! Forward pass and hand-written adjoints.

use rayon::prelude::*;

use super::{Activation, Axis, MixerModel, SublayerLayout, TimeEmbeddingVectors, FEATURES, SITES};

/// Samples per gradient chunk; chunk gradients are summed in index order.
const CHUNK: usize = 8;
const NORM_EPS: f64 = 1e-5;

/// Embeddings of every distinct time in a batch.
struct Embeddings {
    /// Distinct times per axis, sorted.
    times: [Vec<u32>; 2],
    /// Per sample and axis, the position of each reduced time in `times`.
    index: Vec<[Vec<usize>; 2]>,
    sinus: [Vec<f64>; 2],
    pre: [[Vec<f64>; 2]; SITES],
    out: [[Vec<f64>; 2]; SITES],
}

fn is_active(model: &MixerModel, site: usize, axis: Axis) -> bool {
    model.config.n_blocks > 0 && model.config.embedding_scheme.is_active(site, axis)
}

fn affine(model: &MixerModel, site: usize, axis: Axis, sinus: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let e = model.config.embed_dim;
    let at = model.layout.tables[site][axis as usize];
    let a = &model.params[at..at + e * e];
    let b = &model.params[at + e * e..at + e * e + e];
    let pre: Vec<f64> = (0..e).map(|k| dot(&a[k * e..(k + 1) * e], sinus) + b[k]).collect();
    let out = pre.iter().map(|&p| model.config.activation.apply(p)).collect();
    (pre, out)
}

pub(super) fn embed_one(model: &MixerModel, t: u32, site: usize, axis: Axis) -> (Vec<f64>, Vec<f64>) {
    let sinus = super::sinusoidal_features(t, model.config.embed_dim, model.config.max_time);
    affine(model, site, axis, &sinus)
}

fn embed(model: &MixerModel, times: &[&TimeEmbeddingVectors]) -> Embeddings {
    let e = model.config.embed_dim;
    let mut unique: [Vec<u32>; 2] = Default::default();
    for axis in Axis::BOTH {
        let mut all: Vec<u32> = times.iter().flat_map(|t| t.axis(axis).iter().copied()).collect();
        all.sort_unstable();
        all.dedup();
        unique[axis as usize] = all;
    }
    let index = times
        .iter()
        .map(|t| {
            Axis::BOTH.map(|axis| {
                let u = &unique[axis as usize];
                t.axis(axis).iter().map(|v| u.binary_search(v).expect("time collected above")).collect()
            })
        })
        .collect();
    let sinus = Axis::BOTH.map(|axis| {
        unique[axis as usize]
            .iter()
            .flat_map(|&t| super::sinusoidal_features(t, e, model.config.max_time))
            .collect::<Vec<f64>>()
    });
    let mut pre: [[Vec<f64>; 2]; SITES] = Default::default();
    let mut out: [[Vec<f64>; 2]; SITES] = Default::default();
    for site in 0..SITES {
        for axis in Axis::BOTH {
            if !is_active(model, site, axis) {
                continue;
            }
            let s = &sinus[axis as usize];
            for u in 0..unique[axis as usize].len() {
                let (p, o) = affine(model, site, axis, &s[u * e..(u + 1) * e]);
                pre[site][axis as usize].extend(p);
                out[site][axis as usize].extend(o);
            }
        }
    }
    Embeddings { times: unique, index, sinus, pre, out }
}

fn backward_embeddings(model: &MixerModel, emb: &Embeddings, d_out: &[[Vec<f64>; 2]; SITES], grad: &mut [f64]) {
    let e = model.config.embed_dim;
    for site in 0..SITES {
        for axis in Axis::BOTH {
            if !is_active(model, site, axis) {
                continue;
            }
            let at = model.layout.tables[site][axis as usize];
            let ax = axis as usize;
            for u in 0..emb.times[ax].len() {
                let s = &emb.sinus[ax][u * e..(u + 1) * e];
                for k in 0..e {
                    let dpre = d_out[site][ax][u * e + k] * model.config.activation.derivative(emb.pre[site][ax][u * e + k]);
                    if dpre == 0.0 {
                        continue;
                    }
                    grad[at + e * e + k] += dpre;
                    axpy(dpre, s, &mut grad[at + k * e..at + (k + 1) * e]);
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

struct Grid {
    na: usize,
    nc: usize,
}

impl Grid {
    /// Flat layout -> antenna slices (one per subcarrier, `2 N_a` reals each).
    fn to_antenna(&self, flat: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; flat.len()];
        for a in 0..self.na {
            for c in 0..self.nc {
                for p in 0..FEATURES {
                    out[(c * self.na + a) * FEATURES + p] = flat[(a * self.nc + c) * FEATURES + p];
                }
            }
        }
        out
    }

    fn from_antenna(&self, slices: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; slices.len()];
        for a in 0..self.na {
            for c in 0..self.nc {
                for p in 0..FEATURES {
                    out[(a * self.nc + c) * FEATURES + p] = slices[(c * self.na + a) * FEATURES + p];
                }
            }
        }
        out
    }
}

/// Additive injection of `site` for one sample, in flat layout.
fn injection(model: &MixerModel, emb: &Embeddings, sample: usize, block: usize, site: usize) -> Option<Vec<f64>> {
    let (na, nc, e) = (model.config.n_antennas, model.config.n_subcarriers, model.config.embed_dim);
    let mut inj: Option<Vec<f64>> = None;
    for axis in Axis::BOTH {
        if !is_active(model, site, axis) {
            continue;
        }
        let ax = axis as usize;
        let at = model.layout.blocks[block].proj[site][ax];
        let proj = &model.params[at..at + FEATURES * e];
        let table = &emb.out[site][ax];
        let q: Vec<[f64; FEATURES]> = emb.index[sample][ax]
            .iter()
            .map(|&u| {
                let v = &table[u * e..(u + 1) * e];
                [dot(&proj[..e], v), dot(&proj[e..], v)]
            })
            .collect();
        let buf = inj.get_or_insert_with(|| vec![0.0; na * nc * FEATURES]);
        for a in 0..na {
            for c in 0..nc {
                let qv = match axis {
                    Axis::Antenna => q[a],
                    Axis::Subcarrier => q[c],
                };
                for p in 0..FEATURES {
                    buf[(a * nc + c) * FEATURES + p] += qv[p];
                }
            }
        }
    }
    inj
}

#[allow(clippy::too_many_arguments)]
fn backward_injection(
    model: &MixerModel,
    emb: &Embeddings,
    sample: usize,
    block: usize,
    site: usize,
    d_inj: &[f64],
    grad: &mut [f64],
    d_emb: &mut [[Vec<f64>; 2]; SITES],
) {
    let (na, nc, e) = (model.config.n_antennas, model.config.n_subcarriers, model.config.embed_dim);
    for axis in Axis::BOTH {
        if !is_active(model, site, axis) {
            continue;
        }
        let ax = axis as usize;
        let len = match axis {
            Axis::Antenna => na,
            Axis::Subcarrier => nc,
        };
        let mut dq = vec![[0.0; FEATURES]; len];
        for a in 0..na {
            for c in 0..nc {
                let slot = match axis {
                    Axis::Antenna => a,
                    Axis::Subcarrier => c,
                };
                for p in 0..FEATURES {
                    dq[slot][p] += d_inj[(a * nc + c) * FEATURES + p];
                }
            }
        }
        let at = model.layout.blocks[block].proj[site][ax];
        for (slot, dqv) in dq.iter().enumerate() {
            let u = emb.index[sample][ax][slot];
            let v = &emb.out[site][ax][u * e..(u + 1) * e];
            for p in 0..FEATURES {
                axpy(dqv[p], v, &mut grad[at + p * e..at + (p + 1) * e]);
            }
            let dv = &mut d_emb[site][ax][u * e..(u + 1) * e];
            for p in 0..FEATURES {
                axpy(dqv[p], &model.params[at + p * e..at + (p + 1) * e], dv);
            }
        }
    }
}

struct SublayerTape {
    norm: Vec<f64>,
    rstd: Vec<f64>,
    mixed: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

fn sublayer_forward(
    params: &[f64],
    lay: &SublayerLayout,
    act: Activation,
    u: &[f64],
    inj_in: Option<&[f64]>,
    inj_out: Option<&[f64]>,
) -> (Vec<f64>, SublayerTape) {
    let (w, h) = (lay.width, lay.hidden);
    let n = u.len() / w;
    let gain = &params[lay.ln_gain..lay.ln_gain + w];
    let bias = &params[lay.ln_bias..lay.ln_bias + w];
    let w1 = &params[lay.w1..lay.w1 + h * w];
    let b1 = &params[lay.b1..lay.b1 + h];
    let w2 = &params[lay.w2..lay.w2 + w * h];
    let b2 = &params[lay.b2..lay.b2 + w];
    let mut tape = SublayerTape {
        norm: vec![0.0; n * w],
        rstd: vec![0.0; n],
        mixed: vec![0.0; n * w],
        pre: vec![0.0; n * h],
        act: vec![0.0; n * h],
    };
    let mut out = u.to_vec();
    for s in 0..n {
        let us = &u[s * w..(s + 1) * w];
        let mean = us.iter().sum::<f64>() / w as f64;
        let var = us.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let r = 1.0 / (var + NORM_EPS).sqrt();
        tape.rstd[s] = r;
        for i in 0..w {
            let nv = (us[i] - mean) * r;
            tape.norm[s * w + i] = nv;
            tape.mixed[s * w + i] = gain[i] * nv + bias[i] + inj_in.map_or(0.0, |v| v[s * w + i]);
        }
        let mixed = &tape.mixed[s * w..(s + 1) * w];
        for j in 0..h {
            let p = dot(&w1[j * w..(j + 1) * w], mixed) + b1[j];
            tape.pre[s * h + j] = p;
            tape.act[s * h + j] = act.apply(p);
        }
        let z = &tape.act[s * h..(s + 1) * h];
        for i in 0..w {
            out[s * w + i] += dot(&w2[i * h..(i + 1) * h], z) + b2[i] + inj_out.map_or(0.0, |v| v[s * w + i]);
        }
    }
    (out, tape)
}

/// Returns `(d input, d input-side injection)`; the output-side injection
/// receives `dout` itself.
fn sublayer_backward(
    params: &[f64],
    lay: &SublayerLayout,
    act: Activation,
    tape: &SublayerTape,
    dout: &[f64],
    grad: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (lay.width, lay.hidden);
    let n = dout.len() / w;
    let mut du = dout.to_vec();
    let mut dmixed_all = vec![0.0; n * w];
    let mut dz = vec![0.0; h];
    let mut dh = vec![0.0; h];
    for s in 0..n {
        let d_o = &dout[s * w..(s + 1) * w];
        let z = &tape.act[s * h..(s + 1) * h];
        dz.fill(0.0);
        for i in 0..w {
            let g = d_o[i];
            grad[lay.b2 + i] += g;
            if g == 0.0 {
                continue;
            }
            axpy(g, z, &mut grad[lay.w2 + i * h..lay.w2 + (i + 1) * h]);
            axpy(g, &params[lay.w2 + i * h..lay.w2 + (i + 1) * h], &mut dz);
        }
        for j in 0..h {
            dh[j] = dz[j] * act.derivative(tape.pre[s * h + j]);
        }
        let mixed = &tape.mixed[s * w..(s + 1) * w];
        let dmixed = &mut dmixed_all[s * w..(s + 1) * w];
        for j in 0..h {
            let g = dh[j];
            grad[lay.b1 + j] += g;
            if g == 0.0 {
                continue;
            }
            axpy(g, mixed, &mut grad[lay.w1 + j * w..lay.w1 + (j + 1) * w]);
            axpy(g, &params[lay.w1 + j * w..lay.w1 + (j + 1) * w], dmixed);
        }
        let norm = &tape.norm[s * w..(s + 1) * w];
        let mut sum_dn = 0.0;
        let mut sum_dn_n = 0.0;
        let mut dn = vec![0.0; w];
        for i in 0..w {
            grad[lay.ln_gain + i] += dmixed[i] * norm[i];
            grad[lay.ln_bias + i] += dmixed[i];
            dn[i] = dmixed[i] * params[lay.ln_gain + i];
            sum_dn += dn[i];
            sum_dn_n += dn[i] * norm[i];
        }
        let r = tape.rstd[s];
        let wf = w as f64;
        for i in 0..w {
            du[s * w + i] += r * (dn[i] - sum_dn / wf - norm[i] * sum_dn_n / wf);
        }
    }
    (du, dmixed_all)
}

struct BlockTape {
    antenna: SublayerTape,
    subcarrier: SublayerTape,
}

struct SampleTape {
    blocks: Vec<BlockTape>,
    head_in: Vec<f64>,
}

fn forward_sample(model: &MixerModel, emb: &Embeddings, sample: usize, x: &[f64]) -> (Vec<f64>, SampleTape) {
    let grid = Grid { na: model.config.n_antennas, nc: model.config.n_subcarriers };
    let act = model.config.activation;
    let params = &model.params;
    let mut cur = x.to_vec();
    let mut blocks = Vec::with_capacity(model.layout.blocks.len());
    for (b, lay) in model.layout.blocks.iter().enumerate() {
        let inj: Vec<Option<Vec<f64>>> = (0..SITES).map(|s| injection(model, emb, sample, b, s)).collect();
        let in0 = inj[0].as_deref().map(|v| grid.to_antenna(v));
        let in1 = inj[1].as_deref().map(|v| grid.to_antenna(v));
        let (o, antenna) =
            sublayer_forward(params, &lay.antenna, act, &grid.to_antenna(&cur), in0.as_deref(), in1.as_deref());
        let (o, subcarrier) =
            sublayer_forward(params, &lay.subcarrier, act, &grid.from_antenna(&o), inj[2].as_deref(), inj[3].as_deref());
        cur = o;
        blocks.push(BlockTape { antenna, subcarrier });
    }
    let head = &params[model.layout.head..model.layout.head + FEATURES * FEATURES + FEATURES];
    let mut out = vec![0.0; cur.len()];
    for (o, v) in out.chunks_exact_mut(FEATURES).zip(cur.chunks_exact(FEATURES)) {
        for p in 0..FEATURES {
            o[p] = head[p * FEATURES] * v[0] + head[p * FEATURES + 1] * v[1] + head[FEATURES * FEATURES + p];
        }
    }
    (out, SampleTape { blocks, head_in: cur })
}

fn backward_sample(
    model: &MixerModel,
    emb: &Embeddings,
    sample: usize,
    tape: &SampleTape,
    dout: &[f64],
    grad: &mut [f64],
    d_emb: &mut [[Vec<f64>; 2]; SITES],
) {
    let grid = Grid { na: model.config.n_antennas, nc: model.config.n_subcarriers };
    let act = model.config.activation;
    let params = &model.params;
    let head = model.layout.head;
    let mut dcur = vec![0.0; dout.len()];
    for ((d, v), dc) in dout
        .chunks_exact(FEATURES)
        .zip(tape.head_in.chunks_exact(FEATURES))
        .zip(dcur.chunks_exact_mut(FEATURES))
    {
        for p in 0..FEATURES {
            for q in 0..FEATURES {
                grad[head + p * FEATURES + q] += d[p] * v[q];
                dc[q] += params[head + p * FEATURES + q] * d[p];
            }
            grad[head + FEATURES * FEATURES + p] += d[p];
        }
    }
    for (b, lay) in model.layout.blocks.iter().enumerate().rev() {
        let bt = &tape.blocks[b];
        backward_injection(model, emb, sample, b, 3, &dcur, grad, d_emb);
        let (du, dinj) = sublayer_backward(params, &lay.subcarrier, act, &bt.subcarrier, &dcur, grad);
        backward_injection(model, emb, sample, b, 2, &dinj, grad, d_emb);
        let dslices = grid.to_antenna(&du);
        backward_injection(model, emb, sample, b, 1, &du, grad, d_emb);
        let (du, dinj) = sublayer_backward(params, &lay.antenna, act, &bt.antenna, &dslices, grad);
        backward_injection(model, emb, sample, b, 0, &grid.from_antenna(&dinj), grad, d_emb);
        dcur = grid.from_antenna(&du);
    }
}

fn chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect()
}

pub(super) fn forward_batch(model: &MixerModel, xs: &[&[f64]], times: &[&TimeEmbeddingVectors]) -> Vec<Vec<f64>> {
    chunks(xs.len())
        .into_par_iter()
        .flat_map_iter(|range| {
            let emb = embed(model, &times[range.clone()]);
            range
                .clone()
                .map(|i| forward_sample(model, &emb, i - range.start, xs[i]).0)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Outputs and the gradient of `sum_i <upstream(i, out_i), out_i>`.
pub(super) fn gradient<F>(
    model: &MixerModel,
    xs: &[&[f64]],
    times: &[&TimeEmbeddingVectors],
    upstream: F,
) -> (Vec<Vec<f64>>, Vec<f64>)
where
    F: Fn(usize, &[f64]) -> Vec<f64> + Sync,
{
    let parts: Vec<(Vec<Vec<f64>>, Vec<f64>)> = chunks(xs.len())
        .into_par_iter()
        .map(|range| {
            let emb = embed(model, &times[range.clone()]);
            let mut grad = vec![0.0; model.params.len()];
            let mut d_emb: [[Vec<f64>; 2]; SITES] = Default::default();
            for site in 0..SITES {
                for ax in 0..2 {
                    d_emb[site][ax] = vec![0.0; emb.out[site][ax].len()];
                }
            }
            let mut outs = Vec::with_capacity(range.len());
            for i in range.clone() {
                let local = i - range.start;
                let (out, tape) = forward_sample(model, &emb, local, xs[i]);
                let up = upstream(i, &out);
                backward_sample(model, &emb, local, &tape, &up, &mut grad, &mut d_emb);
                outs.push(out);
            }
            backward_embeddings(model, &emb, &d_emb, &mut grad);
            (outs, grad)
        })
        .collect();
    let mut outs = Vec::with_capacity(xs.len());
    let mut grad = vec![0.0; model.params.len()];
    for (o, g) in parts {
        outs.extend(o);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (outs, grad)
}
