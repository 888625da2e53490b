//! Convolutional encoder, temporal core, classification head and optional
//! reconstruction decoder, with hand-written backpropagation.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::*;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CNPD";
const FORMAT_VERSION: u32 = 1;
/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Temporal {
    /// Recurrent core over per-frame features.
    Gru,
    /// No recurrence; the last `frames` crops are stacked as input channels.
    FrameStack { frames: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub input_side: usize,
    /// Output channels of each encoder level; every level halves the side.
    pub enc_channels: Vec<usize>,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub temporal: Temporal,
    pub decoder: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            input_side: 32,
            enc_channels: vec![4, 8, 8],
            feature_dim: 16,
            hidden_dim: 12,
            temporal: Temporal::Gru,
            decoder: true,
        }
    }
}

impl ModelShape {
    pub fn in_channels(&self) -> usize {
        match self.temporal {
            Temporal::Gru => 1,
            Temporal::FrameStack { frames } => frames,
        }
    }

    fn levels(&self) -> usize {
        self.enc_channels.len()
    }

    fn bottleneck_side(&self) -> usize {
        self.input_side >> self.levels()
    }

    fn flat_dim(&self) -> usize {
        self.enc_channels[self.levels() - 1] * self.bottleneck_side().pow(2)
    }

    fn head_dim(&self) -> usize {
        match self.temporal {
            Temporal::Gru => self.hidden_dim,
            Temporal::FrameStack { .. } => self.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 || self.enc_channels.contains(&0) {
            return Err(Error::Model("encoder needs at least one level with non-zero channels".into()));
        }
        if self.input_side == 0 || !self.input_side.is_multiple_of(1 << l) {
            return Err(Error::Model(format!("input side {} is not divisible by 2^{l}", self.input_side)));
        }
        if self.feature_dim == 0 || (self.temporal == Temporal::Gru && self.hidden_dim == 0) {
            return Err(Error::Model("feature and hidden sizes must be positive".into()));
        }
        if let Temporal::FrameStack { frames: 0 } = self.temporal {
            return Err(Error::Model("frame stack needs at least one frame".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        let mut lay = ParamLayout::default();
        let mut c_prev = self.in_channels();
        for (i, &c) in self.enc_channels.iter().enumerate() {
            lay.push(&format!("enc{i}.w"), &[c, c_prev, 3, 3]);
            lay.push(&format!("enc{i}.b"), &[c]);
            c_prev = c;
        }
        lay.push("feat.w", &[self.feature_dim, self.flat_dim()]);
        lay.push("feat.b", &[self.feature_dim]);
        if self.temporal == Temporal::Gru {
            let (h, f) = (self.hidden_dim, self.feature_dim);
            for g in ["z", "r", "n"] {
                lay.push(&format!("gru.w{g}"), &[h, f]);
                lay.push(&format!("gru.u{g}"), &[h, h]);
                lay.push(&format!("gru.b{g}"), &[h]);
            }
        }
        lay.push("head.w", &[1, self.head_dim()]);
        lay.push("head.b", &[1]);
        if self.decoder {
            lay.push("dec.fc.w", &[self.flat_dim(), self.feature_dim]);
            lay.push("dec.fc.b", &[self.flat_dim()]);
            for (j, (cin, cout)) in self.decoder_channels().into_iter().enumerate() {
                lay.push(&format!("dec{j}.w"), &[cout, cin, 3, 3]);
                lay.push(&format!("dec{j}.b"), &[cout]);
            }
        }
        lay
    }

    fn decoder_channels(&self) -> Vec<(usize, usize)> {
        let l = self.levels();
        (0..l)
            .map(|j| {
                let cin = self.enc_channels[l - 1 - j];
                let cout = if j + 1 == l { 1 } else { self.enc_channels[l - 2 - j] };
                (cin, cout)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn fan(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
            [o, i] => (*i, *o),
            _ => (1, 1),
        }
    }
}

/// Named blocks of the flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
}

impl ParamLayout {
    fn push(&mut self, name: &str, shape: &[usize]) {
        let offset = self.total();
        self.blocks.push(ParamBlock { name: name.into(), shape: shape.to_vec(), offset });
    }

    pub fn total(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    fn range(&self, name: &str) -> Range<usize> {
        self.get(name).unwrap_or_else(|| panic!("layout has no block {name}")).range()
    }
}

#[derive(Debug, Clone)]
struct GruRanges {
    w: [Range<usize>; 3],
    u: [Range<usize>; 3],
    b: [Range<usize>; 3],
}

#[derive(Debug, Clone)]
struct Ranges {
    enc: Vec<(Range<usize>, Range<usize>)>,
    feat: (Range<usize>, Range<usize>),
    gru: Option<GruRanges>,
    head: (Range<usize>, Range<usize>),
    dec_fc: Option<(Range<usize>, Range<usize>)>,
    dec: Vec<(Range<usize>, Range<usize>)>,
}

impl Ranges {
    fn new(shape: &ModelShape, lay: &ParamLayout) -> Self {
        let pair = |n: &str| (lay.range(&format!("{n}.w")), lay.range(&format!("{n}.b")));
        let gru = (shape.temporal == Temporal::Gru).then(|| {
            let g = |p: &str| [lay.range(&format!("gru.{p}z")), lay.range(&format!("gru.{p}r")), lay.range(&format!("gru.{p}n"))];
            GruRanges { w: g("w"), u: g("u"), b: g("b") }
        });
        Self {
            enc: (0..shape.levels()).map(|i| pair(&format!("enc{i}"))).collect(),
            feat: pair("feat"),
            gru,
            head: pair("head"),
            dec_fc: shape.decoder.then(|| pair("dec.fc")),
            dec: if shape.decoder { (0..shape.levels()).map(|j| pair(&format!("dec{j}"))).collect() } else { vec![] },
        }
    }
}

/// A training or evaluation sequence: normalized `side x side` crops and
/// per-frame labels (1 = punctured).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub frames: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub reconstruction: f64,
}

struct EncCache {
    inputs: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
    flat: Vec<f64>,
    feature: Vec<f64>,
}

struct DecCache {
    fc_out: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    outs: Vec<Vec<f64>>,
}

struct GruCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

/// Running state for frame-by-frame inference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamState {
    hidden: Vec<f64>,
    history: VecDeque<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct PunctureModel {
    pub shape: ModelShape,
    pub params: Vec<f64>,
    layout: ParamLayout,
    ranges: Ranges,
}

impl PartialEq for PunctureModel {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.params == other.params
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    shape: ModelShape,
    blocks: Vec<ParamBlock>,
}

impl PunctureModel {
    /// Xavier-uniform weights, zero biases.
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let layout = shape.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total()];
        for b in &layout.blocks {
            let last = b.name.rsplit('.').next().unwrap_or_default();
            if last.starts_with('w') || last.starts_with('u') {
                let (fi, fo) = b.fan();
                let lim = (6.0 / (fi + fo) as f64).sqrt();
                for p in &mut params[b.range()] {
                    *p = rng.random_range(-lim..lim);
                }
            }
        }
        Self::from_parts(shape, params)
    }

    pub fn from_parts(shape: ModelShape, params: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        let layout = shape.layout();
        if params.len() != layout.total() {
            return Err(Error::Model(format!("expected {} parameters, got {}", layout.total(), params.len())));
        }
        let ranges = Ranges::new(&shape, &layout);
        Ok(Self { shape, params, layout, ranges })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    fn encode(&self, x: &[f64]) -> EncCache {
        let s = &self.shape;
        let mut cur = x.to_vec();
        let mut c_in = s.in_channels();
        let mut side = s.input_side;
        let (mut inputs, mut acts) = (Vec::new(), Vec::new());
        for (i, &c) in s.enc_channels.iter().enumerate() {
            let (w, b) = &self.ranges.enc[i];
            let mut a = conv3x3(&cur, c_in, side, self.p(w), self.p(b), c);
            tanh_inplace(&mut a);
            inputs.push(std::mem::take(&mut cur));
            cur = avgpool2(&a, c, side);
            acts.push(a);
            c_in = c;
            side /= 2;
        }
        let (w, b) = &self.ranges.feat;
        let mut feature = dense(&cur, self.p(w), self.p(b));
        tanh_inplace(&mut feature);
        EncCache { inputs, acts, flat: cur, feature }
    }

    fn encode_backward(&self, cache: &EncCache, dfeature: &[f64], grad: &mut [f64]) {
        let s = &self.shape;
        let dpre = tanh_backward(&cache.feature, dfeature);
        let (w, b) = &self.ranges.feat;
        let (gw, gb) = split2(grad, w, b);
        let mut d = dense_backward(&cache.flat, self.p(w), &dpre, gw, gb);
        for i in (0..s.levels()).rev() {
            let c = s.enc_channels[i];
            let side = s.input_side >> i;
            let c_in = if i == 0 { s.in_channels() } else { s.enc_channels[i - 1] };
            let dact = avgpool2_backward(&d, c, side);
            let dpre = tanh_backward(&cache.acts[i], &dact);
            let (w, b) = &self.ranges.enc[i];
            let (gw, gb) = split2(grad, w, b);
            d = conv3x3_backward(&cache.inputs[i], c_in, side, self.p(w), c, &dpre, gw, gb);
        }
    }

    fn decode(&self, feature: &[f64]) -> Option<DecCache> {
        let s = &self.shape;
        let (w, b) = self.ranges.dec_fc.as_ref()?;
        let mut fc_out = dense(feature, self.p(w), self.p(b));
        tanh_inplace(&mut fc_out);
        let mut cur = fc_out.clone();
        let mut side = s.bottleneck_side();
        let (mut inputs, mut outs) = (Vec::new(), Vec::new());
        let chans = s.decoder_channels();
        for (j, &(cin, cout)) in chans.iter().enumerate() {
            let up = upsample2(&cur, cin, side);
            side *= 2;
            let (w, b) = &self.ranges.dec[j];
            let mut o = conv3x3(&up, cin, side, self.p(w), self.p(b), cout);
            if j + 1 == chans.len() {
                o.iter_mut().for_each(|v| *v = sigmoid(*v));
            } else {
                tanh_inplace(&mut o);
            }
            inputs.push(up);
            cur = o.clone();
            outs.push(o);
        }
        Some(DecCache { fc_out, inputs, outs })
    }

    /// Returns the gradient with respect to the feature.
    fn decode_backward(&self, feature: &[f64], cache: &DecCache, drecon: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let s = &self.shape;
        let chans = s.decoder_channels();
        let mut d = drecon.to_vec();
        for j in (0..chans.len()).rev() {
            let (cin, cout) = chans[j];
            let y = &cache.outs[j];
            let dpre: Vec<f64> = if j + 1 == chans.len() {
                y.iter().zip(&d).map(|(a, g)| g * a * (1.0 - a)).collect()
            } else {
                tanh_backward(y, &d)
            };
            let side = s.bottleneck_side() << (j + 1);
            let (w, b) = &self.ranges.dec[j];
            let (gw, gb) = split2(grad, w, b);
            let dup = conv3x3_backward(&cache.inputs[j], cin, side, self.p(w), cout, &dpre, gw, gb);
            d = upsample2_backward(&dup, cin, side / 2);
        }
        let dpre = tanh_backward(&cache.fc_out, &d);
        let (w, b) = self.ranges.dec_fc.as_ref().expect("decoder present");
        let (gw, gb) = split2(grad, w, b);
        dense_backward(feature, self.p(w), &dpre, gw, gb)
    }

    fn gru_step(&self, x: &[f64], h: &[f64]) -> GruCache {
        let g = self.ranges.gru.as_ref().expect("recurrent model");
        let gate = |k: usize, hv: &[f64]| -> Vec<f64> {
            let a = dense(x, self.p(&g.w[k]), self.p(&g.b[k]));
            let u = self.p(&g.u[k]);
            let nh = hv.len();
            a.iter().enumerate().map(|(o, av)| av + u[o * nh..(o + 1) * nh].iter().zip(hv).map(|(p, q)| p * q).sum::<f64>()).collect()
        };
        let z: Vec<f64> = gate(0, h).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = gate(1, h).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let n: Vec<f64> = gate(2, &rh).into_iter().map(f64::tanh).collect();
        GruCache { x: x.to_vec(), h_prev: h.to_vec(), z, r, n, rh }
    }

    fn gru_out(c: &GruCache) -> Vec<f64> {
        (0..c.z.len()).map(|i| (1.0 - c.z[i]) * c.n[i] + c.z[i] * c.h_prev[i]).collect()
    }

    /// Returns `(dx, dh_prev)`.
    fn gru_backward(&self, c: &GruCache, dh: &[f64], grad: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
        let g = self.ranges.gru.as_ref().expect("recurrent model");
        let nh = dh.len();
        let mut dh_prev: Vec<f64> = (0..nh).map(|i| dh[i] * c.z[i]).collect();
        let mut dx = vec![0.0; c.x.len()];
        let dn_pre: Vec<f64> = (0..nh).map(|i| dh[i] * (1.0 - c.z[i]) * (1.0 - c.n[i] * c.n[i])).collect();
        let dz_pre: Vec<f64> = (0..nh).map(|i| dh[i] * (c.h_prev[i] - c.n[i]) * c.z[i] * (1.0 - c.z[i])).collect();

        let mut backprop = |k: usize, dpre: &[f64], hin: &[f64], grad: &mut [f64]| -> Vec<f64> {
            let (gw, gb) = split2(grad, &g.w[k], &g.b[k]);
            let dxi = dense_backward(&c.x, self.p(&g.w[k]), dpre, gw, gb);
            dx.iter_mut().zip(&dxi).for_each(|(a, b)| *a += b);
            let mut scratch = vec![0.0; nh];
            dense_backward(hin, self.p(&g.u[k]), dpre, &mut grad[g.u[k].clone()], &mut scratch)
        };
        let drh = backprop(2, &dn_pre, &c.rh, grad);
        let dr_pre: Vec<f64> = (0..nh).map(|i| drh[i] * c.h_prev[i] * c.r[i] * (1.0 - c.r[i])).collect();
        for i in 0..nh {
            dh_prev[i] += drh[i] * c.r[i];
        }
        let dhz = backprop(0, &dz_pre, &c.h_prev, grad);
        let dhr = backprop(1, &dr_pre, &c.h_prev, grad);
        for i in 0..nh {
            dh_prev[i] += dhz[i] + dhr[i];
        }
        (dx, dh_prev)
    }

    fn head(&self, d: &[f64]) -> f64 {
        let (w, b) = &self.ranges.head;
        sigmoid(dense(d, self.p(w), self.p(b))[0])
    }

    /// Channel-stacked network inputs for each time step.
    fn stacked_inputs(&self, frames: &[Vec<f64>]) -> Vec<Vec<f64>> {
        match self.shape.temporal {
            Temporal::Gru => frames.to_vec(),
            Temporal::FrameStack { frames: k } => (0..frames.len())
                .map(|t| (0..k).flat_map(|j| frames[(t + j + 1).saturating_sub(k)].iter().copied()).collect())
                .collect(),
        }
    }

    fn check_frames(&self, frames: &[Vec<f64>]) -> Result<()> {
        let n = self.shape.input_side.pow(2);
        if frames.is_empty() {
            return Err(Error::Model("empty sequence".into()));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != n) {
            return Err(Error::Model(format!("frame has {} values, expected {n}", f.len())));
        }
        Ok(())
    }

    /// Puncture probability for every frame of the sequence.
    pub fn predict(&self, frames: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_frames(frames)?;
        let mut st = StreamState::default();
        frames.iter().map(|f| self.step_stream(&mut st, f)).collect()
    }

    /// Feeds one crop and returns the puncture probability for it.
    pub fn step_stream(&self, state: &mut StreamState, frame: &[f64]) -> Result<f64> {
        if frame.len() != self.shape.input_side.pow(2) {
            return Err(Error::Model(format!("frame has {} values", frame.len())));
        }
        match self.shape.temporal {
            Temporal::Gru => {
                if state.hidden.is_empty() {
                    state.hidden = vec![0.0; self.shape.hidden_dim];
                }
                let enc = self.encode(frame);
                let c = self.gru_step(&enc.feature, &state.hidden);
                state.hidden = Self::gru_out(&c);
                Ok(self.head(&state.hidden))
            }
            Temporal::FrameStack { frames: k } => {
                if state.history.is_empty() {
                    state.history.extend(std::iter::repeat_n(frame.to_vec(), k));
                } else {
                    state.history.pop_front();
                    state.history.push_back(frame.to_vec());
                }
                let x: Vec<f64> = state.history.iter().flatten().copied().collect();
                Ok(self.head(&self.encode(&x).feature))
            }
        }
    }

    /// Reconstruction of the latest frame in `frames`, when a decoder is present.
    pub fn reconstruct(&self, frames: &[Vec<f64>]) -> Result<Option<Vec<f64>>> {
        self.check_frames(frames)?;
        let x = self.stacked_inputs(frames).pop().expect("non-empty");
        let enc = self.encode(&x);
        Ok(self.decode(&enc.feature).map(|d| d.outs.last().expect("decoder levels").clone()))
    }

    pub fn loss(&self, seq: &Sequence, w_rec: f64) -> Result<LossParts> {
        self.forward_backward(seq, w_rec, None)
    }

    pub fn loss_and_grad(&self, seq: &Sequence, w_rec: f64) -> Result<(LossParts, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let parts = self.forward_backward(seq, w_rec, Some(&mut grad))?;
        Ok((parts, grad))
    }

    /// Mean over frames of `BCE + w_rec * mean squared reconstruction error`.
    fn forward_backward(&self, seq: &Sequence, w_rec: f64, grad: Option<&mut [f64]>) -> Result<LossParts> {
        self.check_frames(&seq.frames)?;
        if seq.labels.len() != seq.frames.len() {
            return Err(Error::Model("label count differs from frame count".into()));
        }
        let t_len = seq.frames.len();
        let tn = t_len as f64;
        let pixels = self.shape.input_side.pow(2) as f64;
        let inputs = self.stacked_inputs(&seq.frames);
        let encs: Vec<EncCache> = inputs.iter().map(|x| self.encode(x)).collect();
        let decs: Vec<Option<DecCache>> =
            if w_rec != 0.0 { encs.iter().map(|e| self.decode(&e.feature)).collect() } else { encs.iter().map(|_| None).collect() };

        let mut grus = Vec::new();
        let mut heads_in = Vec::new();
        match self.shape.temporal {
            Temporal::Gru => {
                let mut h = vec![0.0; self.shape.hidden_dim];
                for e in &encs {
                    let c = self.gru_step(&e.feature, &h);
                    h = Self::gru_out(&c);
                    grus.push(c);
                    heads_in.push(h.clone());
                }
            }
            Temporal::FrameStack { .. } => heads_in = encs.iter().map(|e| e.feature.clone()).collect(),
        }

        let (mut bce, mut rec) = (0.0, 0.0);
        let mut dlogits = Vec::with_capacity(t_len);
        let mut drecons = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let y_hat = self.head(&heads_in[t]);
            let y = seq.labels[t];
            bce += binary_cross_entropy(y, y_hat);
            let clamped = !(BCE_EPS..=1.0 - BCE_EPS).contains(&y_hat);
            dlogits.push(if clamped { 0.0 } else { (y_hat - y) / tn });
            let target = &seq.frames[t];
            drecons.push(decs[t].as_ref().map(|d| {
                let out = d.outs.last().expect("decoder levels");
                rec += out.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pixels;
                out.iter().zip(target).map(|(a, b)| w_rec * 2.0 * (a - b) / (pixels * tn)).collect::<Vec<f64>>()
            }));
        }
        let parts = LossParts { total: (bce + w_rec * rec) / tn, bce: bce / tn, reconstruction: rec / tn };
        let Some(grad) = grad else { return Ok(parts) };

        let (hw, hb) = &self.ranges.head;
        let mut dheads = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let (gw, gb) = split2(grad, hw, hb);
            dheads.push(dense_backward(&heads_in[t], self.p(hw), &[dlogits[t]], gw, gb));
        }
        let mut dfeatures: Vec<Vec<f64>> = match self.shape.temporal {
            Temporal::Gru => {
                let mut out = vec![Vec::new(); t_len];
                let mut dh_next = vec![0.0; self.shape.hidden_dim];
                for t in (0..t_len).rev() {
                    let dh: Vec<f64> = dheads[t].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
                    let (dx, dhp) = self.gru_backward(&grus[t], &dh, grad);
                    out[t] = dx;
                    dh_next = dhp;
                }
                out
            }
            Temporal::FrameStack { .. } => dheads,
        };
        for t in 0..t_len {
            if let (Some(d), Some(dr)) = (&decs[t], &drecons[t]) {
                let df = self.decode_backward(&encs[t].feature, d, dr, grad);
                dfeatures[t].iter_mut().zip(&df).for_each(|(a, b)| *a += b);
            }
            self.encode_backward(&encs[t], &dfeatures[t], grad);
        }
        Ok(parts)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&Manifest { shape: self.shape.clone(), blocks: self.layout.blocks.clone() })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::Model("model file is truncated".into()));
            }
            let (head, rest) = r.split_at(n);
            r = rest;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(Error::Model("not a puncture model file".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Model(format!("unsupported model format version {version}")));
        }
        let mlen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let manifest: Manifest =
            serde_json::from_slice(take(mlen)?).map_err(|e| Error::Model(format!("bad manifest: {e}")))?;
        manifest.shape.validate()?;
        if manifest.blocks != manifest.shape.layout().blocks {
            return Err(Error::Model("parameter blocks do not match the declared shape".into()));
        }
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let raw = take(n.checked_mul(8).ok_or_else(|| Error::Model("parameter count overflows".into()))?)?;
        let params: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if !r.is_empty() {
            return Err(Error::Model("trailing bytes after parameters".into()));
        }
        Self::from_parts(manifest.shape, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Disjoint mutable views of a weight block and a bias block.
fn split2<'a>(grad: &'a mut [f64], w: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    assert!(w.end <= b.start, "weight block precedes its bias");
    let (lo, hi) = grad.split_at_mut(b.start);
    (&mut lo[w.clone()], &mut hi[..b.len()])
}

fn binary_cross_entropy(y: f64, y_hat: f64) -> f64 {
    let yc = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * yc.ln() + (1.0 - y) * (1.0 - yc).ln())
}

/// Single-frame objective: `BCE(y, y_hat) + w_rec * mean((I - I_hat)^2)`.
pub fn puncture_loss(y: f64, y_hat: f64, frame: &[f64], recon: &[f64], w_rec: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&y) || !(0.0..=1.0).contains(&y_hat) {
        return Err(Error::Model(format!("label {y} and prediction {y_hat} must lie in [0, 1]")));
    }
    if frame.len() != recon.len() || frame.is_empty() {
        return Err(Error::Model(format!("frame has {} pixels, reconstruction {}", frame.len(), recon.len())));
    }
    let mse = frame.iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / frame.len() as f64;
    Ok(binary_cross_entropy(y, y_hat) + w_rec * mse)
}

/// One streaming step: puncture probability, reconstruction of the frame (if
/// the model has a decoder) and the advanced stream state.
pub fn puncture_forward(
    model: &PunctureModel,
    state: &StreamState,
    frame: &[f64],
) -> Result<(f64, Option<Vec<f64>>, StreamState)> {
    let mut next = state.clone();
    let y_hat = model.step_stream(&mut next, frame)?;
    let x: Vec<f64> = match model.shape.temporal {
        Temporal::Gru => frame.to_vec(),
        Temporal::FrameStack { .. } => next.history.iter().flatten().copied().collect(),
    };
    let recon = model.decode(&model.encode(&x).feature).map(|d| d.outs.last().expect("decoder levels").clone());
    Ok((y_hat, recon, next))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(temporal: Temporal, decoder: bool) -> ModelShape {
        ModelShape { input_side: 8, enc_channels: vec![2, 3], feature_dim: 4, hidden_dim: 3, temporal, decoder }
    }

    fn sequence(seed: u64, side: usize, len: usize) -> Sequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sequence {
            frames: (0..len).map(|_| (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
            labels: (0..len).map(|t| if t >= len / 2 { 1.0 } else { 0.0 }).collect(),
        }
    }

    #[test]
    fn layout_is_contiguous_and_named() {
        let shape = ModelShape::default();
        let lay = shape.layout();
        let mut off = 0;
        for b in &lay.blocks {
            assert_eq!(b.offset, off);
            off += b.len();
        }
        assert_eq!(lay.get("enc0.w").unwrap().shape, vec![4, 1, 3, 3]);
        assert_eq!(lay.get("feat.w").unwrap().shape, vec![16, 8 * 4 * 4]);
        assert_eq!(lay.get("dec2.w").unwrap().shape, vec![1, 4, 3, 3]);
        assert!(lay.get("gru.un").is_some());
        let no_dec = ModelShape { decoder: false, ..shape };
        assert!(no_dec.layout().get("dec.fc.w").is_none());
    }

    #[test]
    fn shape_validation() {
        assert!(ModelShape { input_side: 30, ..ModelShape::default() }.validate().is_err());
        assert!(ModelShape { enc_channels: vec![], ..ModelShape::default() }.validate().is_err());
        assert!(ModelShape { temporal: Temporal::FrameStack { frames: 0 }, ..ModelShape::default() }.validate().is_err());
    }

    #[test]
    fn streaming_matches_batch_prediction() {
        for temporal in [Temporal::Gru, Temporal::FrameStack { frames: 3 }] {
            let m = PunctureModel::new(tiny(temporal, true), 4).unwrap();
            let seq = sequence(1, 8, 6);
            let batch = m.predict(&seq.frames).unwrap();
            let mut st = StreamState::default();
            for (t, f) in seq.frames.iter().enumerate() {
                assert_eq!(m.step_stream(&mut st, f).unwrap(), batch[t]);
            }
            assert!(batch.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn loss_parts_add_up() {
        let m = PunctureModel::new(tiny(Temporal::Gru, true), 2).unwrap();
        let seq = sequence(2, 8, 4);
        let l = m.loss(&seq, 0.7).unwrap();
        assert!((l.total - (l.bce + 0.7 * l.reconstruction)).abs() < 1e-12);
        let (lg, _) = m.loss_and_grad(&seq, 0.7).unwrap();
        assert_eq!(l, lg);
        let probs = m.predict(&seq.frames).unwrap();
        let bce: f64 = probs
            .iter()
            .zip(&seq.labels)
            .map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / 4.0;
        assert!((bce - l.bce).abs() < 1e-12);
    }

    /// Central differences on every parameter of tiny models.
    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for (temporal, decoder) in [(Temporal::Gru, true), (Temporal::FrameStack { frames: 2 }, true), (Temporal::Gru, false)] {
            let m = PunctureModel::new(tiny(temporal, decoder), 7).unwrap();
            let seq = sequence(3, 8, 4);
            let (_, g) = m.loss_and_grad(&seq, 1.0).unwrap();
            let h = 1e-5;
            for (i, &gi) in g.iter().enumerate() {
                let mut p = m.clone();
                p.params[i] += h;
                let up = p.loss(&seq, 1.0).unwrap().total;
                p.params[i] -= 2.0 * h;
                let down = p.loss(&seq, 1.0).unwrap().total;
                let num = (up - down) / (2.0 * h);
                let err = (num - gi).abs() / num.abs().max(gi.abs()).max(1e-6);
                assert!(err < 1e-4, "{temporal:?} param {i}: analytic {gi} numeric {num}");
            }
        }
    }

    #[test]
    fn bytes_round_trip_and_rejects_corruption() {
        let m = PunctureModel::new(tiny(Temporal::FrameStack { frames: 2 }, false), 9).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(PunctureModel::from_bytes(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(PunctureModel::from_bytes(&bad), Err(Error::Model(_))));
        assert!(matches!(PunctureModel::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Model(_))));
        let mut ver = bytes.clone();
        ver[4] = 99;
        assert!(matches!(PunctureModel::from_bytes(&ver), Err(Error::Model(_))));
    }

    #[test]
    fn single_frame_loss_examples() {
        let img = vec![0.25; 16];
        assert!((puncture_loss(1.0, 0.5, &img, &img, 1.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        for p in [0.1, 0.3, 0.77] {
            let a = puncture_loss(1.0, p, &img, &img, 0.0).unwrap();
            let b = puncture_loss(0.0, 1.0 - p, &img, &img, 0.0).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        let off: Vec<f64> = img.iter().map(|v| v + 0.5).collect();
        assert!((puncture_loss(1.0, 0.5, &img, &off, 2.0).unwrap() - (2f64.ln() + 0.5)).abs() < 1e-12);
        assert!(puncture_loss(1.0, 0.5, &img, &img[..4], 1.0).is_err());
    }

    #[test]
    fn forward_matches_stream_and_reconstruct() {
        let shape = ModelShape { input_side: 16, enc_channels: vec![2, 2], feature_dim: 4, hidden_dim: 3, ..ModelShape::default() };
        let m = PunctureModel::new(shape, 4).unwrap();
        let frames: Vec<Vec<f64>> = (0..3).map(|k| (0..256).map(|i| ((i * 7 + k * 13) % 17) as f64 / 17.0).collect()).collect();
        let mut st = StreamState::default();
        let batch = m.predict(&frames).unwrap();
        for (k, f) in frames.iter().enumerate() {
            let (y, recon, next) = puncture_forward(&m, &st, f).unwrap();
            assert!((y - batch[k]).abs() < 1e-12);
            assert_eq!(recon, m.reconstruct(std::slice::from_ref(f)).unwrap());
            st = next;
        }
    }
}
