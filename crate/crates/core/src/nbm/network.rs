//! Batched LSTM forward pass and backpropagation through time.
//!
//! Activations are stored batch-major per time step: `[t][b][unit]`.

use super::{ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::scada_data::{WindowSample, FEATURE_CHANNELS};

#[derive(Debug, Clone, Copy)]
struct LstmLayer {
    w_ih: usize,
    w_hh: usize,
    bias: usize,
    input: usize,
    hidden: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    weight: usize,
    bias: usize,
    input: usize,
    output: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Network {
    lstm: Vec<LstmLayer>,
    /// Hidden dense layers followed by the linear output unit.
    dense: Vec<Dense>,
    window_len: usize,
    input: usize,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// exp(x) to within a couple of ulps, written branch-free so activation loops
/// vectorize. Inputs are clamped to the finite range of f64.
#[inline(always)]
fn exp(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1.5 * 2^52: adding it rounds to an integer held in the low mantissa bits
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let x = x.clamp(-708.0, 709.0);
    let t = x * LOG2E + SHIFTER;
    let k = t - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series to degree 13 on |r| <= ln(2)/2
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let k_bits = t.to_bits().wrapping_sub(SHIFTER.to_bits());
    let scale = f64::from_bits(k_bits.wrapping_add(1023) << 52);
    p * scale
}

#[inline(always)]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

#[inline(always)]
fn tanh(x: f64) -> f64 {
    // tanh(x) = sign(x) * (1 - e) / (1 + e) with e = exp(-2|x|)
    let e = exp(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Cached activations of one LSTM layer over a batch.
struct LayerTape {
    /// Layer inputs `[t][input][b]`.
    inputs: Vec<f64>,
    /// Post-activation gates `[t][4h][b]` in i, f, g, o order.
    gates: Vec<f64>,
    cells: Vec<f64>,
    tanh_cells: Vec<f64>,
    hidden: Vec<f64>,
}

pub(crate) struct Tape {
    batch: usize,
    layers: Vec<LayerTape>,
    /// Inputs of each dense layer `[input][b]`.
    dense_inputs: Vec<Vec<f64>>,
    pub(crate) outputs: Vec<f64>,
}

impl Network {
    pub(crate) fn new(config: &ModelConfig, params: &ModelParameters) -> Self {
        let layout = params.layout();
        let off = |name: String| layout.get(&name).expect("tensor in layout").offset;
        let mut input = config.input_channels;
        let mut lstm = Vec::new();
        for (l, &h) in config.lstm_sizes.iter().enumerate() {
            lstm.push(LstmLayer {
                w_ih: off(format!("lstm{l}.w_ih")),
                w_hh: off(format!("lstm{l}.w_hh")),
                bias: off(format!("lstm{l}.bias")),
                input,
                hidden: h,
            });
            input = h;
        }
        let mut dense = Vec::new();
        for (k, &o) in config.fc_sizes.iter().enumerate() {
            dense.push(Dense {
                weight: off(format!("fc{k}.weight")),
                bias: off(format!("fc{k}.bias")),
                input,
                output: o,
            });
            input = o;
        }
        dense.push(Dense {
            weight: off("out.weight".into()),
            bias: off("out.bias".into()),
            input,
            output: 1,
        });
        Self {
            lstm,
            dense,
            window_len: config.window_len,
            input: config.input_channels,
        }
    }

    fn check(&self, batch: &[&WindowSample]) -> Result<()> {
        if self.input != FEATURE_CHANNELS {
            return Err(Error::contract(format!(
                "model expects {} input channels, windows carry {FEATURE_CHANNELS}",
                self.input
            )));
        }
        for s in batch {
            if s.window_len() != self.window_len {
                return Err(Error::contract(format!(
                    "window of {} steps does not match model window {}",
                    s.window_len(),
                    self.window_len
                )));
            }
        }
        Ok(())
    }

    /// One recurrence step for the whole batch. All buffers are unit-major:
    /// `x` is `[input][b]`, the others `[unit][b]`.
    #[allow(clippy::too_many_arguments)]
    fn lstm_step(
        layer: &LstmLayer,
        p: &[f64],
        bsz: usize,
        x: &[f64],
        h_prev: Option<&[f64]>,
        c_prev: Option<&[f64]>,
        gates: &mut [f64],
        c: &mut [f64],
        tc: &mut [f64],
        h: &mut [f64],
    ) {
        let (ni, nh) = (layer.input, layer.hidden);
        let w_ih = &p[layer.w_ih..layer.w_ih + 4 * nh * ni];
        let w_hh = &p[layer.w_hh..layer.w_hh + 4 * nh * nh];
        let bias = &p[layer.bias..layer.bias + 4 * nh];
        for n in 0..4 * nh {
            let z = &mut gates[n * bsz..(n + 1) * bsz];
            z.fill(bias[n]);
            for k in 0..ni {
                axpy(z, w_ih[n * ni + k], &x[k * bsz..(k + 1) * bsz]);
            }
            if let Some(hp) = h_prev {
                for k in 0..nh {
                    axpy(z, w_hh[n * nh + k], &hp[k * bsz..(k + 1) * bsz]);
                }
            }
        }
        let (gi, rest) = gates.split_at_mut(nh * bsz);
        let (gf, rest) = rest.split_at_mut(nh * bsz);
        let (gg, go) = rest.split_at_mut(nh * bsz);
        for v in gi.iter_mut().chain(gf.iter_mut()).chain(go.iter_mut()) {
            *v = sigmoid(*v);
        }
        for v in gg.iter_mut() {
            *v = tanh(*v);
        }
        match c_prev {
            Some(cp) => {
                for idx in 0..nh * bsz {
                    c[idx] = gf[idx] * cp[idx] + gi[idx] * gg[idx];
                }
            }
            None => {
                for idx in 0..nh * bsz {
                    c[idx] = gi[idx] * gg[idx];
                }
            }
        }
        for idx in 0..nh * bsz {
            let t = tanh(c[idx]);
            tc[idx] = t;
            h[idx] = go[idx] * t;
        }
    }

    fn dense_forward(d: &Dense, p: &[f64], bsz: usize, x: &[f64], rectify: bool) -> Vec<f64> {
        let w = &p[d.weight..d.weight + d.output * d.input];
        let bias = &p[d.bias..d.bias + d.output];
        let mut out = vec![0.0; bsz * d.output];
        for o in 0..d.output {
            let z = &mut out[o * bsz..(o + 1) * bsz];
            z.fill(bias[o]);
            for k in 0..d.input {
                axpy(z, w[o * d.input + k], &x[k * bsz..(k + 1) * bsz]);
            }
            if rectify {
                for v in z.iter_mut() {
                    *v = relu(*v);
                }
            }
        }
        out
    }

    /// Raw features as `[t][channel][b]`.
    fn first_inputs(&self, batch: &[&WindowSample]) -> Vec<f64> {
        let (t_len, bsz, ni) = (self.window_len, batch.len(), self.input);
        let mut x = vec![0.0; t_len * ni * bsz];
        for (b, s) in batch.iter().enumerate() {
            for (t, row) in s.features().iter().enumerate() {
                for (k, &v) in row.iter().enumerate() {
                    x[(t * ni + k) * bsz + b] = v;
                }
            }
        }
        x
    }

    fn head(
        &self,
        p: &[f64],
        bsz: usize,
        last: Vec<f64>,
        mut keep: Option<&mut Vec<Vec<f64>>>,
    ) -> Vec<f64> {
        let mut act = last;
        let n = self.dense.len();
        for (k, d) in self.dense.iter().enumerate() {
            let next = Self::dense_forward(d, p, bsz, &act, k + 1 < n);
            let prev = std::mem::replace(&mut act, next);
            if let Some(keep) = keep.as_deref_mut() {
                keep.push(prev);
            }
        }
        act
    }

    /// Forward pass without caching, time-major through all layers.
    pub(crate) fn infer(&self, p: &[f64], batch: &[&WindowSample]) -> Result<Vec<f64>> {
        self.check(batch)?;
        let bsz = batch.len();
        if bsz == 0 {
            return Ok(Vec::new());
        }
        let x0 = self.first_inputs(batch);
        let unit = |l: &LstmLayer| vec![0.0; bsz * l.hidden];
        let mut h: Vec<Vec<f64>> = self.lstm.iter().map(unit).collect();
        let mut c = h.clone();
        let mut h_new = h.clone();
        let mut c_new = h.clone();
        let mut tc = h.clone();
        let mut gates: Vec<Vec<f64>> = self
            .lstm
            .iter()
            .map(|l| vec![0.0; bsz * 4 * l.hidden])
            .collect();
        let mut rectified = h.clone();
        let in_step = self.input * bsz;
        for t in 0..self.window_len {
            for (l, layer) in self.lstm.iter().enumerate() {
                let (below, here) = rectified.split_at_mut(l);
                let x: &[f64] = if l == 0 {
                    &x0[t * in_step..(t + 1) * in_step]
                } else {
                    &below[l - 1]
                };
                let first = t == 0;
                Self::lstm_step(
                    layer,
                    p,
                    bsz,
                    x,
                    (!first).then_some(&h[l][..]),
                    (!first).then_some(&c[l][..]),
                    &mut gates[l],
                    &mut c_new[l],
                    &mut tc[l],
                    &mut h_new[l],
                );
                std::mem::swap(&mut h[l], &mut h_new[l]);
                std::mem::swap(&mut c[l], &mut c_new[l]);
                for (r, v) in here[0].iter_mut().zip(&h[l]) {
                    *r = relu(*v);
                }
            }
        }
        let last = rectified.pop().expect("at least one LSTM layer");
        Ok(self.head(p, bsz, last, None))
    }

    /// Forward pass that records everything the backward pass needs.
    pub(crate) fn forward_tape(&self, p: &[f64], batch: &[&WindowSample]) -> Result<Tape> {
        self.check(batch)?;
        let bsz = batch.len();
        let t_len = self.window_len;
        let mut layers: Vec<LayerTape> = Vec::with_capacity(self.lstm.len());
        for (l, layer) in self.lstm.iter().enumerate() {
            let nh = layer.hidden;
            let inputs = if l == 0 {
                self.first_inputs(batch)
            } else {
                layers[l - 1].hidden.iter().map(|&v| relu(v)).collect()
            };
            let mut tape = LayerTape {
                inputs,
                gates: vec![0.0; t_len * bsz * 4 * nh],
                cells: vec![0.0; t_len * bsz * nh],
                tanh_cells: vec![0.0; t_len * bsz * nh],
                hidden: vec![0.0; t_len * bsz * nh],
            };
            let step = bsz * nh;
            let in_step = bsz * layer.input;
            for t in 0..t_len {
                let (h_done, h_rest) = tape.hidden.split_at_mut(t * step);
                let (c_done, c_rest) = tape.cells.split_at_mut(t * step);
                Self::lstm_step(
                    layer,
                    p,
                    bsz,
                    &tape.inputs[t * in_step..(t + 1) * in_step],
                    (t > 0).then(|| &h_done[(t - 1) * step..]),
                    (t > 0).then(|| &c_done[(t - 1) * step..]),
                    &mut tape.gates[t * 4 * step..(t + 1) * 4 * step],
                    &mut c_rest[..step],
                    &mut tape.tanh_cells[t * step..(t + 1) * step],
                    &mut h_rest[..step],
                );
            }
            layers.push(tape);
        }
        let top = layers.last().expect("at least one LSTM layer");
        let step = bsz * self.lstm.last().unwrap().hidden;
        let last: Vec<f64> = top.hidden[(t_len - 1) * step..]
            .iter()
            .map(|&v| relu(v))
            .collect();
        let mut dense_inputs = Vec::with_capacity(self.dense.len());
        let outputs = self.head(p, bsz, last, Some(&mut dense_inputs));
        Ok(Tape {
            batch: bsz,
            layers,
            dense_inputs,
            outputs,
        })
    }

    /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output).
    pub(crate) fn backward(&self, p: &[f64], tape: &Tape, d_out: &[f64], grad: &mut [f64]) {
        let bsz = tape.batch;
        let t_len = self.window_len;

        // dense head, top to bottom; `delta` is `[unit][b]`
        let mut delta: Vec<f64> = d_out.to_vec();
        for k in (0..self.dense.len()).rev() {
            let d = &self.dense[k];
            let x = &tape.dense_inputs[k];
            let w = &p[d.weight..d.weight + d.output * d.input];
            let mut dx = vec![0.0; bsz * d.input];
            for o in 0..d.output {
                let g = &delta[o * bsz..(o + 1) * bsz];
                grad[d.bias + o] += g.iter().sum::<f64>();
                for i in 0..d.input {
                    let xi = &x[i * bsz..(i + 1) * bsz];
                    grad[d.weight + o * d.input + i] += dot(g, xi);
                    axpy(&mut dx[i * bsz..(i + 1) * bsz], w[o * d.input + i], g);
                }
            }
            // every dense input is a rectifier output
            for (v, &xv) in dx.iter_mut().zip(x) {
                if xv <= 0.0 {
                    *v = 0.0;
                }
            }
            delta = dx;
        }

        // `delta` now holds d(loss)/d(h_T) of the top LSTM layer, masked
        let top = self.lstm.len() - 1;
        let step = bsz * self.lstm[top].hidden;
        let mut dh_seq: Vec<f64> = vec![0.0; t_len * step];
        dh_seq[(t_len - 1) * step..].copy_from_slice(&delta);

        for l in (0..self.lstm.len()).rev() {
            let layer = &self.lstm[l];
            let tape_l = &tape.layers[l];
            let (ni, nh) = (layer.input, layer.hidden);
            let step = bsz * nh;
            let in_step = bsz * ni;
            let w_ih = &p[layer.w_ih..layer.w_ih + 4 * nh * ni];
            let w_hh = &p[layer.w_hh..layer.w_hh + 4 * nh * nh];
            let mut dh_next = vec![0.0; step];
            let mut dc_next = vec![0.0; step];
            let mut dz = vec![0.0; 4 * step];
            let mut dx_seq = if l > 0 {
                vec![0.0; t_len * in_step]
            } else {
                Vec::new()
            };

            for t in (0..t_len).rev() {
                let gates = &tape_l.gates[t * 4 * step..(t + 1) * 4 * step];
                let (gi, gf, gg, go) = (
                    &gates[..step],
                    &gates[step..2 * step],
                    &gates[2 * step..3 * step],
                    &gates[3 * step..],
                );
                let tcs = &tape_l.tanh_cells[t * step..(t + 1) * step];
                let c_prev = (t > 0).then(|| &tape_l.cells[(t - 1) * step..t * step]);
                let dh_in = &dh_seq[t * step..(t + 1) * step];
                {
                    let (zi, rest) = dz.split_at_mut(step);
                    let (zf, rest) = rest.split_at_mut(step);
                    let (zg, zo) = rest.split_at_mut(step);
                    for idx in 0..step {
                        let (i, f, g, o) = (gi[idx], gf[idx], gg[idx], go[idx]);
                        let tc = tcs[idx];
                        let cp = c_prev.map_or(0.0, |c| c[idx]);
                        let dh = dh_in[idx] + dh_next[idx];
                        let dc = dh * o * (1.0 - tc * tc) + dc_next[idx];
                        dc_next[idx] = dc * f;
                        zi[idx] = dc * g * i * (1.0 - i);
                        zf[idx] = dc * cp * f * (1.0 - f);
                        zg[idx] = dc * i * (1.0 - g * g);
                        zo[idx] = dh * tc * o * (1.0 - o);
                    }
                }
                let x_t = &tape_l.inputs[t * in_step..(t + 1) * in_step];
                let h_prev = (t > 0).then(|| &tape_l.hidden[(t - 1) * step..t * step]);
                dh_next.fill(0.0);
                for n in 0..4 * nh {
                    let g = &dz[n * bsz..(n + 1) * bsz];
                    grad[layer.bias + n] += g.iter().sum::<f64>();
                    for k in 0..ni {
                        grad[layer.w_ih + n * ni + k] += dot(g, &x_t[k * bsz..(k + 1) * bsz]);
                    }
                    if let Some(hp) = h_prev {
                        for k in 0..nh {
                            grad[layer.w_hh + n * nh + k] += dot(g, &hp[k * bsz..(k + 1) * bsz]);
                        }
                    }
                    for k in 0..nh {
                        axpy(&mut dh_next[k * bsz..(k + 1) * bsz], w_hh[n * nh + k], g);
                    }
                    if l > 0 {
                        let dx = &mut dx_seq[t * in_step..(t + 1) * in_step];
                        for k in 0..ni {
                            axpy(&mut dx[k * bsz..(k + 1) * bsz], w_ih[n * ni + k], g);
                        }
                    }
                }
            }

            if l > 0 {
                // inputs of layer l are relu(h) of layer l - 1
                for (d, &x) in dx_seq.iter_mut().zip(&tape_l.inputs) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                dh_seq = dx_seq;
            }
        }
    }
}

/// Prediction for a single window, in normalized target units.
pub fn forward(params: &ModelParameters, sample: &WindowSample) -> Result<f64> {
    Ok(forward_batch(params, std::slice::from_ref(sample))?[0])
}

/// Predictions for many windows; equal to calling [`forward`] on each.
pub fn forward_batch(params: &ModelParameters, samples: &[WindowSample]) -> Result<Vec<f64>> {
    let net = Network::new(params.config(), params);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        out.extend(net.infer(&params.values, &refs)?);
    }
    Ok(out)
}
