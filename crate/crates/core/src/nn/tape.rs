//! Reverse-mode differentiation over a recorded sequence of tensor ops.
//!
//! Every op appends a node holding its output; [`Tape::backward`] walks the
//! nodes in reverse and accumulates vector-Jacobian products. Losses are
//! attached by seeding gradients on output nodes, so any scalar objective
//! whose derivative with respect to those outputs is known can be pulled
//! back to the leaves.
//!
//! Image tensors are `batch × height × width × channels`. Per-sample work
//! runs in parallel; weight gradients are reduced in batch order so results
//! are bitwise reproducible regardless of thread count.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize },
    Relu { input: Var },
    Upsample { input: Var, factor: usize },
    Softmax { input: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("variable {} is not on this tape", var.0)));
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Same-padded convolution with weights `k × k × c_in × c_out`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias), stride)?;
        Ok(self.push(out, Op::Conv2d { input, weight, bias, stride }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let data = x.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Relu { input }))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centres, edge clamp).
    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        self.check(input)?;
        let out = upsample_forward(self.value(input), factor)?;
        Ok(self.push(out, Op::Upsample { input, factor }))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let out = softmax_last_axis(self.value(input))?;
        Ok(self.push(out, Op::Softmax { input }))
    }

    /// Pulls the seeded output gradients back through the tape.
    pub fn backward(&self, seeds: &[(Var, &Tensor)]) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward called before any forward computation"));
        }
        if seeds.is_empty() {
            return Err(Error::invalid("backward needs at least one seeded output"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for &(var, g) in seeds {
            self.check(var)?;
            if g.shape() != self.value(var).shape() {
                return Err(Error::shape(format!(
                    "seed gradient {:?} for output {:?}",
                    g.shape(),
                    self.value(var).shape()
                )));
            }
            accumulate(&mut grads[var.0], g.clone());
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match self.nodes[idx].op {
                Op::Leaf => {}
                Op::Relu { input } => {
                    let x = self.value(input);
                    let data = x.data().iter().zip(g.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
                    accumulate(&mut grads[input.0], Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::Softmax { input } => {
                    let p = &self.nodes[idx].value;
                    let k = *p.shape().last().expect("non-empty shape");
                    let mut data = vec![0.0; p.len()];
                    for ((dx, p), g) in data.chunks_mut(k).zip(p.data().chunks(k)).zip(g.data().chunks(k)) {
                        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                        for c in 0..k {
                            dx[c] = p[c] * (g[c] - dot);
                        }
                    }
                    accumulate(&mut grads[input.0], Tensor::new(p.shape().to_vec(), data)?);
                }
                Op::Upsample { input, factor } => {
                    let gx = upsample_backward(&g, self.value(input).shape(), factor)?;
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Conv2d { input, weight, bias, stride } => {
                    let (gx, gw, gb) = conv2d_backward(self.value(input), self.value(weight), &g, stride)?;
                    accumulate(&mut grads[input.0], gx);
                    accumulate(&mut grads[weight.0], gw);
                    accumulate(&mut grads[bias.0], gb);
                }
            }
            // Leaf gradients are the result; keep them.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, var: Var, like: &[usize]) -> Tensor {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn conv_geometry(x: &Tensor, w: &Tensor, stride: usize) -> Result<ConvGeom> {
    let (b, h, wd, ci) = x.dims4()?;
    let (k, k2, wci, co) = w.dims4()?;
    if k != k2 || k % 2 == 0 {
        return Err(Error::shape(format!("kernel must be square and odd, got {k}x{k2}")));
    }
    if wci != ci {
        return Err(Error::shape(format!("input has {ci} channels, kernel expects {wci}")));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    Ok(ConvGeom { b, h, w: wd, ci, k, co, pad, stride, ho, wo })
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    k: usize,
    co: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Input coordinate read by output `o` at kernel offset `kk`, if in bounds.
    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk).checked_sub(self.pad)?;
        (pos < extent).then_some(pos)
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv_geometry(x, w, stride)?;
    if bias.shape() != [g.co] {
        return Err(Error::shape(format!("bias {:?} for {} output channels", bias.shape(), g.co)));
    }
    let in_stride = g.h * g.w * g.ci;
    let out_stride = g.ho * g.wo * g.co;
    let mut out = vec![0.0; g.b * out_stride];
    let (xd, wdat, bd) = (x.data(), w.data(), bias.data());
    out.par_chunks_mut(out_stride).enumerate().for_each(|(n, out)| {
        let xin = &xd[n * in_stride..(n + 1) * in_stride];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = &mut out[(oy * g.wo + ox) * g.co..(oy * g.wo + ox + 1) * g.co];
                o.copy_from_slice(bd);
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let px = &xin[(iy * g.w + ix) * g.ci..(iy * g.w + ix + 1) * g.ci];
                        let wbase = (ky * g.k + kx) * g.ci * g.co;
                        for (c, &xv) in px.iter().enumerate() {
                            let wrow = &wdat[wbase + c * g.co..wbase + (c + 1) * g.co];
                            for (acc, &wv) in o.iter_mut().zip(wrow) {
                                *acc += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![g.b, g.ho, g.wo, g.co], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, gout: &Tensor, stride: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geometry(x, w, stride)?;
    let in_stride = g.h * g.w * g.ci;
    let out_stride = g.ho * g.wo * g.co;
    let (xd, wdat, god) = (x.data(), w.data(), gout.data());

    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..g.b)
        .into_par_iter()
        .map(|n| {
            let xin = &xd[n * in_stride..(n + 1) * in_stride];
            let go_n = &god[n * out_stride..(n + 1) * out_stride];
            let mut gx = vec![0.0; in_stride];
            let mut gw = vec![0.0; wdat.len()];
            let mut gb = vec![0.0; g.co];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let go = &go_n[(oy * g.wo + ox) * g.co..(oy * g.wo + ox + 1) * g.co];
                    for (acc, &v) in gb.iter_mut().zip(go) {
                        *acc += v;
                    }
                    for ky in 0..g.k {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for kx in 0..g.k {
                            let Some(ix) = g.src(ox, kx, g.w) else { continue };
                            let pbase = (iy * g.w + ix) * g.ci;
                            let wbase = (ky * g.k + kx) * g.ci * g.co;
                            for c in 0..g.ci {
                                let wrow = &wdat[wbase + c * g.co..wbase + (c + 1) * g.co];
                                let gwrow = &mut gw[wbase + c * g.co..wbase + (c + 1) * g.co];
                                let xv = xin[pbase + c];
                                let mut dot = 0.0;
                                for ((gwv, &wv), &gv) in gwrow.iter_mut().zip(wrow).zip(go) {
                                    *gwv += xv * gv;
                                    dot += wv * gv;
                                }
                                gx[pbase + c] += dot;
                            }
                        }
                    }
                }
            }
            (gx, gw, gb)
        })
        .collect();

    let mut gx = Vec::with_capacity(g.b * in_stride);
    let mut gw = vec![0.0; wdat.len()];
    let mut gb = vec![0.0; g.co];
    for (sx, sw, sb) in per_sample {
        gx.extend(sx);
        for (a, b) in gw.iter_mut().zip(&sw) {
            *a += b;
        }
        for (a, b) in gb.iter_mut().zip(&sb) {
            *a += b;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(vec![g.co], gb)?,
    ))
}

/// For each output coordinate: the two source taps and the weight of the second.
fn bilinear_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn upsample_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsampling factor must be positive"));
    }
    let (b, h, w, c) = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(oh, h, factor);
    let tx = bilinear_taps(ow, w, factor);
    let xd = x.data();
    let mut out = vec![0.0; b * oh * ow * c];
    for n in 0..b {
        let base = n * h * w * c;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let o = ((n * oh + oy) * ow + ox) * c;
                let at = |yy: usize, xx: usize| base + (yy * w + xx) * c;
                let (a, bb, cc, d) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                let (w00, w01, w10, w11) = ((1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx);
                for ch in 0..c {
                    out[o + ch] = w00 * xd[a + ch] + w01 * xd[bb + ch] + w10 * xd[cc + ch] + w11 * xd[d + ch];
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, c], out)
}

fn upsample_backward(gout: &Tensor, in_shape: &[usize], factor: usize) -> Result<Tensor> {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(oh, h, factor);
    let tx = bilinear_taps(ow, w, factor);
    let gd = gout.data();
    let mut gx = vec![0.0; b * h * w * c];
    for n in 0..b {
        let base = n * h * w * c;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let o = ((n * oh + oy) * ow + ox) * c;
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                for (yy, xx, wt) in taps {
                    let i = base + (yy * w + xx) * c;
                    for ch in 0..c {
                        gx[i + ch] += wt * gd[o + ch];
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx)
}

/// Max-subtracted softmax over the trailing axis.
pub fn softmax_last_axis(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::Numerical("softmax input contains non-finite values".into()));
    }
    let k = *x.shape().last().expect("tensors have rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn random(shape: &[usize], seed: &mut u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| lcg(seed)).collect()).unwrap()
    }

    /// Direct definition of a same-padded convolution.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Vec<f64> {
        let (n, h, wd, ci) = x.dims4().unwrap();
        let (k, _, _, co) = w.dims4().unwrap();
        let pad = k as isize / 2;
        let ho = (h + 2 * pad as usize - k) / stride + 1;
        let wo = (wd + 2 * pad as usize - k) / stride + 1;
        let mut out = Vec::new();
        for bn in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for o in 0..co {
                        let mut s = b.data()[o];
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad;
                                let ix = (ox * stride + kx) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for c in 0..ci {
                                    let xv = x.data()[((bn * h + iy as usize) * wd + ix as usize) * ci + c];
                                    let wv = w.data()[((ky * k + kx) * ci + c) * co + o];
                                    s += xv * wv;
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut seed = 3;
        let x = random(&[2, 6, 6, 3], &mut seed);
        let w = random(&[3, 3, 3, 4], &mut seed);
        let b = random(&[4], &mut seed);
        for stride in [1, 2] {
            let out = conv2d_forward(&x, &w, &b, stride).unwrap();
            let expect = conv_oracle(&x, &w, &b, stride);
            for (a, e) in out.data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    /// Scalar probe `Σ seed · out` and its finite-difference derivative.
    fn probe_check(build: impl Fn(&mut Tape, &[Tensor]) -> Var, inputs: Vec<Tensor>) {
        let mut seed = 99;
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &inputs);
        let dir = random(tape.value(out).shape(), &mut seed);
        let grads = tape.backward(&[(out, &dir)]).unwrap();
        let _ = leaves;
        let objective = |inputs: &[Tensor]| {
            let mut t = Tape::new();
            for x in inputs {
                t.leaf(x.clone());
            }
            let o = build(&mut t, inputs);
            t.value(o).data().iter().zip(dir.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for (li, input) in inputs.iter().enumerate() {
            let analytic = grads.get(Var(li)).unwrap();
            for idx in 0..input.len() {
                let mut plus = inputs.clone();
                plus[li].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[li].data_mut()[idx] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                assert!((a - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "input {li} idx {idx}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut seed = 7;
        let inputs = vec![random(&[2, 4, 4, 2], &mut seed), random(&[3, 3, 2, 3], &mut seed), random(&[3], &mut seed)];
        for stride in [1, 2] {
            probe_check(move |t, _| t.conv2d(Var(0), Var(1), Var(2), stride).unwrap(), inputs.clone());
        }
    }

    #[test]
    fn upsample_and_softmax_gradients() {
        let mut seed = 11;
        probe_check(|t, _| t.upsample(Var(0), 4).unwrap(), vec![random(&[1, 2, 3, 2], &mut seed)]);
        probe_check(|t, _| t.softmax(Var(0)).unwrap(), vec![random(&[2, 3, 4], &mut seed)]);
    }

    #[test]
    fn upsample_preserves_constants_and_shape() {
        let x = Tensor::new(vec![1, 2, 2, 1], vec![0.5; 4]).unwrap();
        let y = upsample_forward(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8, 1]);
        assert!(y.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn backward_requires_forward() {
        let tape = Tape::new();
        assert!(tape.backward(&[]).is_err());
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(&[(v, &Tensor::zeros(&[3]))]).is_err());
        assert!(tape.backward(&[(Var(5), &Tensor::zeros(&[2]))]).is_err());
    }

    #[test]
    fn relu_gradient_masks_negative_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        let g = tape.backward(&[(y, &Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap())]).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0]);
    }
}
