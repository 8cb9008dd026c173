use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{dropout_mask, join, scaled_uniform, shape_err, standard, Layer, Mode, Parameterized};
use crate::error::Result;
use crate::scalar::Scalar;

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Unidirectional LSTM. Gate blocks are laid out `[input, forget, cell, output]`
/// along the `4H` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<T: Scalar> {
    /// `in × 4H`
    pub w_in: Array2<T>,
    /// `H × 4H`
    pub w_rec: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug)]
pub struct LstmCache<T> {
    input: Array2<T>,
    /// post-activation gates, `T × 4H`
    gates: Array2<T>,
    cell: Array2<T>,
    tanh_cell: Array2<T>,
    /// recurrent input actually fed at step t (masked `h_{t−1}`)
    rec_in: Array2<T>,
    rec_mask: Option<Array1<T>>,
}

impl<T: Scalar> Lstm<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let limit = 1.0 / (hidden as f64).sqrt();
        let w_in = scaled_uniform(rng, inputs * 4 * hidden, limit);
        let w_rec = scaled_uniform(rng, hidden * 4 * hidden, limit);
        let mut bias = Array1::zeros(4 * hidden);
        bias.slice_mut(s![hidden..2 * hidden]).fill(T::one());
        Lstm {
            w_in: Array2::from_shape_vec((inputs, 4 * hidden), w_in).expect("lstm shape"),
            w_rec: Array2::from_shape_vec((hidden, 4 * hidden), w_rec).expect("lstm shape"),
            bias,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Lstm {
            w_in: Array2::zeros(self.w_in.dim()),
            w_rec: Array2::zeros(self.w_rec.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_rec.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.w_in.nrows()
    }

    /// Run over `(time, inputs)`; `rec_mask` multiplies `h_{t−1}` before the
    /// recurrent product at every step.
    pub fn run(&self, input: ArrayView2<T>, rec_mask: Option<Array1<T>>) -> (Array2<T>, LstmCache<T>) {
        let steps = input.nrows();
        let h = self.hidden();
        let h4 = 4 * h;
        let mut xproj = input.dot(&self.w_in);
        xproj += &self.bias;
        let xproj = xproj.as_standard_layout().into_owned();
        let xp = xproj.as_slice().expect("standard layout");
        let w_rec = self.w_rec.as_standard_layout();
        let w_rec = w_rec.as_slice().expect("standard layout");

        let mut gates = Array2::zeros((steps, h4));
        let mut cell = Array2::zeros((steps, h));
        let mut tanh_cell = Array2::zeros((steps, h));
        let mut hidden = Array2::zeros((steps, h));
        let mut rec_in = Array2::zeros((steps, h));
        {
            let g = gates.as_slice_mut().expect("fresh array");
            let c_all = cell.as_slice_mut().expect("fresh array");
            let tc_all = tanh_cell.as_slice_mut().expect("fresh array");
            let h_all = hidden.as_slice_mut().expect("fresh array");
            let r_all = rec_in.as_slice_mut().expect("fresh array");
            let mask = rec_mask.as_ref().map(|m| m.to_vec());
            let mut z = vec![T::zero(); h4];
            for t in 0..steps {
                z.copy_from_slice(&xp[t * h4..(t + 1) * h4]);
                if t > 0 {
                    for k in 0..h {
                        let mut r = h_all[(t - 1) * h + k];
                        if let Some(m) = &mask {
                            r *= m[k];
                        }
                        r_all[t * h + k] = r;
                        let row = &w_rec[k * h4..(k + 1) * h4];
                        for (zj, &w) in z.iter_mut().zip(row) {
                            *zj += r * w;
                        }
                    }
                }
                let gt = &mut g[t * h4..(t + 1) * h4];
                for j in 0..h {
                    let i_g = sigmoid(z[j]);
                    let f_g = sigmoid(z[h + j]);
                    let c_g = z[2 * h + j].tanh();
                    let o_g = sigmoid(z[3 * h + j]);
                    gt[j] = i_g;
                    gt[h + j] = f_g;
                    gt[2 * h + j] = c_g;
                    gt[3 * h + j] = o_g;
                    let c_prev = if t > 0 { c_all[(t - 1) * h + j] } else { T::zero() };
                    let c = f_g * c_prev + i_g * c_g;
                    let tc = c.tanh();
                    c_all[t * h + j] = c;
                    tc_all[t * h + j] = tc;
                    h_all[t * h + j] = o_g * tc;
                }
            }
        }
        let cache = LstmCache {
            input: input.to_owned(),
            gates,
            cell,
            tanh_cell,
            rec_in,
            rec_mask,
        };
        (hidden, cache)
    }

    /// Backpropagation through time from `d(loss)/d(h_t)` for every step.
    pub fn run_backward(&self, cache: &LstmCache<T>, grad_hidden: ArrayView2<T>) -> (Array2<T>, Lstm<T>) {
        let steps = cache.input.nrows();
        let h = self.hidden();
        let h4 = 4 * h;
        let one = T::one();
        let w_rec = self.w_rec.as_standard_layout();
        let w_rec = w_rec.as_slice().expect("standard layout");
        let gh = grad_hidden.as_standard_layout();
        let gh = gh.as_slice().expect("standard layout");
        let g = cache.gates.as_slice().expect("standard layout");
        let c_all = cache.cell.as_slice().expect("standard layout");
        let tc_all = cache.tanh_cell.as_slice().expect("standard layout");
        let mask = cache.rec_mask.as_ref().map(|m| m.to_vec());

        let mut dz = Array2::zeros((steps, h4));
        {
            let dz_all = dz.as_slice_mut().expect("fresh array");
            let mut dh_next = vec![T::zero(); h];
            let mut dc_next = vec![T::zero(); h];
            for t in (0..steps).rev() {
                let gt = &g[t * h4..(t + 1) * h4];
                let dzr = &mut dz_all[t * h4..(t + 1) * h4];
                for j in 0..h {
                    let (i_g, f_g, c_g, o_g) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                    let tc = tc_all[t * h + j];
                    let c_prev = if t > 0 { c_all[(t - 1) * h + j] } else { T::zero() };
                    let dh = gh[t * h + j] + dh_next[j];
                    let d_o = dh * tc;
                    let dc = dc_next[j] + dh * o_g * (one - tc * tc);
                    dzr[j] = dc * c_g * i_g * (one - i_g);
                    dzr[h + j] = dc * c_prev * f_g * (one - f_g);
                    dzr[2 * h + j] = dc * i_g * (one - c_g * c_g);
                    dzr[3 * h + j] = d_o * o_g * (one - o_g);
                    dc_next[j] = dc * f_g;
                }
                for k in 0..h {
                    let row = &w_rec[k * h4..(k + 1) * h4];
                    let mut acc = T::zero();
                    for (&w, &d) in row.iter().zip(dzr.iter()) {
                        acc += w * d;
                    }
                    if let Some(m) = &mask {
                        acc *= m[k];
                    }
                    dh_next[k] = acc;
                }
            }
        }

        let grads = Lstm {
            w_in: standard(cache.input.t().dot(&dz)),
            w_rec: standard(cache.rec_in.t().dot(&dz)),
            bias: dz.sum_axis(Axis(0)),
        };
        (dz.dot(&self.w_in.t()), grads)
    }
}

impl<T: Scalar> Parameterized<T> for Lstm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "w_in"), self.w_in.shape(), self.w_in.as_slice().expect("contiguous"));
        f(&join(prefix, "w_rec"), self.w_rec.shape(), self.w_rec.as_slice().expect("contiguous"));
        f(&join(prefix, "bias"), self.bias.shape(), self.bias.as_slice().expect("contiguous"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let shapes = [self.w_in.shape().to_vec(), self.w_rec.shape().to_vec(), self.bias.shape().to_vec()];
        f(&join(prefix, "w_in"), &shapes[0], self.w_in.as_slice_mut().expect("contiguous"));
        f(&join(prefix, "w_rec"), &shapes[1], self.w_rec.as_slice_mut().expect("contiguous"));
        f(&join(prefix, "bias"), &shapes[2], self.bias.as_slice_mut().expect("contiguous"));
    }
}

/// Bidirectional LSTM. With `return_sequences` the output is `(time, 2H)`
/// (forward and backward states concatenated per frame); otherwise it is a
/// single `(1, 2H)` row holding the last forward state and the backward state
/// at the first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm<T: Scalar> {
    pub fwd: Lstm<T>,
    pub bwd: Lstm<T>,
    pub return_sequences: bool,
    pub recurrent_dropout: f64,
}

#[derive(Debug)]
pub struct BiLstmCache<T> {
    fwd: LstmCache<T>,
    bwd: LstmCache<T>,
}

impl<T: Scalar> BiLstm<T> {
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        hidden: usize,
        return_sequences: bool,
        recurrent_dropout: f64,
        rng: &mut R,
    ) -> Self {
        BiLstm {
            fwd: Lstm::new(inputs, hidden, rng),
            bwd: Lstm::new(inputs, hidden, rng),
            return_sequences,
            recurrent_dropout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        BiLstm {
            fwd: self.fwd.zeros_like(),
            bwd: self.bwd.zeros_like(),
            ..*self
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }

    pub fn output_width(&self) -> usize {
        2 * self.hidden()
    }
}

impl<T: Scalar> Layer<T> for BiLstm<T> {
    type Input = Array2<T>;
    type Output = Array2<T>;
    type Cache = BiLstmCache<T>;
    type Grads = BiLstm<T>;

    fn name(&self) -> &'static str {
        "bilstm"
    }

    fn forward(&self, input: &Array2<T>, mode: &mut Mode) -> Result<(Array2<T>, BiLstmCache<T>)> {
        if input.ncols() != self.fwd.inputs() || input.nrows() == 0 {
            return Err(shape_err("bilstm", ("T>0", self.fwd.inputs()), input.dim()));
        }
        let h = self.hidden();
        let (mf, mb) = match mode.rng() {
            Some(rng) if self.recurrent_dropout > 0.0 => (
                Some(dropout_mask(rng, h, self.recurrent_dropout)),
                Some(dropout_mask(rng, h, self.recurrent_dropout)),
            ),
            _ => (None, None),
        };
        let steps = input.nrows();
        let (hf, cf) = self.fwd.run(input.view(), mf);
        let (hb, cb) = self.bwd.run(input.slice(s![..;-1, ..]), mb);
        let out = if self.return_sequences {
            let mut out = Array2::zeros((steps, 2 * h));
            out.slice_mut(s![.., ..h]).assign(&hf);
            out.slice_mut(s![.., h..]).assign(&hb.slice(s![..;-1, ..]));
            out
        } else {
            let mut out = Array2::zeros((1, 2 * h));
            out.slice_mut(s![0, ..h]).assign(&hf.row(steps - 1));
            out.slice_mut(s![0, h..]).assign(&hb.row(steps - 1));
            out
        };
        Ok((out, BiLstmCache { fwd: cf, bwd: cb }))
    }

    fn backward(&self, cache: &BiLstmCache<T>, grad_out: &Array2<T>) -> Result<(Array2<T>, BiLstm<T>)> {
        let steps = cache.fwd.input.nrows();
        let h = self.hidden();
        let expected = (if self.return_sequences { steps } else { 1 }, 2 * h);
        if grad_out.dim() != expected {
            return Err(shape_err("bilstm", expected, grad_out.dim()));
        }
        let (dhf, dhb) = if self.return_sequences {
            (
                grad_out.slice(s![.., ..h]).to_owned(),
                grad_out.slice(s![..;-1, h..]).to_owned(),
            )
        } else {
            let mut dhf = Array2::zeros((steps, h));
            let mut dhb = Array2::zeros((steps, h));
            dhf.row_mut(steps - 1).assign(&grad_out.slice(s![0, ..h]));
            dhb.row_mut(steps - 1).assign(&grad_out.slice(s![0, h..]));
            (dhf, dhb)
        };
        let (dxf, gf) = self.fwd.run_backward(&cache.fwd, dhf.view());
        let (dxb, gb) = self.bwd.run_backward(&cache.bwd, dhb.view());
        let dx = dxf + dxb.slice(s![..;-1, ..]);
        Ok((
            dx,
            BiLstm {
                fwd: gf,
                bwd: gb,
                ..*self
            },
        ))
    }
}

impl<T: Scalar> Parameterized<T> for BiLstm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.fwd.visit(&join(prefix, "fwd"), f);
        self.bwd.visit(&join(prefix, "bwd"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.fwd.visit_mut(&join(prefix, "fwd"), f);
        self.bwd.visit_mut(&join(prefix, "bwd"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = BiLstm::<f64>::new(3, 4, true, 0.0, &mut rng);
        layer.fill_zero();
        let x = Array2::from_shape_fn((6, 3), |(t, i)| (t as f64 - i as f64) * 0.7);
        let (y, _) = layer.forward(&x, &mut Mode::Eval).unwrap();
        assert_eq!(y.dim(), (6, 8));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn final_vector_shape_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seq = BiLstm::<f64>::new(2, 3, true, 0.0, &mut rng);
        let last = BiLstm {
            return_sequences: false,
            ..seq.clone()
        };
        let x = Array2::from_shape_fn((5, 2), |(t, i)| ((t * 2 + i) as f64).cos());
        let (ys, _) = seq.forward(&x, &mut Mode::Eval).unwrap();
        let (yl, _) = last.forward(&x, &mut Mode::Eval).unwrap();
        assert_eq!(yl.dim(), (1, 6));
        for j in 0..3 {
            assert_eq!(yl[[0, j]], ys[[4, j]]);
            assert_eq!(yl[[0, 3 + j]], ys[[0, 3 + j]]);
        }
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = Lstm::<f32>::new(2, 4, &mut rng);
        assert!(l.bias.slice(s![4..8]).iter().all(|&v| v == 1.0));
        assert!(l.bias.slice(s![..4]).iter().all(|&v| v == 0.0));
    }
}
