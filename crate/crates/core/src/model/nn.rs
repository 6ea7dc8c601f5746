//! Minimal f64 neural-net kernels: 3x3 convolutions (im2col + gemm),
//! ReLU, nearest-neighbor upsampling and global average pooling, each with
//! an explicit backward pass. Enough for the bundled toy models; exact
//! gradients are what the attack code consumes.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

/// Feature map layout is `(C, H, W)` throughout.
pub type FeatureMap = Array3<f64>;

/// 3x3 convolution with padding 1 and stride 1 or 2. Weights are stored
/// flattened as `(out_channels, in_channels * 9)` for the gemm path.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Parameter gradients of one convolution.
#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    /// Kaiming-normal initialization.
    pub fn init(in_channels: usize, out_channels: usize, stride: usize, rng: &mut impl Rng) -> Self {
        assert!(stride == 1 || stride == 2);
        let fan_in = (in_channels * 9) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight =
            Array2::from_shape_fn((out_channels, in_channels * 9), |_| std * normal_sample(rng));
        Self {
            weight,
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            stride,
        }
    }

    pub fn zeros_like_grad(&self) -> ConvGrad {
        ConvGrad {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    /// Returns the output map and the im2col matrix needed by `backward`.
    pub fn forward(&self, input: &FeatureMap) -> (FeatureMap, Array2<f64>) {
        let (c, h, w) = input.dim();
        debug_assert_eq!(c, self.in_channels);
        let (ho, wo) = self.out_hw(h, w);
        let cols = im2col(input, self.stride, ho, wo);
        let mut out2d = self.weight.dot(&cols);
        for (mut row, &b) in out2d.outer_iter_mut().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = out2d
            .into_shape_with_order((self.out_channels, ho, wo))
            .expect("conv output reshape");
        (out, cols)
    }

    /// Backward pass. `cols` is the matrix returned by `forward`;
    /// `input_dim` the shape of the forward input. Parameter gradients are
    /// skipped when `param_grads` is None (attack-time input gradients).
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        input_dim: (usize, usize, usize),
        grad_out: &FeatureMap,
        mut param_grads: Option<&mut ConvGrad>,
    ) -> FeatureMap {
        let (o, ho, wo) = grad_out.dim();
        debug_assert_eq!(o, self.out_channels);
        let grad2d = grad_out
            .view()
            .into_shape_with_order((o, ho * wo))
            .expect("grad reshape");
        if let Some(g) = param_grads.as_deref_mut() {
            g.weight += &grad2d.dot(&cols.t());
            g.bias += &grad2d.sum_axis(Axis(1));
        }
        let grad_cols = self.weight.t().dot(&grad2d);
        col2im(&grad_cols, input_dim, self.stride, ho, wo)
    }
}

fn im2col(input: &FeatureMap, stride: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let mut cols = Array2::zeros((c * 9, ho * wo));
    for ch in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ch * 9 + ky * 3 + kx;
                let mut cols_row = cols.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols_row[oy * wo + ox] = input[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    grad_cols: &Array2<f64>,
    input_dim: (usize, usize, usize),
    stride: usize,
    ho: usize,
    wo: usize,
) -> FeatureMap {
    let (c, h, w) = input_dim;
    let mut grad_in = Array3::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ch * 9 + ky * 3 + kx;
                let cols_row = grad_cols.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        grad_in[[ch, iy as usize, ix as usize]] += cols_row[oy * wo + ox];
                    }
                }
            }
        }
    }
    grad_in
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    x.mapv(|v| v.max(0.0))
}

/// `activated` is the ReLU output; its positivity encodes the mask.
pub fn relu_backward(grad: &FeatureMap, activated: &FeatureMap) -> FeatureMap {
    let mut g = grad.clone();
    g.zip_mut_with(activated, |gv, &a| {
        if a <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ch, r, col)| x[[ch, r / 2, col / 2]])
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward(grad: &FeatureMap) -> FeatureMap {
    let (c, h2, w2) = grad.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for r in 0..h2 {
            for col in 0..w2 {
                out[[ch, r / 2, col / 2]] += grad[[ch, r, col]];
            }
        }
    }
    out
}

/// Mean over the spatial extent of each channel.
pub fn global_avg_pool(x: &FeatureMap) -> Array1<f64> {
    let (_c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    Array1::from_iter(
        x.outer_iter()
            .map(|plane| plane.iter().sum::<f64>() * scale),
    )
}

pub fn global_avg_pool_backward(grad: &Array1<f64>, dim: (usize, usize, usize)) -> FeatureMap {
    let (c, h, w) = dim;
    let scale = 1.0 / (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(ch, _, _)| grad[ch] * scale)
}

/// Fully connected layer for the classifier head.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn init(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / in_features as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((out_features, in_features), |_| {
                std * normal_sample(rng)
            }),
            bias: Array1::zeros(out_features),
        }
    }

    pub fn zeros_like_grad(&self) -> LinearGrad {
        LinearGrad {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(
        &self,
        x: &Array1<f64>,
        grad_out: &Array1<f64>,
        mut param_grads: Option<&mut LinearGrad>,
    ) -> Array1<f64> {
        if let Some(g) = param_grads.as_deref_mut() {
            for (i, &go) in grad_out.iter().enumerate() {
                for (j, &xv) in x.iter().enumerate() {
                    g.weight[[i, j]] += go * xv;
                }
                g.bias[i] += go;
            }
        }
        self.weight.t().dot(grad_out)
    }
}

/// Box-Muller standard normal draw; keeps the RNG stream portable.
fn normal_sample(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check of the full conv backward (input side).
    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        for stride in [1usize, 2] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let conv = Conv2d::init(2, 3, stride, &mut rng);
            let x = rand_map(2, 8, 8, 11);
            let (y, cols) = conv.forward(&x);
            // Scalar objective: sum of squares of outputs.
            let grad_out = y.mapv(|v| 2.0 * v);
            let gin = conv.backward(&cols, x.dim(), &grad_out, None);
            let h = 1e-6;
            for &(c, r, col) in &[(0usize, 0usize, 0usize), (1, 3, 4), (0, 7, 7), (1, 5, 0)] {
                let mut xp = x.clone();
                xp[[c, r, col]] += h;
                let (yp, _) = conv.forward(&xp);
                let mut xm = x.clone();
                xm[[c, r, col]] -= h;
                let (ym, _) = conv.forward(&xm);
                let fd = (yp.mapv(|v| v * v).sum() - ym.mapv(|v| v * v).sum()) / (2.0 * h);
                let an = gin[[c, r, col]];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "stride {stride}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut conv = Conv2d::init(2, 2, 1, &mut rng);
        let x = rand_map(2, 6, 6, 5);
        let (y, cols) = conv.forward(&x);
        let grad_out = y.mapv(|v| 2.0 * v);
        let mut grads = conv.zeros_like_grad();
        conv.backward(&cols, x.dim(), &grad_out, Some(&mut grads));
        let h = 1e-6;
        for &(o, k) in &[(0usize, 0usize), (1, 9), (1, 17), (0, 5)] {
            let orig = conv.weight[[o, k]];
            conv.weight[[o, k]] = orig + h;
            let (yp, _) = conv.forward(&x);
            conv.weight[[o, k]] = orig - h;
            let (ym, _) = conv.forward(&x);
            conv.weight[[o, k]] = orig;
            let fd = (yp.mapv(|v| v * v).sum() - ym.mapv(|v| v * v).sum()) / (2.0 * h);
            let an = grads.weight[[o, k]];
            assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), "fd {fd} vs {an}");
        }
        // Bias gradient.
        let orig = conv.bias[1];
        conv.bias[1] = orig + h;
        let (yp, _) = conv.forward(&x);
        conv.bias[1] = orig - h;
        let (ym, _) = conv.forward(&x);
        conv.bias[1] = orig;
        let fd = (yp.mapv(|v| v * v).sum() - ym.mapv(|v| v * v).sum()) / (2.0 * h);
        assert!((fd - grads.bias[1]).abs() <= 1e-5 * (1.0 + fd.abs()));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        // <up(x), y> must equal <x, up_backward(y)>.
        let x = rand_map(2, 4, 4, 3);
        let y = rand_map(2, 8, 8, 4);
        let lhs = (&upsample2(&x) * &y).sum();
        let rhs = (&x * &upsample2_backward(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn global_pool_backward_is_adjoint() {
        let x = rand_map(3, 4, 4, 7);
        let g = Array1::from_vec(vec![0.3, -1.0, 2.0]);
        let lhs = global_avg_pool(&x).dot(&g);
        let rhs = (&x * &global_avg_pool_backward(&g, x.dim())).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::init(5, 3, &mut rng);
        let x = Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0));
        let y = lin.forward(&x);
        let grad_out = y.mapv(|v| 2.0 * v);
        let gin = lin.backward(&x, &grad_out, None);
        let h = 1e-6;
        for j in 0..5 {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fd = (lin.forward(&xp).mapv(|v| v * v).sum()
                - lin.forward(&xm).mapv(|v| v * v).sum())
                / (2.0 * h);
            assert!((fd - gin[j]).abs() < 1e-6 * (1.0 + gin[j].abs()));
        }
    }

    #[test]
    fn stride2_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::init(1, 1, 2, &mut rng);
        assert_eq!(conv.out_hw(64, 64), (32, 32));
        assert_eq!(conv.out_hw(16, 16), (8, 8));
    }
}
