//! Fully connected networks with hand-written backward passes.
//!
//! Activations are row-major batches (`B × width`). A layer computes
//! `x · W + b` with `W` stored as `fan_in × fan_out`; ReLU sits between
//! consecutive layers and never after the last one.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Norms at or below this are treated as zero by the normalizers.
pub const TINY_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Gaussian weights with std `1/sqrt(fan_in)`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut StreamRng) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
            let z: f64 = rng.sample(StandardNormal);
            std * z
        });
        Linear {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

/// A stack of linear layers with ReLU in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Encoder `f`: input features to the representation used by the memory bank.
pub type EncoderParams = Mlp;
/// Projection head `g`: representation to the clustering embedding.
pub type HeadParams = Mlp;

/// Values saved by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Mlp {
    /// Layer widths `dims[0] → dims[1] → … → dims[last]`.
    pub fn init(dims: &[usize], rng: &mut StreamRng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("bad layer widths {dims:?}")));
        }
        Ok(Mlp {
            layers: dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect(),
        })
    }

    /// Single linear layer with identity weight and zero bias.
    pub fn identity(dim: usize) -> Self {
        Mlp {
            layers: vec![Linear {
                weight: Array2::eye(dim),
                bias: Array1::zeros(dim),
            }],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        for pair in self.layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::DimensionMismatch {
                    context: "layer chain",
                    expected: pair[0].fan_out(),
                    found: pair[1].fan_in(),
                });
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::DimensionMismatch {
                    context: "layer bias",
                    expected: l.fan_out(),
                    found: l.bias.len(),
                });
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameters".into()));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                h.mapv_inplace(relu);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.weight) + &layer.bias;
            inputs.push(h);
            if i < last {
                h = z.mapv(relu);
                pre_activations.push(z);
            } else {
                h = z;
            }
        }
        Ok((
            h,
            MlpCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the network input.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_output: &Array2<f64>,
        grads: &mut Mlp,
    ) -> Result<Array2<f64>> {
        if cache.inputs.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                context: "backward layer count",
                expected: self.layers.len(),
                found: cache.inputs.len(),
            });
        }
        let batch = cache.inputs[0].nrows();
        if grad_output.dim() != (batch, self.output_dim()) {
            return Err(Error::DimensionMismatch {
                context: "backward output gradient",
                expected: batch * self.output_dim(),
                found: grad_output.len(),
            });
        }
        let mut g = grad_output.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let gl = &mut grads.layers[i];
            gl.weight += &cache.inputs[i].t().dot(&g);
            gl.bias += &g.sum_axis(Axis(0));
            g = g.dot(&layer.weight.t());
            if i > 0 {
                Zip::from(&mut g)
                    .and(&cache.pre_activations[i - 1])
                    .for_each(|gv, &z| {
                        if z <= 0.0 {
                            *gv = 0.0;
                        }
                    });
            }
        }
        Ok(g)
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// `v / ‖v‖`; fails when `‖v‖ ≤ TINY_NORM`.
pub fn l2_normalize(v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !(norm > TINY_NORM) {
        return Err(Error::DegenerateEmbedding {
            context: "vector",
            row: 0,
            norm,
        });
    }
    Ok(v.mapv(|x| x / norm))
}

/// Row-normalized copy of `x` together with the original row norms.
pub fn normalize_rows(x: &Array2<f64>, context: &'static str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some((row, &norm)) = norms.iter().enumerate().find(|(_, n)| !(**n > TINY_NORM)) {
        return Err(Error::DegenerateEmbedding { context, row, norm });
    }
    let mut out = x.clone();
    for (mut r, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        r.mapv_inplace(|v| v / n);
    }
    Ok((out, norms))
}

/// Backward of [`normalize_rows`]: `dx = (dy − y·(y·dy)) / ‖x‖` per row.
pub fn normalize_rows_backward(
    normalized: &Array2<f64>,
    norms: &Array1<f64>,
    grad: &Array2<f64>,
) -> Array2<f64> {
    let mut out = grad.clone();
    for ((mut o, y), &n) in out
        .rows_mut()
        .into_iter()
        .zip(normalized.rows())
        .zip(norms.iter())
    {
        let proj = y.dot(&o);
        Zip::from(&mut o).and(&y).for_each(|ov, &yv| *ov = (*ov - yv * proj) / n);
    }
    out
}

/// Uniform access to the flat parameter blocks of a model, in a fixed order.
pub trait ParamBlocks {
    fn block_names(&self) -> Vec<String>;
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;
}

impl ParamBlocks for Mlp {
    fn block_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}

/// SGD hyperparameters (learning rate is passed per step for scheduling).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Classic momentum: `v ← μv + (g + λp)`, `p ← p − lr·v`.
///
/// `velocity` has the same shape as `params` and carries over between calls.
/// All gradients are checked for finiteness before anything is modified.
pub fn sgd_step<P: ParamBlocks>(
    params: &mut P,
    grads: &P,
    velocity: &mut P,
    lr: f64,
    cfg: &SgdConfig,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr}")));
    }
    if !(0.0..1.0).contains(&cfg.momentum) || !(cfg.weight_decay >= 0.0) {
        return Err(Error::invalid(format!("bad optimizer config {cfg:?}")));
    }
    let names = params.block_names();
    let g_blocks = grads.blocks();
    if g_blocks.len() != names.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient block count",
            expected: names.len(),
            found: g_blocks.len(),
        });
    }
    for (name, g) in names.iter().zip(&g_blocks) {
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient block {name} (entry {pos} = {})",
                g[pos]
            )));
        }
    }
    let p_blocks = params.blocks_mut();
    let v_blocks = velocity.blocks_mut();
    for (((name, p), g), v) in names.iter().zip(p_blocks).zip(g_blocks).zip(v_blocks) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::invalid(format!("shape mismatch in block {name}")));
        }
        for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = cfg.momentum * *vv + (gv + cfg.weight_decay * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use ndarray::array;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut StreamRng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
    }

    // Straight-line evaluation of x·W + b with ReLU, written without ndarray matmul.
    fn reference_forward(net: &Mlp, x: &Array2<f64>) -> Array2<f64> {
        let mut h: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        for (li, layer) in net.layers.iter().enumerate() {
            h = h
                .iter()
                .map(|row| {
                    (0..layer.fan_out())
                        .map(|o| {
                            let mut s = layer.bias[o];
                            for (i, &v) in row.iter().enumerate() {
                                s += v * layer.weight[[i, o]];
                            }
                            if li + 1 < net.layers.len() {
                                s.max(0.0)
                            } else {
                                s
                            }
                        })
                        .collect()
                })
                .collect();
        }
        let cols = h[0].len();
        Array2::from_shape_vec((h.len(), cols), h.concat()).unwrap()
    }

    #[test]
    fn identity_network_passes_input_through() {
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, -0.25]];
        let net = Mlp::identity(3);
        assert_eq!(net.predict(&x).unwrap(), x);
        assert_eq!(net.forward(&x).unwrap().0, x);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let mut rng = rng::stream(1, Stream::Init, 0);
        let net = Mlp::init(&[4, 6, 3], &mut rng).unwrap();
        let out = net.predict(&Array2::zeros((5, 4))).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_reference_evaluation() {
        let mut rng = rng::stream(2, Stream::Init, 0);
        for dims in [[5, 7, 3], [3, 16, 8]] {
            let mut net = Mlp::init(&dims, &mut rng).unwrap();
            for l in &mut net.layers {
                l.bias = Array1::from_shape_simple_fn(l.fan_out(), || rng.sample(StandardNormal));
            }
            let x = rand_matrix(6, dims[0], &mut rng);
            let got = net.forward(&x).unwrap().0;
            let want = reference_forward(&net, &x);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Mlp::identity(3);
        assert!(matches!(
            net.forward(&Array2::zeros((2, 4))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(array![3.0, 4.0].view()).unwrap();
        assert_eq!(v, array![0.6, 0.8]);
        let u = array![0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(u.view()).unwrap(), u);
        assert!(matches!(
            l2_normalize(array![0.0, 0.0].view()),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let mut rng = rng::stream(3, Stream::Init, 0);
        let net = Mlp::init(&[4, 5, 2], &mut rng).unwrap();
        let x = rand_matrix(3, 4, &mut rng);
        let (_, cache) = net.forward(&x).unwrap();
        let mut grads = net.zeros_like();
        let gin = net.backward(&cache, &Array2::zeros((3, 2)), &mut grads).unwrap();
        assert!(gin.iter().all(|&v| v == 0.0));
        assert!(grads.blocks().iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_is_linear_in_output_gradient() {
        let mut rng = rng::stream(4, Stream::Init, 0);
        let net = Mlp::init(&[3, 6, 2], &mut rng).unwrap();
        let x = rand_matrix(5, 3, &mut rng);
        let g = rand_matrix(5, 2, &mut rng);
        let (_, cache) = net.forward(&x).unwrap();
        let mut g1 = net.zeros_like();
        let mut g2 = net.zeros_like();
        net.backward(&cache, &g, &mut g1).unwrap();
        net.backward(&cache, &(&g * 2.0), &mut g2).unwrap();
        for (a, b) in g1.blocks().iter().zip(g2.blocks()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // scalar loss: sum of w ⊙ normalize_rows(net(x))
        let mut rng = rng::stream(5, Stream::Init, 0);
        let mut net = Mlp::init(&[4, 8, 3], &mut rng).unwrap();
        for layer in &mut net.layers {
            let n = layer.bias.len();
            layer.bias = rand_matrix(1, n, &mut rng).row(0).to_owned();
        }
        let x = rand_matrix(10, 4, &mut rng);
        let w = rand_matrix(10, 3, &mut rng);
        let loss = |net: &Mlp| -> f64 {
            let (y, _) = normalize_rows(&net.predict(&x).unwrap(), "test").unwrap();
            (&y * &w).sum()
        };
        let (out, cache) = net.forward(&x).unwrap();
        let (y, norms) = normalize_rows(&out, "test").unwrap();
        let gout = normalize_rows_backward(&y, &norms, &w);
        let mut grads = net.zeros_like();
        net.backward(&cache, &gout, &mut grads).unwrap();

        let analytic: Vec<Vec<f64>> = grads.blocks().iter().map(|b| b.to_vec()).collect();
        let h = 1e-5;
        for (bi, block) in analytic.iter().enumerate() {
            for (j, &a) in block.iter().enumerate() {
                let orig = net.blocks()[bi][j];
                net.blocks_mut()[bi][j] = orig + h;
                let lp = loss(&net);
                net.blocks_mut()[bi][j] = orig - h;
                let lm = loss(&net);
                net.blocks_mut()[bi][j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err <= 1e-4, "block {bi} entry {j}: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn sgd_zero_gradient_or_zero_lr_keeps_params() {
        let mut rng = rng::stream(6, Stream::Init, 0);
        let net = Mlp::init(&[3, 2], &mut rng).unwrap();
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = net.clone();
        let mut v = net.zeros_like();
        sgd_step(&mut p, &net.zeros_like(), &mut v, 0.1, &cfg).unwrap();
        assert_eq!(p, net);

        let mut grads = net.zeros_like();
        grads.layers[0].weight.fill(3.0);
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-3,
        };
        sgd_step(&mut p, &grads, &mut v, 0.0, &cfg).unwrap();
        assert_eq!(p, net);
    }

    #[test]
    fn sgd_quadratic_converges_monotonically() {
        // loss = ½ a (w − w*)², gradient a (w − w*); without momentum the
        // error contracts by (1 − lr·a) each step.
        let a = 2.0;
        let target = 1.5;
        let lr = 0.1;
        let mut p = Mlp {
            layers: vec![Linear {
                weight: array![[0.0]],
                bias: array![0.0],
            }],
        };
        let mut v = p.zeros_like();
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut prev = (p.layers[0].weight[[0, 0]] - target).abs();
        for step in 1..=50 {
            let mut g = p.zeros_like();
            g.layers[0].weight[[0, 0]] = a * (p.layers[0].weight[[0, 0]] - target);
            sgd_step(&mut p, &g, &mut v, lr, &cfg).unwrap();
            let err = (p.layers[0].weight[[0, 0]] - target).abs();
            let closed_form = target * (1.0 - lr * a).powi(step);
            assert!(err < prev);
            assert!((err - closed_form).abs() < 1e-12);
            prev = err;
        }
    }

    #[test]
    fn sgd_rejects_non_finite_gradient_by_name() {
        let mut p = Mlp::identity(2);
        let mut v = p.zeros_like();
        let mut g = p.zeros_like();
        g.layers[0].bias[1] = f64::NAN;
        let err = sgd_step(
            &mut p,
            &g,
            &mut v,
            0.1,
            &SgdConfig {
                momentum: 0.0,
                weight_decay: 0.0,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer0.bias"), "{err}");
        assert_eq!(p, Mlp::identity(2));
    }
}
