//! MiniBackbone: a three-conv encoder/decoder around the expert stage.
//!
//! The encoder lifts an RGB image to a C-channel feature map (3x3 conv,
//! relu, 3x3 conv); the decoder maps features back to a 3-channel
//! correction added onto the input image, so zero features decode to
//! the input unchanged. Parameters are He-uniform initialized from the
//! run seed with zero biases, and the whole struct is clone-snapshotted
//! to serve as a distillation teacher.

use crate::error::Result;
use crate::graph::{Graph, Padding, Var};
use crate::rng::CounterRng;
use crate::tensor::{sha256_hex, Tensor};

pub const DEFAULT_WIDTH: usize = 16;

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub enc1_w: Tensor,
    pub enc1_b: Tensor,
    pub enc2_w: Tensor,
    pub enc2_b: Tensor,
    pub dec_w: Tensor,
    pub dec_b: Tensor,
    pub width: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneVars {
    pub enc1_w: Var,
    pub enc1_b: Var,
    pub enc2_w: Var,
    pub enc2_b: Var,
    pub dec_w: Var,
    pub dec_b: Var,
}

pub(crate) fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut CounterRng) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.range(-bound, bound)).collect())
}

impl BackboneParams {
    pub fn init(width: usize, rng: &mut CounterRng) -> Result<BackboneParams> {
        Ok(BackboneParams {
            enc1_w: he_uniform(vec![width, 3, 3, 3], 3 * 9, rng)?,
            enc1_b: Tensor::param(vec![width], vec![0.0; width])?,
            enc2_w: he_uniform(vec![width, width, 3, 3], width * 9, rng)?,
            enc2_b: Tensor::param(vec![width], vec![0.0; width])?,
            // Zero-init so the decode residual starts as the exact
            // identity — restoration learns a correction on top of the
            // input instead of first unlearning a random projection.
            dec_w: Tensor::param(vec![3, width, 3, 3], vec![0.0; 3 * width * 9])?,
            dec_b: Tensor::param(vec![3], vec![0.0; 3])?,
            width,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BackboneVars {
        let mut put = |t: &Tensor| if trainable { g.leaf(t) } else { g.frozen_leaf(t) };
        BackboneVars {
            enc1_w: put(&self.enc1_w),
            enc1_b: put(&self.enc1_b),
            enc2_w: put(&self.enc2_w),
            enc2_b: put(&self.enc2_b),
            dec_w: put(&self.dec_w),
            dec_b: put(&self.dec_b),
        }
    }

    pub fn absorb_grads(&mut self, g: &Graph, vars: &BackboneVars) {
        for (t, v) in [
            (&mut self.enc1_w, vars.enc1_w),
            (&mut self.enc1_b, vars.enc1_b),
            (&mut self.enc2_w, vars.enc2_w),
            (&mut self.enc2_b, vars.enc2_b),
            (&mut self.dec_w, vars.dec_w),
            (&mut self.dec_b, vars.dec_b),
        ] {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad);
            }
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.enc1_w, &self.enc1_b, &self.enc2_w, &self.enc2_b, &self.dec_w, &self.dec_b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.enc1_w,
            &mut self.enc1_b,
            &mut self.enc2_w,
            &mut self.enc2_b,
            &mut self.dec_w,
            &mut self.dec_b,
        ]
    }

    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for t in self.tensors() {
            bytes.extend_from_slice(&t.encode_dlt());
        }
        sha256_hex(&bytes)
    }

    /// Encoder features for a batch, outside any training graph.
    pub fn encode_tensor(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.frozen_leaf(image);
        let vars = self.bind(&mut g, false);
        let f = encode(&mut g, &vars, x)?;
        Ok(g.to_tensor(f))
    }
}

/// conv 3→C, relu, conv C→C. Feature statistics feed the valve, so no
/// trailing relu — a one-sided distribution would flatten skewness.
pub fn encode(g: &mut Graph, vars: &BackboneVars, image: Var) -> Result<Var> {
    let h = g.conv2d(image, vars.enc1_w, Padding::Same)?;
    let h = g.bias_add(h, vars.enc1_b)?;
    let h = g.relu(h);
    let h = g.conv2d(h, vars.enc2_w, Padding::Same)?;
    g.bias_add(h, vars.enc2_b)
}

/// Global-residual head: input_image + conv(features). Zero features
/// reproduce the input exactly.
pub fn decode(g: &mut Graph, vars: &BackboneVars, features: Var, input_image: Var) -> Result<Var> {
    let c = g.conv2d(features, vars.dec_w, Padding::Same)?;
    let c = g.bias_add(c, vars.dec_b)?;
    g.add(input_image, c)
}

/// Evaluation-time clamp; never applied inside loss computation.
pub fn clamp01(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
        .expect("clamp preserves shape and finiteness")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{self, zero_grads};

    fn forward_once(params: &BackboneParams, image: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let x = g.frozen_leaf(image);
        let vars = params.bind(&mut g, false);
        let f = encode(&mut g, &vars, x).unwrap();
        let y = decode(&mut g, &vars, f, x).unwrap();
        (g.to_tensor(f), g.to_tensor(y))
    }

    #[test]
    fn zero_image_encodes_to_zero_features() {
        let mut rng = CounterRng::keyed(11, &[0]);
        let params = BackboneParams::init(8, &mut rng).unwrap();
        let zero = Tensor::zeros(vec![1, 3, 6, 6]);
        let (f, _) = forward_once(&params, &zero);
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn same_seed_reproduces_params_and_features_bitwise() {
        let make = || {
            let mut rng = CounterRng::keyed(12, &[1]);
            BackboneParams::init(8, &mut rng).unwrap()
        };
        let (a, b) = (make(), make());
        assert_eq!(a.digest(), b.digest());

        let mut rng = CounterRng::keyed(13, &[2]);
        let img = Tensor::new(
            vec![2, 3, 8, 8],
            (0..2 * 3 * 64).map(|_| rng.range(0.0, 1.0)).collect(),
        )
        .unwrap();
        let fa = a.encode_tensor(&img).unwrap();
        let fb = b.encode_tensor(&img).unwrap();
        assert_eq!(fa.data(), fb.data());
        assert_eq!(fa.shape(), &[2, 8, 8, 8]);
    }

    #[test]
    fn zero_features_decode_to_the_input_exactly() {
        let mut rng = CounterRng::keyed(14, &[3]);
        let params = BackboneParams::init(8, &mut rng).unwrap();
        let img = Tensor::new(
            vec![1, 3, 5, 7],
            (0..105).map(|_| rng.range(0.0, 1.0)).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.frozen_leaf(&img);
        let vars = params.bind(&mut g, false);
        let zero_f = g.constant(vec![1, 8, 5, 7], vec![0.0; 8 * 35]).unwrap();
        let y = decode(&mut g, &vars, zero_f, x).unwrap();
        assert_eq!(g.value(y), img.data());
    }

    #[test]
    fn shapes_survive_the_round_trip() {
        let mut rng = CounterRng::keyed(15, &[4]);
        let params = BackboneParams::init(16, &mut rng).unwrap();
        let img = Tensor::zeros(vec![2, 3, 32, 32]);
        let (f, y) = forward_once(&params, &img);
        assert_eq!(f.shape(), &[2, 16, 32, 32]);
        assert_eq!(y.shape(), &[2, 3, 32, 32]);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let mut rng = CounterRng::keyed(16, &[5]);
        let params = BackboneParams::init(8, &mut rng).unwrap();
        let bad = Tensor::zeros(vec![1, 4, 8, 8]);
        assert!(params.encode_tensor(&bad).is_err());
    }

    #[test]
    fn encode_decode_gradients_match_finite_differences() {
        let mut rng = CounterRng::keyed(19, &[6]);
        let mut params = BackboneParams::init(4, &mut rng).unwrap();
        // The decoder is zero at birth, which would zero every encoder
        // gradient; perturb it so the check exercises the full path.
        for v in params.dec_w.data_mut() {
            *v = rng.range(-0.3, 0.3);
        }
        let img = Tensor::param(
            vec![1, 3, 6, 6],
            (0..108).map(|_| rng.range(0.0, 1.0)).collect(),
        )
        .unwrap();
        let mut inputs = vec![img];
        inputs.extend(params.tensors().into_iter().cloned());
        let rep = crate::gradcheck::check_scalar_fn(&inputs, |g, vs| {
            let vars = BackboneVars {
                enc1_w: vs[1],
                enc1_b: vs[2],
                enc2_w: vs[3],
                enc2_b: vs[4],
                dec_w: vs[5],
                dec_b: vs[6],
            };
            let f = encode(g, &vars, vs[0])?;
            let y = decode(g, &vars, f, vs[0])?;
            // Smooth head: |y| would put a kink wherever an output
            // element sits within the probe step of zero.
            Ok(g.square_sum(y))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn two_hundred_steps_on_one_pair_reduce_l1_over_every_fifty_step_window() {
        let mut rng = CounterRng::keyed(18, &[7]);
        let mut params = BackboneParams::init(8, &mut rng).unwrap();
        let clean = Tensor::new(
            vec![1, 3, 8, 8],
            (0..192).map(|i| 0.2 + 0.6 * ((i % 8) as f64) / 7.0).collect(),
        )
        .unwrap();
        // Hazy version of the same ramp.
        let degraded = Tensor::new(
            vec![1, 3, 8, 8],
            clean.data().iter().map(|v| v * 0.5 + 0.8 * 0.5).collect(),
        )
        .unwrap();

        let total = 200;
        let mut opt = optim::OptimizerState::adam(1e-2, total).unwrap();
        let mut losses = Vec::with_capacity(total);
        for _ in 0..total {
            let mut g = Graph::new();
            let x = g.frozen_leaf(&degraded);
            let target = g.frozen_leaf(&clean);
            let vars = params.bind(&mut g, true);
            let f = encode(&mut g, &vars, x).unwrap();
            let y = decode(&mut g, &vars, f, x).unwrap();
            let diff = g.sub(y, target).unwrap();
            let l1_sum = g.abs_sum(diff);
            let loss = g.scale(l1_sum, 1.0 / 192.0).unwrap();
            losses.push(g.scalar_value(loss));
            g.backward(loss).unwrap();
            params.absorb_grads(&g, &vars);
            {
                let mut ts = params.tensors_mut();
                opt.adam_step(&mut ts).unwrap();
                zero_grads(&mut ts);
            }
        }
        // Starts at the raw degradation error thanks to the identity
        // birth, then falls an order of magnitude. Adam oscillates once
        // the loss is tiny, so no per-window monotonicity here.
        assert!(losses[0] > 0.1, "expected identity start, got {}", losses[0]);
        assert!(losses[total - 1] < 0.02, "final loss {}", losses[total - 1]);
        assert!(losses[total - 1] < losses[0] / 10.0);
    }
}
