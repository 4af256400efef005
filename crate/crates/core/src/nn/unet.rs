use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    concat, conv1x1_backward, conv1x1_forward, conv3x3_backward, conv3x3_forward, maxpool2_backward,
    maxpool2_forward, relu_backward_inplace, relu_inplace, split, upconv2_backward, upconv2_forward,
};
use super::tensor::{Scalar, Tensor};
use super::{NnError, ParamBlock, UNetConfig};

/// Nonlinearity after each 3x3 conv. `Identity` exists for the gradient
/// checker, where it makes the network piecewise multilinear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Kaiming-uniform weights in `[-b, b]`, `b = sqrt(6 / fan_in)`; zero biases.
/// Weights are drawn in canonical order from a ChaCha8 stream seeded by `seed`.
pub fn unet_init<T: Scalar>(cfg: &UNetConfig, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![T::zero(); cfg.param_count()];
    for block in cfg.blocks() {
        let bound = (6.0 / block.fan_in() as f64).sqrt();
        let (w, _) = block.split_mut(&mut params);
        for v in w {
            *v = T::of(rng.random_range(-bound..=bound));
        }
    }
    params
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    config: UNetConfig,
    activation: Activation,
    param_len: usize,
    input: Tensor<T>,
    /// Per encoder level: conv1 output, conv2 output (the skip), pool argmax, pooled.
    enc: Vec<EncLevel<T>>,
    bottleneck: [Tensor<T>; 2],
    /// Per decoder level (indexed by level): concat input, conv1 output, conv2 output.
    dec: Vec<DecLevel<T>>,
    pub scores: Tensor<T>,
}

#[derive(Debug, Clone)]
struct EncLevel<T> {
    a1: Tensor<T>,
    a2: Tensor<T>,
    arg: Vec<u8>,
    pooled: Tensor<T>,
}

#[derive(Debug, Clone)]
struct DecLevel<T> {
    cat: Tensor<T>,
    d1: Tensor<T>,
    d2: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Which piece of the piecewise-linear network this forward landed on:
    /// the sign of every ReLU output and every pooling argmax.
    pub fn switch_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut signs = |t: &Tensor<T>| {
            if self.activation == Activation::Relu {
                out.extend(t.data.iter().map(|&v| u8::from(v > T::zero())));
            }
        };
        for e in &self.enc {
            signs(&e.a1);
            signs(&e.a2);
        }
        signs(&self.bottleneck[0]);
        signs(&self.bottleneck[1]);
        for d in &self.dec {
            signs(&d.d1);
            signs(&d.d2);
        }
        for e in &self.enc {
            out.extend_from_slice(&e.arg);
        }
        out
    }
}

fn conv_act<T: Scalar>(x: &Tensor<T>, b: &ParamBlock, p: &[T], act: Activation) -> Tensor<T> {
    let mut y = conv3x3_forward(x, b.weights(p), b.bias(p));
    if act == Activation::Relu {
        relu_inplace(&mut y);
    }
    y
}

fn check_params<T>(cfg: &UNetConfig, params: &[T]) -> Result<(), NnError> {
    let expected = cfg.param_count();
    if params.len() != expected {
        return Err(NnError::ParamLength {
            expected,
            found: params.len(),
        });
    }
    Ok(())
}

/// Runs the network on one `in_channels x H x W` input and returns the
/// cache; the two-plane score map is `cache.scores`.
pub fn unet_forward<T: Scalar>(
    params: &[T],
    cfg: &UNetConfig,
    input: &Tensor<T>,
    activation: Activation,
) -> Result<ForwardCache<T>, NnError> {
    cfg.validate()?;
    check_params(cfg, params)?;
    if input.planes != cfg.in_channels {
        return Err(NnError::DimensionMismatch(format!(
            "input has {} planes, config expects {}",
            input.planes, cfg.in_channels
        )));
    }
    cfg.check_input(input.width, input.height)?;
    let layout = cfg.layout();

    let mut enc = Vec::with_capacity(cfg.depth);
    for blocks in &layout.encoder {
        let x = enc.last().map_or(input, |e: &EncLevel<T>| &e.pooled);
        let a1 = conv_act(x, &blocks[0], params, activation);
        let a2 = conv_act(&a1, &blocks[1], params, activation);
        let (pooled, arg) = maxpool2_forward(&a2);
        enc.push(EncLevel { a1, a2, arg, pooled });
    }
    let b1 = conv_act(&enc[cfg.depth - 1].pooled, &layout.bottleneck[0], params, activation);
    let b2 = conv_act(&b1, &layout.bottleneck[1], params, activation);

    let mut dec_rev: Vec<DecLevel<T>> = Vec::with_capacity(cfg.depth);
    for level in (0..cfg.depth).rev() {
        let blocks = &layout.decoder[level];
        let below = dec_rev.last().map_or(&b2, |d| &d.d2);
        let up = upconv2_forward(below, blocks[0].weights(params), blocks[0].bias(params));
        let cat = concat(&up, &enc[level].a2);
        let d1 = conv_act(&cat, &blocks[1], params, activation);
        let d2 = conv_act(&d1, &blocks[2], params, activation);
        dec_rev.push(DecLevel { cat, d1, d2 });
    }
    dec_rev.reverse();
    let head = &layout.head;
    let scores = conv1x1_forward(&dec_rev[0].d2, head.weights(params), head.bias(params));

    Ok(ForwardCache {
        config: *cfg,
        activation,
        param_len: params.len(),
        input: input.clone(),
        enc,
        bottleneck: [b1, b2],
        dec: dec_rev,
        scores,
    })
}

fn conv_act_backward<T: Scalar>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    mut grad: Tensor<T>,
    block: &ParamBlock,
    params: &[T],
    grads: &mut [T],
    act: Activation,
    want_input: bool,
) -> Option<Tensor<T>> {
    if act == Activation::Relu {
        relu_backward_inplace(output, &mut grad);
    }
    let (gw, gb) = block.split_mut(grads);
    conv3x3_backward(input, block.weights(params), &grad, gw, gb, want_input)
}

/// Exact gradient of the loss with respect to every parameter, in canonical
/// order, given `dL/dscores` for the cached forward call.
pub fn unet_backward<T: Scalar>(
    cache: &ForwardCache<T>,
    params: &[T],
    cfg: &UNetConfig,
    grad_scores: &Tensor<T>,
) -> Result<Vec<T>, NnError> {
    if cache.config != *cfg || cache.param_len != params.len() {
        return Err(NnError::StaleCache("config or parameter length differs".into()));
    }
    check_params(cfg, params)?;
    let s = &cache.scores;
    if (grad_scores.planes, grad_scores.width, grad_scores.height) != (s.planes, s.width, s.height) {
        return Err(NnError::StaleCache(format!(
            "score gradient is {}x{}x{}, cached scores are {}x{}x{}",
            grad_scores.planes, grad_scores.width, grad_scores.height, s.planes, s.width, s.height
        )));
    }
    let act = cache.activation;
    let layout = cfg.layout();
    let mut grads = vec![T::zero(); params.len()];

    let head = &layout.head;
    let mut g = {
        let (gw, gb) = head.split_mut(&mut grads);
        conv1x1_backward(&cache.dec[0].d2, head.weights(params), grad_scores, gw, gb)
    };

    // decoder, shallow to deep (reverse of execution order)
    let mut skip_grads = Vec::with_capacity(cfg.depth);
    for level in 0..cfg.depth {
        let blocks = &layout.decoder[level];
        let d = &cache.dec[level];
        let g_d1 = conv_act_backward(&d.d1, &d.d2, g, &blocks[2], params, &mut grads, act, true)
            .expect("input grad requested");
        let g_cat = conv_act_backward(&d.cat, &d.d1, g_d1, &blocks[1], params, &mut grads, act, true)
            .expect("input grad requested");
        let up_ch = blocks[0].out_ch;
        let (g_up, g_skip) = split(&g_cat, up_ch);
        skip_grads.push(g_skip);
        let below = if level + 1 == cfg.depth {
            &cache.bottleneck[1]
        } else {
            &cache.dec[level + 1].d2
        };
        let (gw, gb) = blocks[0].split_mut(&mut grads);
        g = upconv2_backward(below, blocks[0].weights(params), &g_up, gw, gb);
    }

    let [b1, b2] = &cache.bottleneck;
    let deepest = &cache.enc[cfg.depth - 1].pooled;
    let g_b1 = conv_act_backward(b1, b2, g, &layout.bottleneck[1], params, &mut grads, act, true)
        .expect("input grad requested");
    let mut g_x = conv_act_backward(deepest, b1, g_b1, &layout.bottleneck[0], params, &mut grads, act, true);

    for level in (0..cfg.depth).rev() {
        let e = &cache.enc[level];
        let blocks = &layout.encoder[level];
        let mut g_a2 = maxpool2_backward(
            &g_x.take().expect("pooled grad"),
            &e.arg,
            e.a2.width,
            e.a2.height,
        );
        for (a, &b) in g_a2.data.iter_mut().zip(&skip_grads[level].data) {
            *a += b;
        }
        let g_a1 = conv_act_backward(&e.a1, &e.a2, g_a2, &blocks[1], params, &mut grads, act, true)
            .expect("input grad requested");
        let x = if level == 0 {
            &cache.input
        } else {
            &cache.enc[level - 1].pooled
        };
        g_x = conv_act_backward(x, &e.a1, g_a1, &blocks[0], params, &mut grads, act, level > 0);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::conv3x3_forward;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = UNetConfig::new(2, 4);
        let a = unet_init::<f64>(&cfg, 5);
        assert_eq!(a, unet_init::<f64>(&cfg, 5));
        assert_ne!(a, unet_init::<f64>(&cfg, 6));
        for b in cfg.blocks() {
            let bound = (6.0 / b.fan_in() as f64).sqrt();
            assert!(b.weights(&a).iter().all(|w| w.abs() <= bound));
            assert!(b.bias(&a).iter().all(|&v| v == 0.0));
            let max = b.weights(&a).iter().fold(0.0f64, |m, w| m.max(w.abs()));
            assert!(max > 0.5 * bound, "weights should span the range");
        }
        let f = unet_init::<f32>(&cfg, 5);
        for b in cfg.blocks() {
            let bound = (6.0 / b.fan_in() as f64).sqrt();
            assert!(b.weights(&f).iter().all(|w| (w.abs() as f64) <= bound * (1.0 + 1e-6)));
        }
    }

    #[test]
    fn zero_params_give_zero_scores() {
        let cfg = UNetConfig::new(2, 3);
        let params = vec![0.0f32; cfg.param_count()];
        let input = Tensor::from_vec(3, 8, 8, (0..192).map(|i| i as f32 / 192.0).collect());
        let c = unet_forward(&params, &cfg, &input, Activation::Relu).unwrap();
        assert!(c.scores.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_input() {
        for (depth, base, w, h) in [(1, 1, 2, 2), (2, 2, 8, 4), (3, 4, 16, 24)] {
            let cfg = UNetConfig::new(depth, base);
            let params = unet_init::<f32>(&cfg, 1);
            let input = Tensor::zeros(3, w, h);
            let c = unet_forward(&params, &cfg, &input, Activation::Relu).unwrap();
            assert_eq!((c.scores.planes, c.scores.width, c.scores.height), (2, w, h));
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = UNetConfig::new(2, 2);
        let params = unet_init::<f32>(&cfg, 1);
        let bad = Tensor::zeros(3, 6, 8);
        assert!(matches!(
            unet_forward(&params, &cfg, &bad, Activation::Relu),
            Err(NnError::IndivisibleInput { .. })
        ));
        assert!(matches!(
            unet_forward(&params, &cfg, &Tensor::zeros(1, 8, 8), Activation::Relu),
            Err(NnError::DimensionMismatch(_))
        ));
        assert!(matches!(
            unet_forward(&params[1..], &cfg, &Tensor::zeros(3, 8, 8), Activation::Relu),
            Err(NnError::ParamLength { .. })
        ));
    }

    /// Independent scalar evaluation of the depth-1 / base-1 network, written
    /// pixel by pixel from the architecture description.
    fn tiny_forward_by_hand(p: &[f64], img: &Tensor<f64>) -> Vec<f64> {
        let (w, h) = (img.width, img.height);
        let relu = |v: f64| v.max(0.0);
        // 3x3 zero-padded conv of a list of planes into one plane
        let conv = |planes: &[Vec<f64>], pw: usize, ph: usize, weights: &[f64], bias: f64| {
            let mut out = vec![0.0; pw * ph];
            for y in 0..ph {
                for x in 0..pw {
                    let mut acc = bias;
                    for (c, plane) in planes.iter().enumerate() {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = x as isize + kx as isize - 1;
                                if sy >= 0 && sx >= 0 && (sy as usize) < ph && (sx as usize) < pw {
                                    acc += weights[c * 9 + ky * 3 + kx]
                                        * plane[sy as usize * pw + sx as usize];
                                }
                            }
                        }
                    }
                    out[y * pw + x] = relu(acc);
                }
            }
            out
        };
        let planes: Vec<Vec<f64>> = (0..3).map(|c| img.plane(c).to_vec()).collect();
        let mut o = 0;
        let mut take = |n: usize| {
            let s = &p[o..o + n];
            o += n;
            s.to_vec()
        };
        let (e1w, e1b) = (take(27), take(1));
        let (e2w, e2b) = (take(9), take(1));
        let (b1w, b1b) = (take(18), take(2));
        let (b2w, b2b) = (take(36), take(2));
        let (uw, ub) = (take(8), take(1));
        let (d1w, d1b) = (take(18), take(1));
        let (d2w, d2b) = (take(9), take(1));
        let (hw, hb) = (take(2), take(2));

        let a1 = conv(&planes, w, h, &e1w, e1b[0]);
        let a2 = conv(&[a1], w, h, &e2w, e2b[0]);
        let (pw, ph) = (w / 2, h / 2);
        let mut pooled = vec![0.0; pw * ph];
        for y in 0..ph {
            for x in 0..pw {
                let i = 2 * y * w + 2 * x;
                pooled[y * pw + x] = a2[i].max(a2[i + 1]).max(a2[i + w]).max(a2[i + w + 1]);
            }
        }
        let b1: Vec<Vec<f64>> = (0..2)
            .map(|oc| conv(std::slice::from_ref(&pooled), pw, ph, &b1w[oc * 9..oc * 9 + 9], b1b[oc]))
            .collect();
        let b2: Vec<Vec<f64>> = (0..2)
            .map(|oc| conv(&b1, pw, ph, &b2w[oc * 18..oc * 18 + 18], b2b[oc]))
            .collect();
        let mut up = vec![ub[0]; w * h];
        for (ic, plane) in b2.iter().enumerate() {
            for y in 0..ph {
                for x in 0..pw {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            up[(2 * y + dy) * w + 2 * x + dx] += uw[ic * 4 + dy * 2 + dx] * plane[y * pw + x];
                        }
                    }
                }
            }
        }
        let d1 = conv(&[up, a2], w, h, &d1w, d1b[0]);
        let d2 = conv(&[d1], w, h, &d2w, d2b[0]);
        let mut out = Vec::with_capacity(2 * w * h);
        for oc in 0..2 {
            out.extend(d2.iter().map(|&v| hb[oc] + hw[oc] * v));
        }
        out
    }

    #[test]
    fn tiny_net_matches_scalar_trace() {
        let cfg = UNetConfig::new(1, 1);
        let mut params = unet_init::<f64>(&cfg, 17);
        for (i, b) in cfg.blocks().iter().enumerate() {
            for (j, v) in params[b.bias_range()].iter_mut().enumerate() {
                *v = 0.05 * (i as f64 - 3.0) + 0.01 * j as f64;
            }
        }
        let img = Tensor::from_vec(3, 4, 4, (0..48).map(|i| ((i * 37 % 17) as f64) / 17.0 - 0.4).collect());
        let cache = unet_forward(&params, &cfg, &img, Activation::Relu).unwrap();
        let expected = tiny_forward_by_hand(&params, &img);
        for (a, b) in cache.scores.data.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_kernels_pass_input_through() {
        // Hand-set depth-1/base-1 net: every 3x3 conv is a center tap, the
        // decoder ignores the upsampled path, so scores = (R channel) on s1
        // and its negation on s0.
        let cfg = UNetConfig::new(1, 1);
        let mut p = vec![0.0f64; cfg.param_count()];
        let l = cfg.layout();
        p[l.encoder[0][0].offset + 4] = 1.0; // R plane center tap
        p[l.encoder[0][1].offset + 4] = 1.0;
        let d1 = l.decoder[0][1];
        p[d1.offset + 9 + 4] = 1.0; // skip half of the concat
        p[l.decoder[0][2].offset + 4] = 1.0;
        let head = l.head;
        p[head.offset] = -1.0;
        p[head.offset + 1] = 1.0;
        let img = Tensor::from_vec(
            3,
            4,
            4,
            (0..48).map(|i| if i < 16 { i as f64 / 16.0 } else { 0.3 }).collect(),
        );
        let cache = unet_forward(&p, &cfg, &img, Activation::Relu).unwrap();
        let r = img.plane(0);
        assert_eq!(cache.scores.plane(1), r);
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        assert_eq!(cache.scores.plane(0), &neg[..]);
        // sanity for the helper used above
        let c = conv3x3_forward(&Tensor::from_vec(1, 2, 1, vec![1.0, 2.0]), &[0., 0., 0., 0., 1., 0., 0., 0., 0.], &[0.0]);
        assert_eq!(c.data, vec![1.0, 2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let cfg = UNetConfig::new(2, 2);
        let params = unet_init::<f64>(&cfg, 3);
        let img = Tensor::from_vec(3, 8, 8, (0..192).map(|i| (i as f64 * 0.37).sin()).collect());
        let cache = unet_forward(&params, &cfg, &img, Activation::Relu).unwrap();
        let g = unet_backward(&cache, &params, &cfg, &Tensor::zeros(2, 8, 8)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_bias_gradient_is_channel_sum() {
        let cfg = UNetConfig::new(2, 2);
        let params = unet_init::<f64>(&cfg, 3);
        let img = Tensor::from_vec(3, 8, 8, (0..192).map(|i| (i as f64 * 0.71).cos()).collect());
        let cache = unet_forward(&params, &cfg, &img, Activation::Relu).unwrap();
        let up = Tensor::from_vec(2, 8, 8, (0..128).map(|i| (i as f64 * 0.13).sin()).collect());
        let g = unet_backward(&cache, &params, &cfg, &up).unwrap();
        let head = cfg.layout().head;
        for (c, &gb) in g[head.bias_range()].iter().enumerate() {
            let sum: f64 = up.plane(c).iter().sum();
            assert!((gb - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = UNetConfig::new(2, 2);
        let params = unet_init::<f64>(&cfg, 3);
        let cache = unet_forward(&params, &cfg, &Tensor::zeros(3, 8, 8), Activation::Relu).unwrap();
        let other = UNetConfig::new(2, 3);
        let p2 = unet_init::<f64>(&other, 3);
        assert!(matches!(
            unet_backward(&cache, &p2, &other, &Tensor::zeros(2, 8, 8)),
            Err(NnError::StaleCache(_))
        ));
        assert!(matches!(
            unet_backward(&cache, &params, &cfg, &Tensor::zeros(2, 4, 4)),
            Err(NnError::StaleCache(_))
        ));
    }
}
