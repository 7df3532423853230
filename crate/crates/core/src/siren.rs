//! The sinusoidal coordinate network: sizing from a byte budget,
//! initialization, forward evaluation and analytic gradients for every
//! parameter including the per-layer trainable frequency.
//!
//! Hidden layer `l` computes `sin(omega_l * (W_l a + b_l))`; the final
//! layer is affine. Training math runs in double precision; storage is
//! single precision.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{InifError, Result};

/// Fixed network depth (number of weight layers).
pub const DEPTH: usize = 7;

/// Initial frequency of the first layer.
pub const OMEGA0_FIRST: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SirenArchitecture {
    pub in_dim: usize,
    pub out_dim: usize,
    pub depth: usize,
    pub hidden: usize,
    /// Initial frequency per layer.
    pub omega0: Vec<f64>,
}

impl SirenArchitecture {
    pub fn new(in_dim: usize, out_dim: usize, depth: usize, hidden: usize) -> Result<Self> {
        if depth < 2 || hidden < 1 || in_dim < 1 || out_dim < 1 {
            return Err(InifError::InvalidArgument(format!(
                "bad architecture: in {in_dim}, out {out_dim}, depth {depth}, hidden {hidden}"
            )));
        }
        let mut omega0 = vec![1.0; depth];
        omega0[0] = OMEGA0_FIRST;
        Ok(SirenArchitecture {
            in_dim,
            out_dim,
            depth,
            hidden,
            omega0,
        })
    }

    pub fn fan_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.in_dim
        } else {
            self.hidden
        }
    }

    pub fn fan_out(&self, layer: usize) -> usize {
        if layer == self.depth - 1 {
            self.out_dim
        } else {
            self.hidden
        }
    }

    /// Total trainable parameter count: weights, biases, one frequency per
    /// layer.
    pub fn param_count(&self) -> usize {
        (0..self.depth)
            .map(|l| self.fan_out(l) * (self.fan_in(l) + 1))
            .sum::<usize>()
            + self.depth
    }
}

fn count_for_width(in_dim: usize, out_dim: usize, depth: usize, w: usize) -> usize {
    // First layer, (depth-2) hidden-to-hidden layers, final layer, omegas.
    w * (in_dim + 1) + (depth - 2) * (w * (w + 1)) + out_dim * (w + 1) + depth
}

/// Pick the widest depth-7 architecture whose serialized payload
/// (4 bytes/parameter) plus the fixed header overhead fits under
/// `volume_bytes / target_ratio`.
pub fn size_architecture(
    target_ratio: f64,
    volume_bytes: usize,
    in_dim: usize,
    out_dim: usize,
    header_bytes: usize,
) -> Result<SirenArchitecture> {
    if target_ratio <= 1.0 {
        return Err(InifError::InvalidArgument(format!(
            "target ratio must exceed 1, got {target_ratio}"
        )));
    }
    if volume_bytes == 0 {
        return Err(InifError::InvalidArgument("empty volume".into()));
    }
    let budget_total = (volume_bytes as f64 / target_ratio).floor() as usize;
    if budget_total <= header_bytes {
        return Err(InifError::BudgetInfeasible(format!(
            "{budget_total} bytes cannot hold the {header_bytes}-byte header"
        )));
    }
    let param_budget = (budget_total - header_bytes) / 4;
    // Closed-form estimate from the dominant (depth-2) * w^2 term, then a
    // downward scan; an upward scan double-checks the estimate.
    let a = (DEPTH - 2) as f64;
    let b = (in_dim + out_dim + DEPTH - 1) as f64;
    let c = (out_dim + DEPTH) as f64 - param_budget as f64;
    let disc = b * b - 4.0 * a * c;
    let mut w = if disc > 0.0 {
        ((-b + disc.sqrt()) / (2.0 * a)).floor().max(1.0) as usize + 1
    } else {
        1
    };
    while w > 1 && count_for_width(in_dim, out_dim, DEPTH, w) > param_budget {
        w -= 1;
    }
    while count_for_width(in_dim, out_dim, DEPTH, w + 1) <= param_budget {
        w += 1;
    }
    if count_for_width(in_dim, out_dim, DEPTH, w) > param_budget {
        return Err(InifError::BudgetInfeasible(format!(
            "{budget_total} bytes cannot hold a depth-{DEPTH} network ({} params needed, {} allowed)",
            count_for_width(in_dim, out_dim, DEPTH, 1),
            param_budget
        )));
    }
    SirenArchitecture::new(in_dim, out_dim, DEPTH, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Row-major (fan_out x fan_in).
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub omega: f64,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SirenParams {
    pub arch: SirenArchitecture,
    pub layers: Vec<Layer>,
}

impl SirenParams {
    /// Mutable views of every parameter tensor, in serialization order:
    /// per layer W, b, omega.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.w.as_mut_slice(),
                    l.b.as_mut_slice(),
                    std::slice::from_mut(&mut l.omega),
                ]
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.w.as_slice(),
                    l.b.as_slice(),
                    std::slice::from_ref(&l.omega),
                ]
            })
            .collect()
    }

    /// Rank of each tensor, matching the `tensors()` order.
    pub fn tensor_ranks(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|_| [2, 1, 0]).collect()
    }

    /// Round every parameter through single precision, the storage format.
    pub fn quantize_f32(&mut self) {
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = *v as f32 as f64;
            }
            l.omega = l.omega as f32 as f64;
        }
    }
}

/// Deterministic SIREN initialization: first-layer weights uniform in
/// (-1/in_dim, 1/in_dim); deeper weights uniform in
/// (-sqrt(6/fan_in)/omega, sqrt(6/fan_in)/omega); biases uniform in
/// (-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_siren(arch: &SirenArchitecture, seed: u64) -> SirenParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..arch.depth)
        .map(|l| {
            let fan_in = arch.fan_in(l);
            let fan_out = arch.fan_out(l);
            let omega = arch.omega0[l];
            let w_bound = if l == 0 {
                1.0 / fan_in as f64
            } else {
                (6.0 / fan_in as f64).sqrt() / omega
            };
            let b_bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_out * fan_in)
                .map(|_| rng.random_range(-w_bound..w_bound))
                .collect();
            let b = (0..fan_out)
                .map(|_| rng.random_range(-b_bound..b_bound))
                .collect();
            Layer {
                w,
                b,
                omega,
                fan_in,
                fan_out,
            }
        })
        .collect();
    SirenParams {
        arch: arch.clone(),
        layers,
    }
}

/// Per-layer pre-activations and activations retained for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub batch: usize,
    /// inputs[l] is the activation entering layer l (batch x fan_in).
    pub inputs: Vec<Vec<f64>>,
    /// pre[l] = W_l a + b_l (batch x fan_out).
    pub pre: Vec<Vec<f64>>,
}

/// Evaluate the network on a batch of coordinates (row-major
/// batch x in_dim). Returns batch x out_dim values and the trace.
pub fn forward_batch(
    params: &SirenParams,
    coords: &[f64],
    batch: usize,
) -> Result<(Vec<f64>, ForwardTrace)> {
    let arch = &params.arch;
    if coords.len() != batch * arch.in_dim {
        return Err(InifError::ShapeMismatch(format!(
            "coords length {} != batch {} x in_dim {}",
            coords.len(),
            batch,
            arch.in_dim
        )));
    }
    let mut inputs = Vec::with_capacity(arch.depth);
    let mut pre = Vec::with_capacity(arch.depth);
    let mut a = coords.to_vec();
    for (l, layer) in params.layers.iter().enumerate() {
        let z = affine(layer, &a, batch);
        inputs.push(a);
        if l + 1 < arch.depth {
            a = z.iter().map(|&v| (layer.omega * v).sin()).collect();
        } else {
            a = z.clone();
        }
        pre.push(z);
    }
    let trace = ForwardTrace { batch, inputs, pre };
    Ok((a, trace))
}

fn affine(layer: &Layer, a: &[f64], batch: usize) -> Vec<f64> {
    let (fi, fo) = (layer.fan_in, layer.fan_out);
    let mut z = vec![0.0; batch * fo];
    for n in 0..batch {
        let row = &a[n * fi..(n + 1) * fi];
        let out = &mut z[n * fo..(n + 1) * fo];
        for (o, zo) in out.iter_mut().enumerate() {
            let wrow = &layer.w[o * fi..(o + 1) * fi];
            let mut acc = layer.b[o];
            for i in 0..fi {
                acc += wrow[i] * row[i];
            }
            *zo = acc;
        }
    }
    z
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(params: &SirenParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                    omega: 0.0,
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.w.as_slice(),
                    l.b.as_slice(),
                    std::slice::from_ref(&l.omega),
                ]
            })
            .collect()
    }

    /// Accumulate `other * weight` into self.
    pub fn add_scaled(&mut self, other: &Gradients, weight: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += weight * y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += weight * y;
            }
            a.omega += weight * b.omega;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.w.iter().all(|v| v.is_finite())
                && l.b.iter().all(|v| v.is_finite())
                && l.omega.is_finite()
        })
    }
}

/// Reverse-mode gradients for every W, b and omega given the gradient of
/// the loss with respect to the network outputs (batch x out_dim).
pub fn backward_batch(
    params: &SirenParams,
    trace: &ForwardTrace,
    output_grad: &[f64],
) -> Result<Gradients> {
    let arch = &params.arch;
    if trace.pre.len() != arch.depth || trace.batch * arch.out_dim != output_grad.len() {
        return Err(InifError::ShapeMismatch(
            "trace does not match params/output_grad".into(),
        ));
    }
    let batch = trace.batch;
    let mut grads = Gradients::zeros_like(params);
    // d_act: gradient wrt the activation leaving the current layer.
    let mut d_act = output_grad.to_vec();
    for l in (0..arch.depth).rev() {
        let layer = &params.layers[l];
        let (fi, fo) = (layer.fan_in, layer.fan_out);
        let z = &trace.pre[l];
        let a_in = &trace.inputs[l];
        // Gradient wrt the pre-activation z.
        let mut d_z = vec![0.0; batch * fo];
        if l + 1 < arch.depth {
            let mut d_omega = 0.0;
            for n in 0..batch {
                for o in 0..fo {
                    let i = n * fo + o;
                    let cosv = (layer.omega * z[i]).cos();
                    d_z[i] = d_act[i] * layer.omega * cosv;
                    d_omega += d_act[i] * z[i] * cosv;
                }
            }
            grads.layers[l].omega = d_omega;
        } else {
            d_z.copy_from_slice(&d_act);
            // The final layer is affine; its frequency is unused.
            grads.layers[l].omega = 0.0;
        }
        let g = &mut grads.layers[l];
        for n in 0..batch {
            let zrow = &d_z[n * fo..(n + 1) * fo];
            let arow = &a_in[n * fi..(n + 1) * fi];
            for o in 0..fo {
                g.b[o] += zrow[o];
                let wrow = &mut g.w[o * fi..(o + 1) * fi];
                for i in 0..fi {
                    wrow[i] += zrow[o] * arow[i];
                }
            }
        }
        if l > 0 {
            let mut d_in = vec![0.0; batch * fi];
            for n in 0..batch {
                let zrow = &d_z[n * fo..(n + 1) * fo];
                let drow = &mut d_in[n * fi..(n + 1) * fi];
                for o in 0..fo {
                    let wrow = &layer.w[o * fi..(o + 1) * fi];
                    for i in 0..fi {
                        drow[i] += zrow[o] * wrow[i];
                    }
                }
            }
            d_act = d_in;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_arithmetic() {
        let arch = SirenArchitecture::new(3, 1, 2, 4).unwrap();
        // 3*4+4 + 4*1+1 + 2 = 23
        assert_eq!(arch.param_count(), 23);
        let arch7 = SirenArchitecture::new(3, 1, 7, 10).unwrap();
        assert_eq!(arch7.param_count(), count_for_width(3, 1, 7, 10));
    }

    #[test]
    fn sizing_matches_brute_force_scan() {
        // The 924x624x65 u16 example volume.
        let volume_bytes = 924 * 624 * 65 * 2;
        assert_eq!(volume_bytes, 74_954_880);
        let header = 87;
        let arch = size_architecture(256.0, volume_bytes, 3, 1, header).unwrap();
        let budget = (volume_bytes as f64 / 256.0).floor() as usize - header;
        let param_budget = budget / 4;
        // Brute-force width scan oracle.
        let best = (1..10_000)
            .filter(|&w| count_for_width(3, 1, DEPTH, w) <= param_budget)
            .max()
            .unwrap();
        assert_eq!(arch.hidden, best);
        assert!(arch.param_count() * 4 <= budget);
    }

    #[test]
    fn sizing_infeasible_for_tiny_volume() {
        assert!(matches!(
            size_architecture(2.0, 16, 3, 1, 87),
            Err(InifError::BudgetInfeasible(_))
        ));
    }

    #[test]
    fn sizing_monotone_in_ratio() {
        let volume_bytes = 1 << 22;
        let mut last = usize::MAX;
        let mut ratio = 2.0;
        while ratio <= 4096.0 {
            match size_architecture(ratio, volume_bytes, 3, 1, 87) {
                Ok(arch) => {
                    assert!(arch.hidden <= last, "width grew at ratio {ratio}");
                    last = arch.hidden;
                }
                Err(_) => break,
            }
            ratio *= 2.0;
        }
    }

    #[test]
    fn init_deterministic_and_bounded() {
        let arch = SirenArchitecture::new(3, 2, 7, 8).unwrap();
        let a = init_siren(&arch, 5);
        let b = init_siren(&arch, 5);
        assert_eq!(a, b);
        let bound = 1.0 / 3.0;
        assert!(a.layers[0].w.iter().all(|&w| w.abs() < bound));
    }

    #[test]
    fn init_preactivation_variance_stable() {
        // Monte-Carlo over uniform [-1,1] inputs: hidden pre-activation
        // variance should stay within a factor of two across layers.
        let arch = SirenArchitecture::new(2, 1, 7, 32).unwrap();
        let params = init_siren(&arch, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let batch = 4000;
        let coords: Vec<f64> = (0..batch * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, trace) = forward_batch(&params, &coords, batch).unwrap();
        let omega_z_var = |l: usize| {
            let omega = params.layers[l].omega;
            let z = &trace.pre[l];
            let vals: Vec<f64> = z.iter().map(|&v| omega * v).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64
        };
        let reference = omega_z_var(1);
        for l in 2..6 {
            let v = omega_z_var(l);
            assert!(
                v / reference < 2.0 && reference / v < 2.0,
                "layer {l}: var {v} vs {reference}"
            );
        }
    }

    #[test]
    fn forward_zero_weights_returns_bias() {
        let arch = SirenArchitecture::new(2, 3, 3, 4).unwrap();
        let mut params = init_siren(&arch, 0);
        for l in &mut params.layers {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
        params.layers[2].b = vec![0.5, -1.5, 2.0];
        let (out, _) = forward_batch(&params, &[0.3, -0.7], 1).unwrap();
        assert_eq!(out, vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn forward_is_pure_per_row() {
        let arch = SirenArchitecture::new(2, 1, 4, 6).unwrap();
        let params = init_siren(&arch, 3);
        let coords: Vec<f64> = [0.25, -0.5].repeat(5);
        let (out, _) = forward_batch(&params, &coords, 5).unwrap();
        for k in 1..5 {
            assert_eq!(out[k], out[0]);
        }
    }

    #[test]
    fn forward_hand_computed_two_layer() {
        // sin(1 * (w*x)) * v + c with omega=1, zero biases.
        let arch = SirenArchitecture::new(1, 1, 2, 1).unwrap();
        let mut params = init_siren(&arch, 0);
        params.layers[0].w = vec![0.8];
        params.layers[0].b = vec![0.0];
        params.layers[0].omega = 1.0;
        params.layers[1].w = vec![2.0];
        params.layers[1].b = vec![0.25];
        let (out, _) = forward_batch(&params, &[0.5], 1).unwrap();
        let expected = (0.5f64 * 0.8).sin() * 2.0 + 0.25;
        assert!((out[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn backward_zero_grad_is_zero() {
        let arch = SirenArchitecture::new(2, 2, 3, 4).unwrap();
        let params = init_siren(&arch, 1);
        let (_, trace) = forward_batch(&params, &[0.1, 0.2, -0.3, 0.4], 2).unwrap();
        let grads = backward_batch(&params, &trace, &[0.0; 4]).unwrap();
        for g in &grads.layers {
            assert!(g.w.iter().all(|&v| v == 0.0));
            assert!(g.b.iter().all(|&v| v == 0.0));
            assert_eq!(g.omega, 0.0);
        }
    }

    #[test]
    fn omega_gradient_single_neuron() {
        // Frozen single neuron: d/d omega sin(omega*w*x) = x*w*cos(omega*w*x).
        let arch = SirenArchitecture::new(1, 1, 2, 1).unwrap();
        let mut params = init_siren(&arch, 0);
        let (w0, omega, x, g) = (0.7, 1.3, 0.4, 2.0);
        params.layers[0].w = vec![w0];
        params.layers[0].b = vec![0.0];
        params.layers[0].omega = omega;
        params.layers[1].w = vec![1.0];
        params.layers[1].b = vec![0.0];
        let (_, trace) = forward_batch(&params, &[x], 1).unwrap();
        let grads = backward_batch(&params, &trace, &[g]).unwrap();
        let expected = x * w0 * (omega * w0 * x).cos() * g;
        assert!((grads.layers[0].omega - expected).abs() < 1e-12);
    }

    /// Central finite-difference oracle over every parameter.
    pub(crate) fn finite_diff_check(
        params: &SirenParams,
        coords: &[f64],
        batch: usize,
        target: &[f64],
        tol: f64,
    ) {
        let loss = |p: &SirenParams| -> f64 {
            let (out, _) = forward_batch(p, coords, batch).unwrap();
            out.iter()
                .zip(target)
                .map(|(o, t)| (o - t) * (o - t))
                .sum::<f64>()
                / out.len() as f64
        };
        let (out, trace) = forward_batch(params, coords, batch).unwrap();
        let n = out.len() as f64;
        let output_grad: Vec<f64> = out
            .iter()
            .zip(target)
            .map(|(o, t)| 2.0 * (o - t) / n)
            .collect();
        let grads = backward_batch(params, &trace, &output_grad).unwrap();
        let h = 1e-4;
        let n_layers = params.layers.len();
        for l in 0..n_layers {
            let analytic = grads.layers[l].clone();
            for slot in 0..params.layers[l].w.len() + params.layers[l].b.len() + 1 {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let (a, name): (f64, String) = {
                    let nw = params.layers[l].w.len();
                    let nb = params.layers[l].b.len();
                    if slot < nw {
                        plus.layers[l].w[slot] += h;
                        minus.layers[l].w[slot] -= h;
                        (analytic.w[slot], format!("W[{l}][{slot}]"))
                    } else if slot < nw + nb {
                        plus.layers[l].b[slot - nw] += h;
                        minus.layers[l].b[slot - nw] -= h;
                        (analytic.b[slot - nw], format!("b[{l}][{}]", slot - nw))
                    } else {
                        plus.layers[l].omega += h;
                        minus.layers[l].omega -= h;
                        (analytic.omega, format!("omega[{l}]"))
                    }
                };
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "{name}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = SirenArchitecture::new(2, 1, 3, 8).unwrap();
        let params = init_siren(&arch, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let batch = 16;
        let coords: Vec<f64> = (0..batch * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..batch).map(|_| rng.random_range(0.0..1.0)).collect();
        finite_diff_check(&params, &coords, batch, &target, 1e-4);
    }

    #[test]
    fn permutation_equivariance() {
        let arch = SirenArchitecture::new(3, 2, 4, 6).unwrap();
        let params = init_siren(&arch, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = 7;
        let coords: Vec<f64> = (0..batch * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (out, _) = forward_batch(&params, &coords, batch).unwrap();
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&p| coords[p * 3..(p + 1) * 3].to_vec())
            .collect();
        let (pout, _) = forward_batch(&params, &permuted, batch).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(&pout[k * 2..k * 2 + 2], &out[p * 2..p * 2 + 2]);
        }
    }
}
