//! NHITS-style stack: per-block multi-rate max pooling, an MLP emitting
//! backcast and forecast coefficients, linear interpolation up to the input
//! and horizon lengths, and residual backcast connections on the glucose
//! channel. The model forecast is the sum of block forecasts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{max_pool, pooled_len, Interp, Mlp, MlpTrace};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Block {
    kernel: usize,
    backcast_dim: usize,
    mlp: Mlp,
    back_interp: Interp,
    fore_interp: Interp,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct BlockTrace {
    argmax: Vec<Vec<usize>>,
    mlp: MlpTrace,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct NhitsTrace {
    blocks: Vec<BlockTrace>,
    /// Glucose residual entering each block, plus the final residual.
    pub residuals: Vec<Vec<f64>>,
    pub backcasts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Nhits {
    blocks: Vec<Block>,
    input_len: usize,
    horizon: usize,
    n_channels: usize,
    n_statics: usize,
}

/// Per-block settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub pooling_kernel: usize,
    /// Backcast coefficients; `None` means one per pooled step.
    pub backcast_dim: Option<usize>,
    pub forecast_dim: usize,
}

impl Block {
    fn new(
        spec: &BlockSpec,
        input_len: usize,
        horizon: usize,
        in_features: usize,
        hidden: &[usize],
        offset: usize,
    ) -> Result<Self> {
        if spec.pooling_kernel == 0 {
            return Err(Error::Config("pooling kernel must be positive".into()));
        }
        let backcast_dim = spec
            .backcast_dim
            .unwrap_or_else(|| pooled_len(input_len, spec.pooling_kernel));
        if spec.forecast_dim < 1 || backcast_dim < 1 {
            return Err(Error::Config("basis dimensions must be at least 1".into()));
        }
        let mut sizes = vec![in_features];
        sizes.extend_from_slice(hidden);
        sizes.push(backcast_dim + spec.forecast_dim);
        Ok(Self {
            kernel: spec.pooling_kernel,
            backcast_dim,
            mlp: Mlp::new(&sizes, offset),
            back_interp: Interp::new(backcast_dim, input_len),
            fore_interp: Interp::new(spec.forecast_dim, horizon),
        })
    }

    fn forward<R: Rng>(
        &self,
        theta: &[f64],
        residual: &[f64],
        exog: &[Vec<f64>],
        statics: &[f64],
        dropout: Option<(f64, &mut R)>,
    ) -> (Vec<f64>, Vec<f64>, BlockTrace) {
        let mut x = Vec::new();
        let mut argmax = Vec::with_capacity(1 + exog.len());
        for ch in std::iter::once(residual).chain(exog.iter().map(Vec::as_slice)) {
            let (p, idx) = max_pool(ch, self.kernel);
            x.extend(p);
            argmax.push(idx);
        }
        x.extend_from_slice(statics);
        let (out, mlp) = self.mlp.forward(theta, x, dropout);
        let backcast = self.back_interp.apply(&out[..self.backcast_dim]);
        let forecast = self.fore_interp.apply(&out[self.backcast_dim..]);
        (backcast, forecast, BlockTrace { argmax, mlp })
    }

    /// Gradients with respect to the pooled inputs, scattered back onto each channel.
    fn backward(
        &self,
        theta: &[f64],
        trace: &BlockTrace,
        g_backcast: &[f64],
        g_forecast: &[f64],
        channel_grads: &mut [Vec<f64>],
        grad_theta: &mut [f64],
    ) {
        let mut gout = self.back_interp.transpose(g_backcast);
        gout.extend(self.fore_interp.transpose(g_forecast));
        let gx = self.mlp.backward(theta, &trace.mlp, &gout, grad_theta);
        let mut pos = 0;
        for (c, idx) in trace.argmax.iter().enumerate() {
            for &i in idx {
                channel_grads[c][i] += gx[pos];
                pos += 1;
            }
        }
    }
}

impl Nhits {
    pub fn new(
        specs: &[BlockSpec],
        input_len: usize,
        horizon: usize,
        n_channels: usize,
        n_statics: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("NHITS needs at least one block".into()));
        }
        let mut blocks = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for s in specs {
            let in_features = n_channels * pooled_len(input_len, s.pooling_kernel.max(1)) + n_statics;
            let b = Block::new(s, input_len, horizon, in_features, hidden, offset)?;
            offset += b.mlp.n_params();
            blocks.push(b);
        }
        Ok(Self {
            blocks,
            input_len,
            horizon,
            n_channels,
            n_statics,
        })
    }

    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(|b| b.mlp.n_params()).sum()
    }

    pub fn init<R: Rng>(&self, theta: &mut [f64], rng: &mut R) {
        for b in &self.blocks {
            b.mlp.init(theta, 0.1, rng);
        }
    }

    pub fn forward<R: Rng>(
        &self,
        theta: &[f64],
        channels: &[Vec<f64>],
        statics: &[f64],
        mut rng: Option<(f64, &mut R)>,
    ) -> (Vec<f64>, NhitsTrace) {
        debug_assert_eq!(channels.len(), self.n_channels);
        debug_assert_eq!(statics.len(), self.n_statics);
        let mut trace = NhitsTrace::default();
        let mut residual = channels[0].clone();
        let mut forecast = vec![0.0; self.horizon];
        for b in &self.blocks {
            let dropout = rng.as_mut().map(|(p, r)| (*p, &mut **r));
            let (back, fore, bt) = b.forward(theta, &residual, &channels[1..], statics, dropout);
            let next: Vec<f64> = residual.iter().zip(&back).map(|(r, b)| r - b).collect();
            trace.residuals.push(residual);
            trace.backcasts.push(back);
            for (f, v) in forecast.iter_mut().zip(&fore) {
                *f += v;
            }
            trace.blocks.push(bt);
            residual = next;
        }
        trace.residuals.push(residual);
        (forecast, trace)
    }

    /// Returns gradients with respect to every (normalized) input channel.
    pub fn backward(
        &self,
        theta: &[f64],
        trace: &NhitsTrace,
        g_forecast: &[f64],
        grad_theta: &mut [f64],
    ) -> Vec<Vec<f64>> {
        let mut grads = vec![vec![0.0; self.input_len]; self.n_channels];
        // Gradient flowing into the residual leaving the current block.
        let mut g_res = vec![0.0; self.input_len];
        for (b, bt) in self.blocks.iter().zip(&trace.blocks).rev() {
            let g_back: Vec<f64> = g_res.iter().map(|g| -g).collect();
            let mut local = vec![vec![0.0; self.input_len]; self.n_channels];
            b.backward(theta, bt, &g_back, g_forecast, &mut local, grad_theta);
            for (g, l) in g_res.iter_mut().zip(&local[0]) {
                *g += l;
            }
            for c in 1..self.n_channels {
                for (g, l) in grads[c].iter_mut().zip(&local[c]) {
                    *g += l;
                }
            }
        }
        grads[0] = g_res;
        grads
    }
}

/// A single stand-alone NHITS block over one input series.
#[derive(Debug, Clone)]
pub struct NhitsBlock {
    block: Block,
    theta: Vec<f64>,
}

impl NhitsBlock {
    pub fn new<R: Rng>(
        input_len: usize,
        horizon: usize,
        pooling_kernel: usize,
        basis_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if basis_dim < 1 {
            return Err(Error::Config("basis_dim must be at least 1".into()));
        }
        if pooling_kernel == 0 || pooling_kernel > input_len {
            return Err(Error::Config(format!(
                "pooling kernel {pooling_kernel} incompatible with input length {input_len}"
            )));
        }
        let spec = BlockSpec {
            pooling_kernel,
            backcast_dim: Some(basis_dim),
            forecast_dim: basis_dim,
        };
        let in_features = pooled_len(input_len, pooling_kernel);
        let block = Block::new(&spec, input_len, horizon, in_features, hidden, 0)?;
        let mut theta = vec![0.0; block.mlp.n_params()];
        block.mlp.init(&mut theta, 1.0, rng);
        Ok(Self { block, theta })
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn pooled(&self, input: &[f64]) -> Vec<f64> {
        max_pool(input, self.block.kernel).0
    }

    /// Interpolates forecast-head coefficients to the horizon.
    pub fn interpolate_forecast(&self, coefficients: &[f64]) -> Vec<f64> {
        self.block.fore_interp.apply(coefficients)
    }

    /// `(backcast, forecast)` of the block.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if input.len() != self.block.back_interp_len() {
            return Err(Error::Shape(format!(
                "block expects {} inputs, got {}",
                self.block.back_interp_len(),
                input.len()
            )));
        }
        let (b, f, _) = self
            .block
            .forward::<rand_chacha::ChaCha8Rng>(&self.theta, input, &[], &[], None);
        Ok((b, f))
    }
}

impl Block {
    fn back_interp_len(&self) -> usize {
        self.back_interp.out_len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_dim_must_be_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(NhitsBlock::new(8, 2, 1, 0, &[4], &mut rng).is_err());
    }

    #[test]
    fn forecast_interpolation_identity_when_basis_matches_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = NhitsBlock::new(12, 6, 1, 6, &[4], &mut rng).unwrap();
        let c = [1.0, -2.0, 3.5, 0.0, 4.0, 9.0];
        assert_eq!(b.interpolate_forecast(&c), c.to_vec());
    }

    #[test]
    fn constant_input_pools_to_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [1, 3, 4, 8] {
            let b = NhitsBlock::new(24, 6, k, 2, &[4], &mut rng).unwrap();
            assert!(b.pooled(&[7.5; 24]).iter().all(|&v| v == 7.5));
        }
    }

    #[test]
    fn identity_initialized_block_on_constant_input() {
        // Zero weights and hidden biases; head biases set so every coefficient
        // equals the constant. Interpolating constants yields constants.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = NhitsBlock::new(16, 6, 4, 3, &[5], &mut rng).unwrap();
        let n = b.params().len();
        let theta = b.params_mut();
        theta.iter_mut().for_each(|t| *t = 0.0);
        // Head layer bias occupies the last 3 + 3 entries.
        theta[n - 6..].iter_mut().for_each(|t| *t = 42.0);
        let (back, fore) = b.forward(&[42.0; 16]).unwrap();
        assert!(back.iter().chain(&fore).all(|&v| v == 42.0));
    }

    #[test]
    fn residual_telescoping() {
        let specs = [
            BlockSpec { pooling_kernel: 2, backcast_dim: None, forecast_dim: 1 },
            BlockSpec { pooling_kernel: 1, backcast_dim: Some(3), forecast_dim: 2 },
        ];
        let net = Nhits::new(&specs, 8, 2, 1, 0, &[6]).unwrap();
        let mut theta = vec![0.0; net.n_params()];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in theta.iter_mut() {
            *t = rng.random_range(-0.5..0.5);
        }
        let input: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).cos()).collect();
        let (_, trace) = net.forward::<ChaCha8Rng>(&theta, &[input.clone()], &[], None);
        let fin = trace.residuals.last().unwrap();
        for j in 0..8 {
            let direct = input[j] - trace.backcasts[0][j] - trace.backcasts[1][j];
            assert!((fin[j] - direct).abs() < 1e-12);
            let recon = fin[j] + trace.backcasts[0][j] + trace.backcasts[1][j];
            assert!((recon - input[j]).abs() < 1e-10);
        }
    }
}
