use std::sync::Arc;

use crate::autodiff::{ParamId, Params, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::common::{add_channel_bias, init_weight, pair_indices, Dense, Mlp};

/// A critic scores batches into an n×n matrix T[i][j] = T(x_i, y_j):
/// diagonal entries are joint-distribution pairs, off-diagonal entries play
/// the role of product-of-marginals samples.
pub trait Critic {
    fn score_matrix(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: &Tensor,
        y: &Tensor,
    ) -> Result<Tensor>;
}

fn check_batches(x: &Tensor, y: &Tensor) -> Result<usize> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "score_matrix",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let n = x.shape()[0];
    if n < 2 {
        return Err(Error::contract(
            "score_matrix",
            "batch size must be at least 2 so off-diagonal samples exist",
        ));
    }
    Ok(n)
}

/// MLP on concat(x, y) with two relu hidden layers and a scalar head.
///
/// Scoring all n² pairs reuses the linearity of the first layer: the x- and
/// y-halves of W₁ are applied to each batch once and the per-pair activations
/// are assembled with gathers, which is algebraically identical to running
/// the MLP on every concatenated pair.
#[derive(Debug, Clone)]
pub struct JointCritic {
    pub dx: usize,
    pub dy: usize,
    w1: ParamId,
    b1: ParamId,
    tail: Mlp, // hidden → hidden → 1
}

impl JointCritic {
    pub fn new(params: &mut Params, rng: &mut Rng, dx: usize, dy: usize, hidden: usize) -> Self {
        let w1 = params.register(
            "joint.l0.w",
            vec![dx + dy, hidden],
            init_weight(rng, dx + dy, (dx + dy) * hidden),
        );
        let b1 = params.register("joint.l0.b", vec![hidden], vec![0.0; hidden]);
        let tail = Mlp::new(params, rng, "joint.tail", &[hidden, hidden, 1]);
        JointCritic { dx, dy, w1, b1, tail }
    }

    /// Score one (x, y) pair through the literal concat path.
    pub fn score_single(
        &self,
        tape: &mut Tape,
        params: &Params,
        x_row: &Tensor,
        y_row: &Tensor,
    ) -> Result<Tensor> {
        let joined = tape.concat_last_axis(x_row, y_row)?;
        let w1 = tape.param(params, self.w1);
        let b1 = tape.param(params, self.b1);
        let h = tape.matmul(&joined, &w1)?;
        let h = tape.add_bias(&h, &b1)?;
        let h = tape.relu(&h)?;
        self.tail.forward(tape, params, &h)
    }
}

impl Critic for JointCritic {
    fn score_matrix(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: &Tensor,
        y: &Tensor,
    ) -> Result<Tensor> {
        let n = check_batches(x, y)?;
        let w1 = tape.param(params, self.w1);
        let b1 = tape.param(params, self.b1);
        let rows_x: Arc<Vec<usize>> = Arc::new((0..self.dx).collect());
        let rows_y: Arc<Vec<usize>> = Arc::new((self.dx..self.dx + self.dy).collect());
        let w1x = tape.gather_rows(&w1, rows_x)?;
        let w1y = tape.gather_rows(&w1, rows_y)?;
        let xp = tape.matmul(x, &w1x)?; // (n, hidden)
        let yp = tape.matmul(y, &w1y)?;
        let (idx_i, idx_j) = pair_indices(n);
        let xi = tape.gather_rows(&xp, idx_i)?; // (n², hidden)
        let yj = tape.gather_rows(&yp, idx_j)?;
        let pre = tape.add(&xi, &yj)?;
        let pre = tape.add_bias(&pre, &b1)?;
        let h = tape.relu(&pre)?;
        let out = self.tail.forward(tape, params, &h)?; // (n², 1)
        tape.reshape(&out, vec![n, n])
    }
}

/// Two embedding MLPs g, h with inner-product scores; the batch score matrix
/// factorizes as G·Hᵀ.
#[derive(Debug, Clone)]
pub struct SeparableCritic {
    g: Mlp,
    h: Mlp,
    pub embed_dim: usize,
}

impl SeparableCritic {
    pub fn new(
        params: &mut Params,
        rng: &mut Rng,
        dx: usize,
        dy: usize,
        hidden: usize,
        embed_dim: usize,
    ) -> Self {
        let g = Mlp::new(params, rng, "sep.g", &[dx, hidden, hidden, embed_dim]);
        let h = Mlp::new(params, rng, "sep.h", &[dy, hidden, hidden, embed_dim]);
        SeparableCritic { g, h, embed_dim }
    }

    pub fn embed_x(&self, tape: &mut Tape, params: &Params, x: &Tensor) -> Result<Tensor> {
        self.g.forward(tape, params, x)
    }

    pub fn embed_y(&self, tape: &mut Tape, params: &Params, y: &Tensor) -> Result<Tensor> {
        self.h.forward(tape, params, y)
    }
}

impl Critic for SeparableCritic {
    fn score_matrix(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: &Tensor,
        y: &Tensor,
    ) -> Result<Tensor> {
        check_batches(x, y)?;
        let gx = self.g.forward(tape, params, x)?;
        let hy = self.h.forward(tape, params, y)?;
        let hyt = tape.transpose(&hy)?;
        tape.matmul(&gx, &hyt)
    }
}

/// Geometry and widths of the image critic; the sizes shrink at the desk
/// working resolution and the full-size variant stays available.
#[derive(Debug, Clone, Copy)]
pub struct ConvCriticConfig {
    pub channels_x: usize,
    pub channels_y: usize,
    pub height: usize,
    pub width: usize,
    pub conv1_out: usize,
    pub conv2_out: usize,
    pub dense_width: usize,
}

impl ConvCriticConfig {
    /// Halved channel counts for the downsampled working resolution.
    pub fn desk(channels_x: usize, channels_y: usize, side: usize) -> Self {
        ConvCriticConfig {
            channels_x,
            channels_y,
            height: side,
            width: side,
            conv1_out: 32,
            conv2_out: 64,
            dense_width: 512,
        }
    }

    /// Full-size variant: 64/128 channels and a 1024-wide dense layer.
    pub fn full(channels_x: usize, channels_y: usize, side: usize) -> Self {
        ConvCriticConfig {
            channels_x,
            channels_y,
            height: side,
            width: side,
            conv1_out: 64,
            conv2_out: 128,
            dense_width: 1024,
        }
    }
}

/// conv(k5, s2, p2) → relu → conv(k5, s2, p2) → relu → dense → relu; the
/// shared feature stack of the image critic and the VAE encoder.
#[derive(Debug, Clone)]
pub struct ConvTrunk {
    cfg: ConvCriticConfig,
    k1: ParamId,
    k1_bias: ParamId,
    k2: ParamId,
    k2_bias: ParamId,
    dense: Dense,
    spatial_after: usize,
}

impl ConvTrunk {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, cfg: ConvCriticConfig) -> Self {
        let cin = cfg.channels_x + cfg.channels_y;
        let (k, s, p) = (5, 2, 2);
        let oh1 = (cfg.height + 2 * p - k) / s + 1;
        let oh2 = (oh1 + 2 * p - k) / s + 1;
        let ow1 = (cfg.width + 2 * p - k) / s + 1;
        let ow2 = (ow1 + 2 * p - k) / s + 1;
        let k1 = params.register(
            format!("{name}.conv1.k"),
            vec![cfg.conv1_out, cin, k, k],
            init_weight(rng, cin * k * k, cfg.conv1_out * cin * k * k),
        );
        let k1_bias = params.register(
            format!("{name}.conv1.b"),
            vec![cfg.conv1_out],
            vec![0.0; cfg.conv1_out],
        );
        let k2 = params.register(
            format!("{name}.conv2.k"),
            vec![cfg.conv2_out, cfg.conv1_out, k, k],
            init_weight(rng, cfg.conv1_out * k * k, cfg.conv2_out * cfg.conv1_out * k * k),
        );
        let k2_bias = params.register(
            format!("{name}.conv2.b"),
            vec![cfg.conv2_out],
            vec![0.0; cfg.conv2_out],
        );
        let flat = cfg.conv2_out * oh2 * ow2;
        let dense = Dense::new(params, rng, &format!("{name}.dense"), flat, cfg.dense_width);
        ConvTrunk {
            cfg,
            k1,
            k1_bias,
            k2,
            k2_bias,
            dense,
            spatial_after: oh2 * ow2,
        }
    }

    pub fn config(&self) -> &ConvCriticConfig {
        &self.cfg
    }

    pub fn output_width(&self) -> usize {
        self.cfg.dense_width
    }

    /// Images (rows, C·H·W) → features (rows, dense_width).
    pub fn forward(&self, tape: &mut Tape, params: &Params, flat_images: &Tensor) -> Result<Tensor> {
        let rows = flat_images.shape()[0];
        let cin = self.cfg.channels_x + self.cfg.channels_y;
        let img = tape.reshape(
            flat_images,
            vec![rows, cin, self.cfg.height, self.cfg.width],
        )?;
        let k1 = tape.param(params, self.k1);
        let b1 = tape.param(params, self.k1_bias);
        let h = tape.conv2d(&img, &k1, 2, 2)?;
        let h = add_channel_bias(tape, &h, &b1)?;
        let h = tape.relu(&h)?;
        let k2 = tape.param(params, self.k2);
        let b2 = tape.param(params, self.k2_bias);
        let h = tape.conv2d(&h, &k2, 2, 2)?;
        let h = add_channel_bias(tape, &h, &b2)?;
        let h = tape.relu(&h)?;
        let flat = tape.reshape(&h, vec![rows, self.cfg.conv2_out * self.spatial_after])?;
        let h = self.dense.forward(tape, params, &flat)?;
        tape.relu(&h)
    }
}

/// CNN critic over channel-stacked image pairs.
#[derive(Debug, Clone)]
pub struct ConvCritic {
    trunk: ConvTrunk,
    head: Dense,
}

impl ConvCritic {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, cfg: ConvCriticConfig) -> Self {
        let trunk = ConvTrunk::new(params, rng, name, cfg);
        let head = Dense::new(params, rng, &format!("{name}.head"), cfg.dense_width, 1);
        ConvCritic { trunk, head }
    }

    pub fn config(&self) -> &ConvCriticConfig {
        self.trunk.config()
    }
}

impl Critic for ConvCritic {
    fn score_matrix(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: &Tensor,
        y: &Tensor,
    ) -> Result<Tensor> {
        let n = check_batches(x, y)?;
        // row-major C·H·W layout means concatenating flattened images stacks
        // them on the channel axis
        let (idx_i, idx_j) = pair_indices(n);
        let xi = tape.gather_rows(x, idx_i)?;
        let yj = tape.gather_rows(y, idx_j)?;
        let pairs = tape.concat_last_axis(&xi, &yj)?;
        let h = self.trunk.forward(tape, params, &pairs)?;
        let out = self.head.forward(tape, params, &h)?;
        tape.reshape(&out, vec![n, n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn batch(rng: &mut Rng, n: usize, d: usize) -> Tensor {
        let mut v = vec![0.0; n * d];
        rng.fill_normal(&mut v);
        Tensor::from_vec(vec![n, d], v)
    }

    #[test]
    fn separable_zero_g_gives_zero_matrix() {
        let mut rng = Rng::new(1);
        let mut params = Params::new();
        let critic = SeparableCritic::new(&mut params, &mut rng, 3, 3, 8, 4);
        critic.g.zero_all(&mut params);
        let (x, y) = (batch(&mut rng, 4, 3), batch(&mut rng, 4, 3));
        let mut tape = Tape::new();
        let (xc, yc) = (tape.constant(&x), tape.constant(&y));
        let t = critic.score_matrix(&mut tape, &params, &xc, &yc).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn joint_pairwise_matches_individual_calls() {
        let mut rng = Rng::new(2);
        let mut params = Params::new();
        let critic = JointCritic::new(&mut params, &mut rng, 3, 2, 16);
        let n = 2;
        let (x, y) = (batch(&mut rng, n, 3), batch(&mut rng, n, 2));
        let mut tape = Tape::new();
        let (xc, yc) = (tape.constant(&x), tape.constant(&y));
        let t = critic.score_matrix(&mut tape, &params, &xc, &yc).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut tape2 = Tape::new();
                let xr = Tensor::from_vec(vec![1, 3], x.data()[i * 3..(i + 1) * 3].to_vec());
                let yr = Tensor::from_vec(vec![1, 2], y.data()[j * 2..(j + 1) * 2].to_vec());
                let (xr, yr) = (tape2.constant(&xr), tape2.constant(&yr));
                let s = critic.score_single(&mut tape2, &params, &xr, &yr).unwrap();
                assert!(
                    (t.data()[i * n + j] - s.data()[0]).abs() < 1e-10,
                    "pair ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn separable_matches_naive_double_loop() {
        let mut rng = Rng::new(3);
        let mut params = Params::new();
        let critic = SeparableCritic::new(&mut params, &mut rng, 4, 4, 12, 5);
        let n = 6;
        let (x, y) = (batch(&mut rng, n, 4), batch(&mut rng, n, 4));
        let mut tape = Tape::new();
        let (xc, yc) = (tape.constant(&x), tape.constant(&y));
        let t = critic.score_matrix(&mut tape, &params, &xc, &yc).unwrap();

        // naive oracle: embed each row separately and take inner products
        let gx = critic.g.forward_detached(&params, x.data(), n);
        let hy = critic.h.forward_detached(&params, y.data(), n);
        let e = critic.embed_dim;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..e).map(|k| gx[i * e + k] * hy[j * e + k]).sum();
                assert!((t.data()[i * n + j] - dot).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn score_matrix_rejects_tiny_batches() {
        let mut rng = Rng::new(4);
        let mut params = Params::new();
        let critic = JointCritic::new(&mut params, &mut rng, 2, 2, 8);
        let (x, y) = (batch(&mut rng, 1, 2), batch(&mut rng, 1, 2));
        let mut tape = Tape::new();
        let (xc, yc) = (tape.constant(&x), tape.constant(&y));
        assert!(critic.score_matrix(&mut tape, &params, &xc, &yc).is_err());
    }

    #[test]
    fn conv_critic_shapes_and_gradients() {
        let mut rng = Rng::new(5);
        let mut params = Params::new();
        let cfg = ConvCriticConfig {
            channels_x: 1,
            channels_y: 1,
            height: 8,
            width: 8,
            conv1_out: 2,
            conv2_out: 3,
            dense_width: 8,
        };
        let critic = ConvCritic::new(&mut params, &mut rng, "cc", cfg);
        let n = 3;
        let mut xv = vec![0.0; n * 64];
        let mut yv = vec![0.0; n * 64];
        rng.fill_uniform_in(&mut xv, 0.0, 1.0);
        rng.fill_uniform_in(&mut yv, 0.0, 1.0);
        let x = Tensor::from_vec(vec![n, 64], xv);
        let y = Tensor::from_vec(vec![n, 64], yv);
        let mut tape = Tape::new();
        let (xc, yc) = (tape.constant(&x), tape.constant(&y));
        let t = critic.score_matrix(&mut tape, &params, &xc, &yc).unwrap();
        assert_eq!(t.shape(), &[n, n]);

        let report = grad_check(&mut params, 1e-5, move |tape, params| {
            let (xc, yc) = (tape.constant(&x), tape.constant(&y));
            let t = critic.score_matrix(tape, params, &xc, &yc)?;
            let sq = tape.mul(&t, &t)?;
            tape.mean(&sq, None)
        })
        .unwrap();
        assert!(
            report.max_rel_error <= 1e-4,
            "conv critic grad error {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }

    #[test]
    fn joint_critic_gradients() {
        let mut rng = Rng::new(6);
        let mut params = Params::new();
        let critic = JointCritic::new(&mut params, &mut rng, 3, 3, 8);
        let (x, y) = (batch(&mut rng, 4, 3), batch(&mut rng, 4, 3));
        let report = grad_check(&mut params, 1e-5, move |tape, params| {
            let (xc, yc) = (tape.constant(&x), tape.constant(&y));
            let t = critic.score_matrix(tape, params, &xc, &yc)?;
            let sq = tape.mul(&t, &t)?;
            tape.mean(&sq, None)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn separable_critic_gradients() {
        let mut rng = Rng::new(7);
        let mut params = Params::new();
        let critic = SeparableCritic::new(&mut params, &mut rng, 3, 3, 8, 4);
        let (x, y) = (batch(&mut rng, 4, 3), batch(&mut rng, 4, 3));
        let report = grad_check(&mut params, 1e-5, move |tape, params| {
            let (xc, yc) = (tape.constant(&x), tape.constant(&y));
            let t = critic.score_matrix(tape, params, &xc, &yc)?;
            let sq = tape.mul(&t, &t)?;
            tape.mean(&sq, None)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{}", report.max_rel_error);
    }
}
