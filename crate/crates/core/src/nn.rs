//! One-hidden-layer MLPs: linear → Swish → linear, optionally followed by a
//! LayerNorm. These are the only learned blocks in the model; everything else
//! is graph wiring.

use crate::error::{LamError, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// Parameters of one MLP. `norm` is `None` for the prediction head, which
/// carries no LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<S: Scalar = f64> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub norm: Option<(Tensor<S>, Tensor<S>)>,
}

/// Tape handles for one bound MLP.
#[derive(Debug, Clone, Copy)]
pub struct MlpBind {
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
    norm: Option<(TensorId, TensorId)>,
}

impl<S: Scalar> MlpParams<S> {
    /// Glorot-uniform weights, zero biases. `final_scale` shrinks the output
    /// layer (the prediction head uses 0.01 so initial forecasts sit near
    /// persistence).
    pub fn init<R: Rng>(
        in_width: usize,
        hidden: usize,
        out_width: usize,
        norm: bool,
        final_scale: f64,
        rng: &mut R,
    ) -> Self {
        let w1 = glorot(in_width, hidden, 1.0, rng);
        let b1 = Tensor::zeros(vec![hidden]);
        let w2 = glorot(hidden, out_width, final_scale, rng);
        let b2 = Tensor::zeros(vec![out_width]);
        let norm = norm.then(|| {
            (
                Tensor::full(vec![out_width], S::one()),
                Tensor::zeros(vec![out_width]),
            )
        });
        MlpParams { w1, b1, w2, b2, norm }
    }

    pub fn in_width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Zero the final linear layer, turning the MLP into the zero map (the
    /// LayerNorm of a zero row is zero under default affine parameters).
    pub fn zero_final(&mut self) {
        for v in self.w2.values_mut() {
            *v = S::zero();
        }
        for v in self.b2.values_mut() {
            *v = S::zero();
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>, needs_grad: bool) -> MlpBind {
        MlpBind {
            w1: tape.leaf(self.w1.clone(), needs_grad),
            b1: tape.leaf(self.b1.clone(), needs_grad),
            w2: tape.leaf(self.w2.clone(), needs_grad),
            b2: tape.leaf(self.b2.clone(), needs_grad),
            norm: self
                .norm
                .as_ref()
                .map(|(g, b)| (tape.leaf(g.clone(), needs_grad), tape.leaf(b.clone(), needs_grad))),
        }
    }

    /// Visit parameter tensors in a stable order, with a path suffix per leaf.
    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<S>)) {
        f(format!("{prefix}/w1"), &self.w1);
        f(format!("{prefix}/b1"), &self.b1);
        f(format!("{prefix}/w2"), &self.w2);
        f(format!("{prefix}/b2"), &self.b2);
        if let Some((g, b)) = &self.norm {
            f(format!("{prefix}/ln_gain"), g);
            f(format!("{prefix}/ln_bias"), b);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}/w1"), &mut self.w1);
        f(format!("{prefix}/b1"), &mut self.b1);
        f(format!("{prefix}/w2"), &mut self.w2);
        f(format!("{prefix}/b2"), &mut self.b2);
        if let Some((g, b)) = &mut self.norm {
            f(format!("{prefix}/ln_gain"), g);
            f(format!("{prefix}/ln_bias"), b);
        }
    }

    pub fn to_f64(&self) -> MlpParams<f64> {
        MlpParams {
            w1: self.w1.to_f64(),
            b1: self.b1.to_f64(),
            w2: self.w2.to_f64(),
            b2: self.b2.to_f64(),
            norm: self.norm.as_ref().map(|(g, b)| (g.to_f64(), b.to_f64())),
        }
    }

    pub fn from_f64(p: &MlpParams<f64>) -> Self {
        MlpParams {
            w1: Tensor::from_f64_tensor(&p.w1),
            b1: Tensor::from_f64_tensor(&p.b1),
            w2: Tensor::from_f64_tensor(&p.w2),
            b2: Tensor::from_f64_tensor(&p.b2),
            norm: p
                .norm
                .as_ref()
                .map(|(g, b)| (Tensor::from_f64_tensor(g), Tensor::from_f64_tensor(b))),
        }
    }
}

fn glorot<S: Scalar, R: Rng>(fan_in: usize, fan_out: usize, scale: f64, rng: &mut R) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt() * scale;
    let values = (0..fan_in * fan_out)
        .map(|_| S::from_f64(rng.gen_range(-a..a)))
        .collect();
    Tensor::from_vec(vec![fan_in, fan_out], values).expect("glorot shape")
}

/// Apply a bound MLP to `x` (rows are independent inputs).
pub fn mlp_apply<S: Scalar>(tape: &mut Tape<S>, mlp: &MlpBind, x: TensorId) -> Result<TensorId> {
    let in_width = tape.value(mlp.w1).shape()[0];
    if tape.value(x).last_dim() != in_width {
        return Err(LamError::dim(format!(
            "mlp input width {} vs expected {}",
            tape.value(x).last_dim(),
            in_width
        )));
    }
    let h = tape.matmul(x, mlp.w1)?;
    let h = tape.add_bias(h, mlp.b1)?;
    let a = tape.swish(h)?;
    let y = tape.matmul(a, mlp.w2)?;
    let y = tape.add_bias(y, mlp.b2)?;
    match mlp.norm {
        Some((g, b)) => tape.layer_norm(y, g, b),
        None => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mlp_maps_to_zero() {
        let mut p: MlpParams = MlpParams::init(2, 4, 3, false, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        for v in p.w1.values_mut() {
            *v = 0.0;
        }
        p.zero_final();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true);
        let x = tape.leaf(Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap(), false);
        let y = mlp_apply(&mut tape, &b, x).unwrap();
        assert!(tape.value(y).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_1x1x1() {
        // weights 1, biases 0, no norm, input 2 -> swish(2) = 2·sigma(2)
        let p: MlpParams = MlpParams {
            w1: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            b1: Tensor::zeros(vec![1]),
            w2: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            b2: Tensor::zeros(vec![1]),
            norm: None,
        };
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.leaf(Tensor::matrix(1, 1, vec![2.0]).unwrap(), false);
        let y = mlp_apply(&mut tape, &b, x).unwrap();
        assert_relative_eq!(
            tape.value(y).values()[0],
            1.7615941559557646,
            max_relative = 1e-12
        );
    }

    #[test]
    fn zero_final_with_norm_still_zero() {
        // LayerNorm of an all-zero row is zero under gain 1 / bias 0,
        // so zeroing the final linear layer zeroes the whole MLP.
        let mut p: MlpParams =
            MlpParams::init(3, 8, 4, true, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        p.zero_final();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.leaf(Tensor::matrix(2, 3, vec![0.5; 6]).unwrap(), false);
        let y = mlp_apply(&mut tape, &b, x).unwrap();
        assert!(tape.value(y).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_check_random_mlp() {
        let p: MlpParams = MlpParams::init(3, 8, 4, true, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let x0 = Tensor::matrix(2, 3, vec![0.3, -0.8, 1.4, 0.2, 0.9, -1.1]).unwrap();
        let h = 1e-5;

        let eval = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, true);
            let xi = tape.leaf(x.clone(), true);
            let y = mlp_apply(&mut tape, &b, xi).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let l = tape.sum(sq).unwrap();
            tape.value(l).item().unwrap()
        };

        let mut fd = Vec::new();
        for i in 0..x0.numel() {
            let mut xp = x0.clone();
            xp.values_mut()[i] += h;
            let mut xm = x0.clone();
            xm.values_mut()[i] -= h;
            fd.push((eval(&xp) - eval(&xm)) / (2.0 * h));
        }

        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true);
        let xi = tape.leaf(x0.clone(), true);
        let y = mlp_apply(&mut tape, &b, xi).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        let got = g.get(xi).unwrap();
        for i in 0..fd.len() {
            let denom = fd[i].abs().max(got[i].abs()).max(1e-8);
            assert!(
                ((fd[i] - got[i]).abs() / denom) < 1e-4,
                "rel err at {}: fd {} vs ad {}",
                i,
                fd[i],
                got[i]
            );
        }
    }

    #[test]
    fn width_mismatch_errors() {
        let p: MlpParams = MlpParams::init(3, 4, 2, false, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), false);
        assert!(matches!(
            mlp_apply(&mut tape, &b, x),
            Err(LamError::Dim(_))
        ));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: MlpParams = MlpParams::init(5, 6, 7, true, 1.0, &mut ChaCha8Rng::seed_from_u64(42));
        let b: MlpParams = MlpParams::init(5, 6, 7, true, 1.0, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }
}
