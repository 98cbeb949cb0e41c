//! Two-stage toy encoders. One pass yields a low-stage embedding
//! `low = tanh(x·W1 + b1)` and a high-stage embedding `high = low·W2 + b2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `input_dim × d1`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `d1 × d`
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Low- and high-stage embeddings: vectors for a single input, matrices
/// (one row per input) for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures {
    pub low: Tensor,
    pub high: Tensor,
}

/// Encoder parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct StageVars<'t> {
    pub low: Var<'t>,
    pub high: Var<'t>,
}

pub(crate) fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..fan_in * fan_out).map(|_| rng.sample(dist)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized")
}

/// Xavier-uniform weights, zero biases.
pub fn init_encoder(input_dim: usize, d1: usize, d: usize, seed: u64) -> Result<EncoderParams> {
    init_encoder_with(&mut ChaCha8Rng::seed_from_u64(seed), input_dim, d1, d)
}

pub fn init_encoder_with<R: Rng>(
    rng: &mut R,
    input_dim: usize,
    d1: usize,
    d: usize,
) -> Result<EncoderParams> {
    if input_dim == 0 || d1 == 0 || d == 0 {
        return Err(Error::Config(format!(
            "encoder dims must be positive, got input_dim={input_dim} d1={d1} d={d}"
        )));
    }
    Ok(EncoderParams {
        w1: xavier_uniform(rng, input_dim, d1),
        b1: Tensor::zeros(&[d1]),
        w2: xavier_uniform(rng, d1, d),
        b2: Tensor::zeros(&[d]),
    })
}

impl EncoderParams {
    pub fn zeros(input_dim: usize, d1: usize, d: usize) -> Self {
        EncoderParams {
            w1: Tensor::zeros(&[input_dim, d1]),
            b1: Tensor::zeros(&[d1]),
            w2: Tensor::zeros(&[d1, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn d1(&self) -> usize {
        self.w1.cols()
    }

    pub fn d(&self) -> usize {
        self.w2.cols()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Records the parameters on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> EncoderVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        EncoderVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }
}

impl<'t> EncoderVars<'t> {
    pub fn vars(&self) -> [Var<'t>; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Encodes the rows of an `N × input_dim` matrix.
    pub fn encode(&self, x: Var<'t>) -> Result<StageVars<'t>> {
        let low = x.matmul(self.w1)?.add_row(self.b1)?.tanh()?;
        let high = low.matmul(self.w2)?.add_row(self.b2)?;
        Ok(StageVars { low, high })
    }
}

fn check_input(params: &EncoderParams, x: &Tensor) -> Result<()> {
    let cols = match x.shape() {
        [n] | [_, n] => *n,
        s => return Err(Error::dim("encode", format!("input shape {s:?}"))),
    };
    if cols != params.input_dim() {
        return Err(Error::dim(
            "encode",
            format!(
                "input length {cols}, encoder expects {}",
                params.input_dim()
            ),
        ));
    }
    Ok(())
}

/// Encodes one input vector.
pub fn encode(params: &EncoderParams, x: &[f64]) -> Result<StageFeatures> {
    let out = encode_batch(params, &Tensor::vector(x.to_vec()).reshape(&[1, x.len()])?)?;
    Ok(StageFeatures {
        low: out.low.reshape(&[params.d1()])?,
        high: out.high.reshape(&[params.d()])?,
    })
}

/// Encodes every row of `x` without recording gradients.
pub fn encode_batch(params: &EncoderParams, x: &Tensor) -> Result<StageFeatures> {
    check_input(params, x)?;
    let tape = Tape::new();
    let s = params.bind(&tape, false).encode(tape.constant(x.clone()))?;
    Ok(StageFeatures {
        low: s.low.value(),
        high: s.high.value(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check_many, DEFAULT_STEP};

    #[test]
    fn zero_params_zero_features() {
        let p = EncoderParams::zeros(5, 3, 4);
        let f = encode(&p, &[0.0; 5]).unwrap();
        assert_eq!(f.low.data(), &[0.0; 3]);
        assert_eq!(f.high.data(), &[0.0; 4]);
    }

    #[test]
    fn default_shapes() {
        let p = init_encoder(32, 32, 64, 1).unwrap();
        let f = encode(&p, &[0.1; 32]).unwrap();
        assert_eq!(f.low.shape(), &[32]);
        assert_eq!(f.high.shape(), &[64]);
        assert!(f.low.is_finite() && f.high.is_finite());
    }

    #[test]
    fn init_rules() {
        let a = init_encoder(6, 4, 8, 11).unwrap();
        assert_eq!(a, init_encoder(6, 4, 8, 11).unwrap());
        assert_ne!(a, init_encoder(6, 4, 8, 12).unwrap());
        assert!(a.b1.data().iter().chain(a.b2.data()).all(|&b| b == 0.0));
        let b1 = (6.0f64 / 10.0).sqrt();
        let b2 = (6.0f64 / 12.0).sqrt();
        assert!(a.w1.data().iter().all(|v| v.abs() <= b1));
        assert!(a.w2.data().iter().all(|v| v.abs() <= b2));
        assert!(init_encoder(0, 4, 8, 0).is_err());
    }

    #[test]
    fn wrong_input_length() {
        let p = init_encoder(6, 4, 8, 0).unwrap();
        assert!(matches!(
            encode(&p, &[1.0; 5]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn vector_matches_batch_row() {
        let p = init_encoder(3, 4, 5, 2).unwrap();
        let x = Tensor::from_rows(&[[0.1, -0.4, 0.9], [1.5, 0.2, -0.3]]).unwrap();
        let b = encode_batch(&p, &x).unwrap();
        let v = encode(&p, x.row(1)).unwrap();
        assert_eq!(v.high.data(), b.high.row(1));
        assert_eq!(v.low.data(), b.low.row(1));
    }

    #[test]
    fn gradient_of_high_sum() {
        let p = init_encoder(3, 4, 5, 3).unwrap();
        let x = Tensor::from_rows(&[[0.3, -0.7, 1.1], [0.5, 0.2, -0.9]]).unwrap();
        let inputs = [x, p.w1, p.b1, p.w2, p.b2];
        let r = finite_diff_check_many(
            |_, v| {
                let enc = EncoderVars {
                    w1: v[1],
                    b1: v[2],
                    w2: v[3],
                    b2: v[4],
                };
                enc.encode(v[0])?.high.sum()
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
