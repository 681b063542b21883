//! Independent numerical oracles for tests.
//!
//! Nothing in here touches the autodiff engine: gradients are estimated by
//! evaluating a plain scalar function at perturbed points.

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Max-norm relative error `max|a - b| / max(max|b|, floor)`.
///
/// The floor keeps all-zero reference gradients from dividing by zero.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let scale = numeric
        .iter()
        .chain(analytic.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    worst / scale
}

/// Small deterministic generator (SplitMix64) so oracle inputs do not depend
/// on the crates under test.
#[derive(Clone, Debug)]
pub struct SplitMix(u64);

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        SplitMix(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let unit = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * unit
    }

    /// Uniform magnitude in `[min_abs, max_abs)` with random sign; keeps
    /// samples away from kinks at zero.
    pub fn away_from_zero(&mut self, min_abs: f64, max_abs: f64) -> f64 {
        let mag = self.uniform(min_abs, max_abs);
        if self.next_u64() & 1 == 0 {
            mag
        } else {
            -mag
        }
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}


pub mod gradcheck {
    //! Compare tape gradients against central differences in `f64`.

    use bssgan_tensor::{Tape, Tensor, Var};

    use super::{central_difference, max_relative_error, SplitMix};

    /// Step used for every finite-difference check.
    pub const STEP: f64 = 1e-3;

    /// Builds an op on a fresh tape from its inputs and returns the output.
    pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

    /// Projects the op output onto fixed random weights so the scalar loss
    /// exercises every output element, then returns the worst relative error
    /// over all inputs.
    pub fn check(inputs: &[Tensor<f64>], build: &Build<'_>, seed: u64) -> f64 {
        let out_len = {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).len()
        };
        let weights = SplitMix::new(seed ^ 0xABCD).vec(out_len, -1.0, 1.0);

        let project = |tape: &mut Tape<f64>, out: Var| -> Var {
            if tape.value(out).len() == 1 {
                return out;
            }
            let w = tape.constant(Tensor::new(tape.shape(out), weights.clone()).unwrap());
            let prod = tape.mul(out, w).unwrap();
            tape.sum(prod)
        };

        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let loss = project(&mut tape, out);
        let grads = tape.backward(loss).expect("backward");
        let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.get_or_zero(v).into_data()).collect();

        let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
        let numeric = central_difference(
            |x| {
                let mut tape = Tape::<f64>::new();
                let mut offset = 0;
                let vars: Vec<Var> = inputs
                    .iter()
                    .map(|t| {
                        let part = x[offset..offset + t.len()].to_vec();
                        offset += t.len();
                        tape.constant(Tensor::new(t.shape(), part).unwrap())
                    })
                    .collect();
                let out = build(&mut tape, &vars);
                let loss = project(&mut tape, out);
                tape.value(loss).item()
            },
            &flat,
            STEP,
        );
        max_relative_error(&analytic, &numeric)
    }
}
