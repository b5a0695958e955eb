//! Finite-difference verification of every tape primitive and training loss.
//!
//! Each case is built once in f64 and once in f32 at the same (f32-representable)
//! point. Both analytic gradients are compared with central differences taken in
//! f64, so the f32 comparison measures the f32 backward pass rather than the
//! rounding noise of an f32 difference quotient. Cases whose relu / leaky relu /
//! clamp inputs sit near a kink are redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{numeric_gradient, GradCheck, Tape, Var};
use crate::baselines::vae_terms;
use crate::error::{Error, Result};
use crate::model::{ae_forward, ae_loss_terms, critic_loss, latent_disc_loss, latent_gen_loss, Bound};
use crate::nn::{init_mlp, layer_dims, standard_activations, Activation, Mlp};
use crate::tensor::{Scalar, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOL_F64: f64 = 1e-7;
pub const TOL_F32: f64 = 1e-4;
/// Minimum distance from a kink for a case to count.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 50;

/// A scalar function of one tensor, buildable at either precision.
pub trait Case {
    fn point(&self) -> &Tensor<f64>;
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub f64_check: GradCheck,
    pub f32_check: GradCheck,
}

fn analytic<T: Scalar, C: Case>(case: &C) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::<T>::new();
    let x = tape.param(case.point().cast());
    let y = case.build(&mut tape, x)?;
    if !tape.value(y).is_scalar() {
        return Err(Error::Invalid("gradient-check case must produce a scalar".into()));
    }
    let margin = tape.kink_margin();
    Ok((tape.backward(y)?.take(x).to_f64_vec(), margin))
}

/// Checks one case; `None` when the point lies within [`KINK_MARGIN`] of a kink.
pub fn check_case<C: Case>(case: &C) -> Result<Option<CaseResult>> {
    let (a64, m64) = analytic::<f64, C>(case)?;
    let (a32, m32) = analytic::<f32, C>(case)?;
    if m64.min(m32) < KINK_MARGIN {
        return Ok(None);
    }
    let value = |p: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(p.clone());
        let y = case.build(&mut tape, x)?;
        Ok(tape.value(y).item())
    };
    let numeric = numeric_gradient(value, case.point(), STEP)?;
    Ok(Some(CaseResult {
        f64_check: GradCheck::compare(&a64, &numeric),
        f32_check: GradCheck::compare(&a32, &numeric),
    }))
}

fn f32_round(t: Tensor<f64>) -> Tensor<f64> {
    t.cast::<f32>().cast()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    f32_round(Tensor::new(shape.to_vec(), data).expect("sized"))
}

/// Reduces any output to a scalar through a fixed random projection.
fn project<T: Scalar>(tape: &mut Tape<T>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4F4A);
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0).cast());
    let p = tape.mul(out, w)?;
    let m = tape.mean(p)?;
    let n = shape.iter().product::<usize>() as f64;
    tape.scale(m, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prim {
    Add,
    Sub,
    Mul,
    Scale,
    Neg,
    AddScalar,
    MatMul,
    AddRow,
    MulRow,
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Pow,
    Square,
    Clamp,
    Mean,
    SumSq,
    MeanSq,
    SumCols,
    ColMean,
    ColVar,
    SliceCols,
    Lerp,
    BatchNorm,
    SelectRows,
}

pub const PRIMITIVES: &[Prim] = &[
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::Scale,
    Prim::Neg,
    Prim::AddScalar,
    Prim::MatMul,
    Prim::AddRow,
    Prim::MulRow,
    Prim::LeakyRelu,
    Prim::Relu,
    Prim::Tanh,
    Prim::Sigmoid,
    Prim::Exp,
    Prim::Log,
    Prim::Pow,
    Prim::Square,
    Prim::Clamp,
    Prim::Mean,
    Prim::SumSq,
    Prim::MeanSq,
    Prim::SumCols,
    Prim::ColMean,
    Prim::ColVar,
    Prim::SliceCols,
    Prim::Lerp,
    Prim::BatchNorm,
    Prim::SelectRows,
];

impl Prim {
    pub fn name(self) -> &'static str {
        match self {
            Prim::Add => "add",
            Prim::Sub => "sub",
            Prim::Mul => "mul",
            Prim::Scale => "scale",
            Prim::Neg => "neg",
            Prim::AddScalar => "add_scalar",
            Prim::MatMul => "matmul",
            Prim::AddRow => "add_row",
            Prim::MulRow => "mul_row",
            Prim::LeakyRelu => "leaky_relu",
            Prim::Relu => "relu",
            Prim::Tanh => "tanh",
            Prim::Sigmoid => "sigmoid",
            Prim::Exp => "exp",
            Prim::Log => "log",
            Prim::Pow => "pow",
            Prim::Square => "square",
            Prim::Clamp => "clamp",
            Prim::Mean => "mean",
            Prim::SumSq => "sum_sq",
            Prim::MeanSq => "mean_sq",
            Prim::SumCols => "sum_cols",
            Prim::ColMean => "col_mean",
            Prim::ColVar => "col_var",
            Prim::SliceCols => "slice_cols",
            Prim::Lerp => "lerp_rows",
            Prim::BatchNorm => "batch_norm",
            Prim::SelectRows => "select_rows",
        }
    }

    /// Number of differentiable operands.
    pub fn arity(self) -> usize {
        match self {
            Prim::Add | Prim::Sub | Prim::Mul | Prim::MatMul | Prim::AddRow | Prim::MulRow => 2,
            Prim::Lerp => 3,
            _ => 1,
        }
    }
}

/// One random instance of a primitive, differentiated with respect to operand `arg`.
#[derive(Clone, Debug)]
pub struct PrimCase {
    pub prim: Prim,
    pub arg: usize,
    inputs: Vec<Tensor<f64>>,
    param: f64,
    range: (usize, usize),
    indices: Vec<usize>,
    seed: u64,
}

impl PrimCase {
    pub fn random(prim: Prim, arg: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.random_range(if prim == Prim::BatchNorm { 3..=6 } else { 1..=5 });
        let c = rng.random_range(1..=4);
        let k = rng.random_range(1..=4);
        let (lo, hi) = match prim {
            Prim::Log | Prim::Pow => (0.5, 2.0),
            _ => (-2.0, 2.0),
        };
        let inputs = match prim {
            Prim::MatMul => vec![uniform(&mut rng, &[r, k], lo, hi), uniform(&mut rng, &[k, c], lo, hi)],
            Prim::AddRow | Prim::MulRow => vec![uniform(&mut rng, &[r, c], lo, hi), uniform(&mut rng, &[1, c], lo, hi)],
            Prim::Lerp => vec![
                uniform(&mut rng, &[r, c], lo, hi),
                uniform(&mut rng, &[r, c], lo, hi),
                uniform(&mut rng, &[r, 1], 0.0, 1.0),
            ],
            Prim::SliceCols => vec![uniform(&mut rng, &[r, c + 1], lo, hi)],
            _ => (0..prim.arity()).map(|_| uniform(&mut rng, &[r, c], lo, hi)).collect(),
        };
        let param = match prim {
            Prim::Pow => [2.0, 3.0, 0.5, -1.5][rng.random_range(0..4)],
            Prim::LeakyRelu => 0.2,
            _ => (-2.0 + 4.0 * rng.random::<f64>()) as f32 as f64,
        };
        let start = rng.random_range(0..=c);
        let range = (start, rng.random_range(start + 1..=c + 1));
        let m = rng.random_range(1..=6);
        let indices = (0..m).map(|_| rng.random_range(0..r)).collect();
        PrimCase { prim, arg, inputs, param, range, indices, seed }
    }
}

impl Case for PrimCase {
    fn point(&self) -> &Tensor<f64> {
        &self.inputs[self.arg]
    }

    fn build<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let v: Vec<Var> = (0..self.inputs.len())
            .map(|i| if i == self.arg { x } else { tape.constant(self.inputs[i].cast()) })
            .collect();
        let p = self.param;
        let out = match self.prim {
            Prim::Add => tape.add(v[0], v[1]),
            Prim::Sub => tape.sub(v[0], v[1]),
            Prim::Mul => tape.mul(v[0], v[1]),
            Prim::Scale => tape.scale(v[0], p),
            Prim::Neg => tape.neg(v[0]),
            Prim::AddScalar => tape.add_scalar(v[0], p),
            Prim::MatMul => tape.matmul(v[0], v[1]),
            Prim::AddRow => tape.add_row(v[0], v[1]),
            Prim::MulRow => tape.mul_row(v[0], v[1]),
            Prim::LeakyRelu => tape.leaky_relu(v[0], p),
            Prim::Relu => tape.relu(v[0]),
            Prim::Tanh => tape.tanh(v[0]),
            Prim::Sigmoid => tape.sigmoid(v[0]),
            Prim::Exp => tape.exp(v[0]),
            Prim::Log => tape.log(v[0]),
            Prim::Pow => tape.pow(v[0], p),
            Prim::Square => tape.square(v[0]),
            Prim::Clamp => tape.clamp(v[0], -0.5, 0.7),
            Prim::Mean => tape.mean(v[0]),
            Prim::SumSq => tape.sum_sq(v[0]),
            Prim::MeanSq => tape.mean_sq(v[0]),
            Prim::SumCols => tape.sum_cols(v[0]),
            Prim::ColMean => tape.col_mean(v[0]),
            Prim::ColVar => tape.col_var(v[0]),
            Prim::SliceCols => tape.slice_cols(v[0], self.range.0, self.range.1),
            Prim::Lerp => tape.lerp_rows(v[0], v[1], v[2]),
            Prim::BatchNorm => tape.batch_norm(v[0], 1e-5),
            Prim::SelectRows => tape.select_rows(v[0], &self.indices),
        }?;
        project(tape, out, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Interpolation-critic loss, with respect to the critic.
    Critic,
    /// Autoencoder loss (with latent BN and interpolants), with respect to E or G.
    Autoencoder,
    /// Hinge latent-critic loss, with respect to D.
    LatentCritic,
    /// Latent generator loss, with respect to g.
    LatentGenerator,
    /// Negative ELBO with frozen noise, with respect to the VAE encoder or decoder.
    Vae,
}

pub const LOSSES: &[LossKind] = &[
    LossKind::Critic,
    LossKind::Autoencoder,
    LossKind::LatentCritic,
    LossKind::LatentGenerator,
    LossKind::Vae,
];

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Critic => "loss_critic",
            LossKind::Autoencoder => "loss_autoencoder",
            LossKind::LatentCritic => "loss_latent_critic",
            LossKind::LatentGenerator => "loss_latent_generator",
            LossKind::Vae => "loss_vae",
        }
    }
}

/// A loss on tiny networks, differentiated with respect to one parameter tensor.
#[derive(Clone, Debug)]
pub struct LossCase {
    pub kind: LossKind,
    nets: Vec<Mlp<f64>>,
    /// `(network, parameter index)` being checked.
    target: (usize, usize),
    consts: Vec<Tensor<f64>>,
    point: Tensor<f64>,
}

const B: usize = 4;
const DX: usize = 2;
const DZ: usize = 2;

fn tiny_net(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Mlp<f64> {
    let dims = layer_dims(input, 5, 3, output);
    let net = init_mlp::<f64>(&dims, &standard_activations(3, Activation::Identity), rng.random()).expect("valid dims");
    let mut net = net.cast::<f32>().cast::<f64>();
    // non-zero biases so every parameter influences the loss generically
    for p in net.params_mut() {
        if p.rows() == 1 {
            *p = uniform(rng, p.shape(), -0.3, 0.3);
        }
    }
    net
}

impl LossCase {
    pub fn random(kind: LossKind, index: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nets, trainable, consts): (Vec<Mlp<f64>>, Vec<usize>, Vec<Tensor<f64>>) = match kind {
            LossKind::Critic => (
                vec![tiny_net(&mut rng, DX, 1)],
                vec![0],
                vec![
                    uniform(&mut rng, &[B, DX], -1.0, 1.0),
                    uniform(&mut rng, &[B, DX], -1.0, 1.0),
                    uniform(&mut rng, &[B, DX], -1.0, 1.0),
                    uniform(&mut rng, &[B, 1], 0.0, 0.5),
                ],
            ),
            LossKind::Autoencoder => (
                vec![tiny_net(&mut rng, DX, DZ), tiny_net(&mut rng, DZ, DX), tiny_net(&mut rng, DX, 1)],
                vec![0, 1],
                vec![uniform(&mut rng, &[B, DX], -1.0, 1.0), uniform(&mut rng, &[B, 1], 0.0, 0.5)],
            ),
            LossKind::LatentCritic => (
                vec![tiny_net(&mut rng, DZ, 1)],
                vec![0],
                vec![uniform(&mut rng, &[B, DZ], -2.0, 2.0), uniform(&mut rng, &[B, DZ], -2.0, 2.0)],
            ),
            LossKind::LatentGenerator => (
                vec![tiny_net(&mut rng, DZ, DZ), tiny_net(&mut rng, DZ, 1)],
                vec![0],
                vec![uniform(&mut rng, &[B, DZ], -2.0, 2.0)],
            ),
            LossKind::Vae => (
                vec![tiny_net(&mut rng, DX, 2 * DZ), tiny_net(&mut rng, DZ, DX)],
                vec![0, 1],
                vec![uniform(&mut rng, &[B, DX], -1.0, 1.0), uniform(&mut rng, &[B, DZ], -2.0, 2.0)],
            ),
        };
        // cycle through every trainable parameter tensor across case indices
        let slots: Vec<(usize, usize)> = trainable
            .iter()
            .flat_map(|&n| (0..nets[n].params().len()).map(move |p| (n, p)))
            .collect();
        let target = slots[index % slots.len()];
        let point = nets[target.0].params()[target.1].clone();
        LossCase { kind, nets, target, consts, point }
    }

    fn bind<'a, T: Scalar>(&self, nets: &'a [Mlp<T>], i: usize, tape: &mut Tape<T>, x: Var) -> Bound<'a, T> {
        let mut b = Bound::new(&nets[i], tape, false);
        if self.target.0 == i {
            b.vars.replace(self.target.1, x);
        }
        b
    }
}

impl Case for LossCase {
    fn point(&self) -> &Tensor<f64> {
        &self.point
    }

    fn build<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let nets: Vec<Mlp<T>> = self.nets.iter().map(|n| n.cast()).collect();
        let c: Vec<Tensor<T>> = self.consts.iter().map(|t| t.cast()).collect();
        match self.kind {
            LossKind::Critic => {
                let d = self.bind(&nets, 0, tape, x);
                critic_loss(tape, &d, &c[0], &c[1], &c[2], &c[3], 0.2, 0.2)
            }
            LossKind::Autoencoder => {
                let e = self.bind(&nets, 0, tape, x);
                let g = self.bind(&nets, 1, tape, x);
                let d = self.bind(&nets, 2, tape, x);
                let xv = tape.constant(c[0].clone());
                let f = ae_forward(tape, &e, &g, xv, Some(&c[1]), Some(1e-5))?;
                ae_loss_terms(tape, &d, xv, f.x_hat, f.x_mu.expect("interpolants requested"), 0.5, 0.5)
            }
            LossKind::LatentCritic => {
                let d = self.bind(&nets, 0, tape, x);
                latent_disc_loss(tape, &d, &c[0], &c[1])
            }
            LossKind::LatentGenerator => {
                let g = self.bind(&nets, 0, tape, x);
                let d = self.bind(&nets, 1, tape, x);
                latent_gen_loss(tape, &g, &d, &c[0])
            }
            LossKind::Vae => {
                let e = self.bind(&nets, 0, tape, x);
                let g = self.bind(&nets, 1, tape, x);
                let xv = tape.constant(c[0].clone());
                Ok(vae_terms(tape, &e, &g, xv, &c[1], DZ, 0.7)?.loss)
            }
        }
    }
}

/// Aggregate over all cases of one check at one precision.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub precision: &'static str,
    pub cases: usize,
    /// Draws discarded for lying near a kink.
    pub redrawn: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub const SUITE_HEADER: &str = "check,precision,cases,redrawn,max_rel_error,tolerance,passed";

pub fn suite_csv(rows: &[SuiteRow]) -> String {
    let mut out = format!("{SUITE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:e},{:e},{}\n",
            r.name,
            r.precision,
            r.cases,
            r.redrawn,
            r.max_rel_error,
            r.tolerance,
            r.passed()
        ));
    }
    out
}

fn run_check<C: Case>(name: String, cases: usize, draw: impl Fn(u64) -> C, seed: u64) -> Result<[SuiteRow; 2]> {
    let mut worst = (0.0f64, 0.0f64);
    let mut redrawn = 0;
    let mut attempt = 0u64;
    for _ in 0..cases {
        let mut tries = 0;
        let result = loop {
            let case = draw(seed.wrapping_add(attempt));
            attempt += 1;
            match check_case(&case)? {
                Some(r) => break r,
                None => {
                    redrawn += 1;
                    tries += 1;
                    if tries > MAX_REDRAWS {
                        return Err(Error::Invalid(format!("{name}: no draw away from kinks")));
                    }
                }
            }
        };
        worst.0 = worst.0.max(result.f64_check.max_rel_error);
        worst.1 = worst.1.max(result.f32_check.max_rel_error);
    }
    let row = |precision, max_rel_error, tolerance| SuiteRow {
        name: name.clone(),
        precision,
        cases,
        redrawn,
        max_rel_error,
        tolerance,
    };
    Ok([row("f64", worst.0, TOL_F64), row("f32", worst.1, TOL_F32)])
}

/// Every primitive (each differentiable operand separately) and every loss,
/// `cases` random instances each, at both precisions.
pub fn run_suite(cases: usize, seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for (pi, &prim) in PRIMITIVES.iter().enumerate() {
        for arg in 0..prim.arity() {
            let name = if prim.arity() > 1 {
                format!("{}/{arg}", prim.name())
            } else {
                prim.name().to_string()
            };
            let base = seed ^ ((pi as u64) << 40) ^ ((arg as u64) << 32);
            rows.extend(run_check(name, cases, |s| PrimCase::random(prim, arg, s), base)?);
        }
    }
    for (li, &kind) in LOSSES.iter().enumerate() {
        let base = seed ^ ((li as u64 + 100) << 40);
        let counter = std::cell::Cell::new(0usize);
        rows.extend(run_check(
            kind.name().to_string(),
            cases,
            |s| {
                let i = counter.get();
                counter.set(i + 1);
                LossCase::random(kind, i, s)
            },
            base,
        )?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_tape_primitive_is_listed() {
        let names: Vec<&str> = PRIMITIVES.iter().map(|p| p.name()).collect();
        for kind in [
            "add", "sub", "mul", "scale", "add_scalar", "matmul", "add_row", "mul_row", "leaky_relu", "relu",
            "tanh", "sigmoid", "exp", "log", "pow", "clamp", "mean", "sum_sq", "sum_cols", "col_mean", "col_var",
            "slice_cols", "lerp_rows", "batch_norm", "select_rows",
        ] {
            assert!(names.contains(&kind), "{kind}");
        }
    }

    #[test]
    fn small_suite_passes() {
        for row in run_suite(3, 1).unwrap() {
            assert!(row.passed(), "{row:?}");
        }
    }

    #[test]
    fn broken_gradient_is_caught() {
        // d/dx of x·x evaluated as if it were x: analytic 1 vs numeric 2x
        struct Wrong(Tensor<f64>);
        impl Case for Wrong {
            fn point(&self) -> &Tensor<f64> {
                &self.0
            }
            fn build<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
                let c = tape.constant(tape.value(x).clone());
                let y = tape.mul(x, c)?;
                tape.mean(y)
            }
        }
        let r = check_case(&Wrong(Tensor::from_f64_slice(&[1], &[3.0]).unwrap())).unwrap().unwrap();
        assert!(!r.f64_check.passed(TOL_F64) && !r.f32_check.passed(TOL_F32));
    }

    #[test]
    fn kink_cases_are_skipped() {
        struct AtKink;
        impl Case for AtKink {
            fn point(&self) -> &Tensor<f64> {
                static P: std::sync::OnceLock<Tensor<f64>> = std::sync::OnceLock::new();
                P.get_or_init(|| Tensor::from_f64_slice(&[1], &[1e-6]).unwrap())
            }
            fn build<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
                tape.relu(x)
            }
        }
        assert!(check_case(&AtKink).unwrap().is_none());
    }
}
