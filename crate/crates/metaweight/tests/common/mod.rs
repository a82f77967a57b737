#![allow(dead_code)]

//! Shared finite-difference oracle: random differentiation programs
//! encoded as data, evaluated independently of the backward pass.
//!
//! Random programs are generated as data so they can be re-evaluated at
//! perturbed leaf values: the central-difference oracle is fully independent
//! of the backward pass it checks.

pub mod equiv;

use metaweight::autograd::{nnops, Tape, Tensor};
use metaweight::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub enum Step {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    DivSafe(usize, usize), // denominator passed through softplus + 0.5
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize, f64),
    Exp(usize),
    LnSafe(usize), // argument passed through softplus + 0.5
    SqrtSafe(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Matmul(usize, usize),
    Transpose(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastScalarTo(usize, Vec<usize>),
    BroadcastRows(usize, usize),
    BroadcastCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>, usize),
    PickCols(usize, Vec<usize>),
    ScatterCols(usize, Vec<usize>, usize),
    SliceRows(usize, usize, usize),
    PadRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    PadCols(usize, usize, usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    Reshape(usize, Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    Kl(usize, usize),
}

/// Run a program: leaves first, then each step appends one slot; the final
/// slot is reduced to a scalar.
pub fn eval(tape: &Tape, leaves: &[Tensor], steps: &[Step]) -> Result<Tensor> {
    let mut slots: Vec<Tensor> = leaves.to_vec();
    for s in steps {
        let t = match s {
            Step::Add(a, b) => tape.add(&slots[*a], &slots[*b])?,
            Step::Sub(a, b) => tape.sub(&slots[*a], &slots[*b])?,
            Step::Mul(a, b) => tape.mul(&slots[*a], &slots[*b])?,
            Step::DivSafe(a, b) => {
                let den = tape.add_const(&tape.softplus(&slots[*b])?, 0.5)?;
                tape.div(&slots[*a], &den)?
            }
            Step::Neg(a) => tape.neg(&slots[*a])?,
            Step::Scale(a, c) => tape.scale(&slots[*a], *c)?,
            Step::AddConst(a, c) => tape.add_const(&slots[*a], *c)?,
            Step::Exp(a) => tape.exp(&tape.tanh(&slots[*a])?)?, // bounded argument
            Step::LnSafe(a) => tape.ln(&tape.add_const(&tape.softplus(&slots[*a])?, 0.5)?)?,
            Step::SqrtSafe(a) => tape.sqrt(&tape.add_const(&tape.softplus(&slots[*a])?, 0.5)?)?,
            Step::Tanh(a) => tape.tanh(&slots[*a])?,
            Step::Relu(a) => tape.relu(&slots[*a])?,
            Step::Sigmoid(a) => tape.sigmoid(&slots[*a])?,
            Step::Softplus(a) => tape.softplus(&slots[*a])?,
            Step::Matmul(a, b) => tape.matmul(&slots[*a], &slots[*b])?,
            Step::Transpose(a) => tape.transpose(&slots[*a])?,
            Step::SumAll(a) => tape.sum_all(&slots[*a])?,
            Step::SumRows(a) => tape.sum_rows(&slots[*a])?,
            Step::SumCols(a) => tape.sum_cols(&slots[*a])?,
            Step::BroadcastScalarTo(a, shape) => tape.broadcast_scalar(&slots[*a], shape)?,
            Step::BroadcastRows(a, r) => tape.broadcast_rows(&slots[*a], *r)?,
            Step::BroadcastCols(a, c) => tape.broadcast_cols(&slots[*a], *c)?,
            Step::GatherRows(a, idx) => tape.gather_rows(&slots[*a], idx)?,
            Step::ScatterAddRows(a, idx, rows) => tape.scatter_add_rows(&slots[*a], idx, *rows)?,
            Step::PickCols(a, cols) => tape.pick_cols(&slots[*a], cols)?,
            Step::ScatterCols(a, cols, w) => tape.scatter_cols(&slots[*a], cols, *w)?,
            Step::SliceRows(a, s0, l) => tape.slice_rows(&slots[*a], *s0, *l)?,
            Step::PadRows(a, s0, t0) => tape.pad_rows(&slots[*a], *s0, *t0)?,
            Step::SliceCols(a, s0, l) => tape.slice_cols(&slots[*a], *s0, *l)?,
            Step::PadCols(a, s0, t0) => tape.pad_cols(&slots[*a], *s0, *t0)?,
            Step::ConcatRows(a, b) => tape.concat_rows(&[&slots[*a], &slots[*b]])?,
            Step::ConcatCols(a, b) => tape.concat_cols(&[&slots[*a], &slots[*b]])?,
            Step::Reshape(a, shape) => tape.reshape(&slots[*a], shape)?,
            Step::Softmax(a) => nnops::softmax_rows(tape, &slots[*a])?,
            Step::LogSoftmax(a) => nnops::log_softmax_rows(tape, &slots[*a])?,
            Step::Kl(a, b) => nnops::kl_divergence(tape, &slots[*a], &slots[*b], nnops::Reduce::Sum)?,
        };
        slots.push(t);
    }
    let last = slots.last().unwrap();
    // Squash to a scalar through a nonlinearity so every element matters.
    if last.is_scalar() {
        tape.tanh(last)
    } else {
        tape.tanh(&tape.sum_all(&tape.tanh(last)?)?)
    }
}

pub fn eval_value(leaf_vals: &[Vec<f64>], shapes: &[Vec<usize>], steps: &[Step]) -> f64 {
    let tape = Tape::inference();
    let leaves: Vec<Tensor> = leaf_vals
        .iter()
        .zip(shapes)
        .map(|(v, s)| Tensor::from_vec(s.clone(), v.clone()).unwrap())
        .collect();
    eval(&tape, &leaves, steps).unwrap().item()
}

/// Central finite differences of the program output with respect to every
/// leaf coordinate.
pub fn fd_grads(leaf_vals: &[Vec<f64>], shapes: &[Vec<usize>], steps: &[Step], h: f64) -> Vec<Vec<f64>> {
    let mut grads = Vec::new();
    for li in 0..leaf_vals.len() {
        let mut g = vec![0.0; leaf_vals[li].len()];
        for i in 0..leaf_vals[li].len() {
            let mut plus = leaf_vals.to_vec();
            plus[li][i] += h;
            let mut minus = leaf_vals.to_vec();
            minus[li][i] -= h;
            g[i] = (eval_value(&plus, shapes, steps) - eval_value(&minus, shapes, steps)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

pub fn check_close(ad: &[f64], fd: &[f64], rel: f64, abs_floor: f64, ctx: &str) {
    for (i, (a, f)) in ad.iter().zip(fd).enumerate() {
        let tol = abs_floor + rel * a.abs().max(f.abs());
        assert!(
            (a - f).abs() <= tol,
            "{ctx}: coord {i}: ad={a} fd={f} tol={tol}"
        );
    }
}

/// Random program generator. Deterministic per seed.
pub fn random_program(rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Vec<Vec<f64>>, Vec<Step>) {
    let n_leaves = rng.gen_range(2..=3);
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    for _ in 0..n_leaves {
        shapes.push(match rng.gen_range(0..3) {
            0 => vec![],
            1 => vec![rng.gen_range(2..5)],
            _ => vec![rng.gen_range(2..4), rng.gen_range(2..4)],
        });
    }
    let leaf_vals: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n.max(1)).map(|_| rng.gen_range(-1.5..1.5)).collect()
        })
        .collect();

    let mut slot_shapes = shapes.clone();
    let mut steps = Vec::new();
    let n_steps = rng.gen_range(3..9);
    for _ in 0..n_steps {
        let a = rng.gen_range(0..slot_shapes.len());
        let sa = slot_shapes[a].clone();
        let step = match rng.gen_range(0..20) {
            0 => {
                // binary elementwise with a shape-matched partner if any
                let partners: Vec<usize> = (0..slot_shapes.len())
                    .filter(|j| slot_shapes[*j] == sa)
                    .collect();
                let b = partners[rng.gen_range(0..partners.len())];
                match rng.gen_range(0..4) {
                    0 => Step::Add(a, b),
                    1 => Step::Sub(a, b),
                    2 => Step::Mul(a, b),
                    _ => Step::DivSafe(a, b),
                }
            }
            1 => Step::Neg(a),
            2 => Step::Scale(a, rng.gen_range(-2.0..2.0)),
            3 => Step::AddConst(a, rng.gen_range(-1.0..1.0)),
            4 => Step::Exp(a),
            5 => Step::LnSafe(a),
            6 => Step::SqrtSafe(a),
            7 => Step::Tanh(a),
            8 => Step::Relu(a),
            9 => Step::Sigmoid(a),
            10 => Step::Softplus(a),
            11 if sa.len() == 2 => Step::Transpose(a),
            12 if sa.len() == 2 => Step::SumRows(a),
            13 if sa.len() == 2 => Step::SumCols(a),
            14 if sa.is_empty() => {
                Step::BroadcastScalarTo(a, vec![rng.gen_range(2..4), rng.gen_range(2..4)])
            }
            14 if sa.len() == 1 => {
                if rng.gen_bool(0.5) {
                    Step::BroadcastRows(a, rng.gen_range(2..4))
                } else {
                    Step::BroadcastCols(a, rng.gen_range(2..4))
                }
            }
            15 if sa.len() == 2 => {
                let rows = sa[0];
                let t = rng.gen_range(1..=rows + 1);
                let idx: Vec<usize> = (0..t).map(|_| rng.gen_range(0..rows)).collect();
                Step::GatherRows(a, idx)
            }
            16 if sa.len() == 2 => {
                let cols: Vec<usize> = (0..sa[0]).map(|_| rng.gen_range(0..sa[1])).collect();
                Step::PickCols(a, cols)
            }
            17 if sa.len() == 2 => {
                match rng.gen_range(0..4) {
                    0 => {
                        let l = rng.gen_range(1..=sa[0]);
                        Step::SliceRows(a, rng.gen_range(0..=sa[0] - l), l)
                    }
                    1 => {
                        let l = rng.gen_range(1..=sa[1]);
                        Step::SliceCols(a, rng.gen_range(0..=sa[1] - l), l)
                    }
                    2 => {
                        let total = sa[0] + rng.gen_range(1..3);
                        Step::PadRows(a, rng.gen_range(0..=total - sa[0]), total)
                    }
                    _ => {
                        let total = sa[1] + rng.gen_range(1..3);
                        Step::PadCols(a, rng.gen_range(0..=total - sa[1]), total)
                    }
                }
            }
            18 if sa.len() == 2 => {
                if rng.gen_bool(0.5) {
                    Step::Softmax(a)
                } else {
                    Step::LogSoftmax(a)
                }
            }
            19 if sa.len() == 2 => {
                let partners: Vec<usize> = (0..slot_shapes.len())
                    .filter(|j| slot_shapes[*j] == sa)
                    .collect();
                let b = partners[rng.gen_range(0..partners.len())];
                if rng.gen_bool(0.4) {
                    Step::Kl(a, b)
                } else {
                    Step::Matmul(a, b.min(a)).pick_matmul(&slot_shapes, rng)
                }
            }
            _ => Step::Tanh(a),
        };
        let out_shape = step.out_shape(&slot_shapes);
        slot_shapes.push(out_shape);
        steps.push(step);
    }
    (shapes, leaf_vals, steps)
}

impl Step {
    // Find a conformable right operand for matmul, or fall back to transpose
    // self-product which always conforms.
    fn pick_matmul(self, slot_shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Step {
        if let Step::Matmul(a, _) = self {
            let k = slot_shapes[a][1];
            let partners: Vec<usize> = (0..slot_shapes.len())
                .filter(|j| slot_shapes[*j].len() == 2 && slot_shapes[*j][0] == k)
                .collect();
            if partners.is_empty() {
                Step::Transpose(a)
            } else {
                Step::Matmul(a, partners[rng.gen_range(0..partners.len())])
            }
        } else {
            self
        }
    }

    fn out_shape(&self, slots: &[Vec<usize>]) -> Vec<usize> {
        match self {
            Step::Add(a, _)
            | Step::Sub(a, _)
            | Step::Mul(a, _)
            | Step::DivSafe(a, _)
            | Step::Neg(a)
            | Step::Scale(a, _)
            | Step::AddConst(a, _)
            | Step::Exp(a)
            | Step::LnSafe(a)
            | Step::SqrtSafe(a)
            | Step::Tanh(a)
            | Step::Relu(a)
            | Step::Sigmoid(a)
            | Step::Softplus(a)
            | Step::Softmax(a)
            | Step::LogSoftmax(a) => slots[*a].clone(),
            Step::Matmul(a, b) => vec![slots[*a][0], slots[*b][1]],
            Step::Transpose(a) => vec![slots[*a][1], slots[*a][0]],
            Step::SumAll(_) | Step::Kl(_, _) => vec![],
            Step::SumRows(a) => vec![slots[*a][1]],
            Step::SumCols(a) => vec![slots[*a][0]],
            Step::BroadcastScalarTo(_, s) => s.clone(),
            Step::BroadcastRows(a, r) => vec![*r, slots[*a][0]],
            Step::BroadcastCols(a, c) => vec![slots[*a][0], *c],
            Step::GatherRows(a, idx) => vec![idx.len(), slots[*a][1]],
            Step::ScatterAddRows(a, _, rows) => vec![*rows, slots[*a][1]],
            Step::PickCols(_, cols) => vec![cols.len()],
            Step::ScatterCols(_, cols, w) => vec![cols.len(), *w],
            Step::SliceRows(a, _, l) => {
                if slots[*a].len() == 1 {
                    vec![*l]
                } else {
                    vec![*l, slots[*a][1]]
                }
            }
            Step::PadRows(a, _, t) => {
                if slots[*a].len() == 1 {
                    vec![*t]
                } else {
                    vec![*t, slots[*a][1]]
                }
            }
            Step::SliceCols(a, _, l) => vec![slots[*a][0], *l],
            Step::PadCols(a, _, t) => vec![slots[*a][0], *t],
            Step::ConcatRows(a, b) => {
                let mut s = slots[*a].clone();
                s[0] += slots[*b][0];
                s
            }
            Step::ConcatCols(a, b) => {
                let mut s = slots[*a].clone();
                s[1] += slots[*b][1];
                s
            }
            Step::Reshape(_, s) => s.clone(),
        }
    }
}

/// First-order check, reusable by the acceptance suite.
pub fn run_random_graph_suite(n_graphs: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for gi in 0..n_graphs {
        let (shapes, leaf_vals, steps) = random_program(&mut rng);
        let tape = Tape::new();
        let leaves: Vec<Tensor> = leaf_vals
            .iter()
            .zip(&shapes)
            .map(|(v, s)| tape.leaf(&Tensor::from_vec(s.clone(), v.clone()).unwrap()))
            .collect();
        let out = eval(&tape, &leaves, &steps).unwrap();
        let wrt: Vec<&Tensor> = leaves.iter().collect();
        let ad = tape.backward(&out, &wrt, false).unwrap();
        let fd = fd_grads(&leaf_vals, &shapes, &steps, 1e-4);
        for (li, (a, f)) in ad.iter().zip(&fd).enumerate() {
            check_close(
                a.data(),
                f,
                1e-3,
                1e-6,
                &format!("graph {gi} leaf {li} ({steps:?})"),
            );
        }
    }
}

