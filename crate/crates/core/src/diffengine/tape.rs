//! Append-only computation tape with per-matrix-op nodes.
//!
//! Every node stores its forward value. Inputs always reference earlier
//! nodes, so a single reverse sweep over the node list is a valid
//! topological order for the backward pass.

use super::array::{affine_kernel, DenseArray};
use super::mlp::Activation;
use super::EngineError;

/// Handle to a node on a [`ComputationTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Activation { x: Var, kind: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    SumSquares(Var),
    Sum(Var),
    Standardize(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseArray,
}

const STANDARDIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Default)]
pub struct ComputationTape {
    nodes: Vec<Node>,
    output: Option<Var>,
}

/// Gradients of the tape output with respect to every node it depends on.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseArray> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` does not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &DenseArray) -> DenseArray {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| DenseArray::zeros_like(like))
    }
}

impl ComputationTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: DenseArray) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, EngineError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.shape().len() != 2 || wv.cols() != xv.cols() {
            return Err(EngineError::ShapeMismatch {
                op: "affine",
                expected: vec![wv.rows(), xv.cols()],
                got: wv.shape().to_vec(),
            });
        }
        if bv.shape() != [wv.rows()] {
            return Err(EngineError::ShapeMismatch {
                op: "affine bias",
                expected: vec![wv.rows()],
                got: bv.shape().to_vec(),
            });
        }
        let value = affine_kernel(xv, wv, bv);
        Ok(self.push(Op::Affine { x, w, b }, value))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(Op::Activation { x, kind }, value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), EngineError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(EngineError::ShapeMismatch {
                op,
                expected: av.shape().to_vec(),
                got: bv.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), value)
    }

    /// Concatenates along the trailing axis. All parts must have the same
    /// rank and row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        let first = parts.first().ok_or(EngineError::EmptyConcat)?;
        let rank = self.value(*first).shape().len();
        let rows = self.value(*first).rows();
        for p in parts {
            let v = self.value(*p);
            if v.shape().len() != rank || v.rows() != rows {
                return Err(EngineError::ShapeMismatch {
                    op: "concat",
                    expected: self.value(*first).shape().to_vec(),
                    got: v.shape().to_vec(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let shape = if rank == 1 { vec![cols] } else { vec![rows, cols] };
        let value = DenseArray::new(shape, data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = DenseArray::scalar(self.value(a).sum_squares());
        self.push(Op::SumSquares(a), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = DenseArray::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), value)
    }

    /// `(x − mean) / √(var + 1e-12)` over all entries of `x`.
    pub fn standardize(&mut self, a: Var) -> Var {
        let value = standardize_values(self.value(a)).0;
        self.push(Op::Standardize(a), value)
    }

    /// Marks `v` as the program output; required before [`Self::backward`].
    pub fn set_output(&mut self, v: Var) {
        self.output = Some(v);
    }

    pub fn output(&self) -> Option<Var> {
        self.output
    }

    /// Reverse-mode sweep from the finalized output seeded with `seed`.
    pub fn backward(&self, seed: &DenseArray) -> Result<Gradients, EngineError> {
        let out = self.output.ok_or(EngineError::Unfinalized)?;
        self.backward_from(out, seed)
    }

    pub fn backward_from(&self, out: Var, seed: &DenseArray) -> Result<Gradients, EngineError> {
        let out_value = self.value(out);
        if out_value.shape() != seed.shape() {
            return Err(EngineError::ShapeMismatch {
                op: "backward seed",
                expected: out_value.shape().to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.clone());
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
        let accumulate = |grads: &mut [Option<DenseArray>], v: Var, d: DenseArray| match &mut grads
            [v.0]
        {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, inp, out) = (xv.rows(), xv.cols(), wv.rows());
                let mut gx = vec![0.0; n * inp];
                let mut gw = vec![0.0; out * inp];
                let mut gb = vec![0.0; out];
                for r in 0..n {
                    let gr = g.row(r);
                    let xr = xv.row(r);
                    let gxr = &mut gx[r * inp..(r + 1) * inp];
                    for (o, &go) in gr.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        let wr = wv.row(o);
                        let gwr = &mut gw[o * inp..(o + 1) * inp];
                        for i in 0..inp {
                            gxr[i] += go * wr[i];
                            gwr[i] += go * xr[i];
                        }
                    }
                }
                let gx = DenseArray::new(xv.shape().to_vec(), gx).expect("shape");
                let gw = DenseArray::new(wv.shape().to_vec(), gw).expect("shape");
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, DenseArray::vector(gb));
            }
            Op::Activation { x, kind } => {
                let d = g.zip_map(self.value(*x), |gv, xv| gv * kind.derivative(xv));
                accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |gv, bv| gv * bv);
                let gb = g.zip_map(self.value(*a), |gv, av| gv * av);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    let d = DenseArray::new(pv.shape().to_vec(), data).expect("shape");
                    accumulate(grads, *p, d);
                }
            }
            Op::SumSquares(a) => {
                let s = g.data()[0];
                accumulate(grads, *a, self.value(*a).map(|v| 2.0 * s * v));
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                accumulate(grads, *a, self.value(*a).map(|_| s));
            }
            Op::Standardize(a) => {
                let (y, inv_std) = standardize_values(self.value(*a));
                let n = y.len() as f64;
                let mean_g = g.data().iter().sum::<f64>() / n;
                let mean_gy = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * yv)
                    .sum::<f64>()
                    / n;
                let d = g.zip_map(&y, |gv, yv| inv_std * (gv - mean_g - yv * mean_gy));
                accumulate(grads, *a, d);
            }
        }
    }
}

fn standardize_values(x: &DenseArray) -> (DenseArray, f64) {
    let n = x.len() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + STANDARDIZE_EPS).sqrt();
    (x.map(|v| (v - mean) * inv_std), inv_std)
}

/// Unrecorded standardization with the same arithmetic as the tape op.
pub fn standardize(x: &DenseArray) -> DenseArray {
    standardize_values(x).0
}
