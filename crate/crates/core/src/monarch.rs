//! Square order-2 Monarch matrices.
//!
//! With `n = b²`, a Monarch matrix is `Pᵀ · BD(left) · P · BD(right)` where
//! `BD(·)` assembles `b` blocks of b×b into a block-diagonal matrix and `P`
//! is the (b, b) perfect shuffle sending index `a·b + c` to `c·b + a`.
//! Applying it costs `2·b³` multiplications instead of `n² = b⁴`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{shuffle, DiffArray, Graph, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct MonarchMatrix {
    b: usize,
    left: DiffArray,
    right: DiffArray,
}

fn check_blocks(b: usize) -> Result<()> {
    if b == 0 || !b.is_power_of_two() {
        return Err(Error::Config(format!("monarch block count {b} must be a power of two")));
    }
    Ok(())
}

/// Counts scalar multiplications; the unit impl compiles to nothing.
pub trait MulCounter {
    fn add(&mut self, n: u64);
}

impl MulCounter for () {
    #[inline(always)]
    fn add(&mut self, _: u64) {}
}

impl MulCounter for u64 {
    fn add(&mut self, n: u64) {
        *self += n;
    }
}

fn block_diag_counted<C: MulCounter>(blocks: &[f64], src: &[f64], dst: &mut [f64], b: usize, c: &mut C) {
    for k in 0..b {
        for i in 0..b {
            let row = &blocks[k * b * b + i * b..k * b * b + (i + 1) * b];
            let mut acc = 0.0;
            for j in 0..b {
                acc += row[j] * src[k * b + j];
            }
            c.add(b as u64);
            dst[k * b + i] = acc;
        }
    }
}

impl MonarchMatrix {
    /// Blocks drawn i.i.d. from `U[−scale, scale]`.
    pub fn init<R: Rng + ?Sized>(b: usize, scale: f64, rng: &mut R) -> Result<Self> {
        check_blocks(b)?;
        if scale.is_nan() || scale < 0.0 || !scale.is_finite() {
            return Err(Error::Config(format!("monarch init scale {scale} must be non-negative")));
        }
        let mut draw = || -> Vec<f64> {
            (0..b * b * b)
                .map(|_| if scale == 0.0 { 0.0 } else { rng.random_range(-scale..=scale) })
                .collect()
        };
        let left = draw();
        let right = draw();
        Self::from_blocks(b, left, right)
    }

    /// Default scale `1/√n`.
    pub fn init_default<R: Rng + ?Sized>(b: usize, rng: &mut R) -> Result<Self> {
        Self::init(b, 1.0 / b as f64, rng)
    }

    pub fn identity(b: usize) -> Result<Self> {
        check_blocks(b)?;
        let mut blocks = vec![0.0; b * b * b];
        for k in 0..b {
            for i in 0..b {
                blocks[k * b * b + i * b + i] = 1.0;
            }
        }
        Self::from_blocks(b, blocks.clone(), blocks)
    }

    /// `left`/`right` are `b` row-major b×b blocks laid end to end.
    pub fn from_blocks(b: usize, left: Vec<f64>, right: Vec<f64>) -> Result<Self> {
        check_blocks(b)?;
        Ok(Self {
            b,
            left: DiffArray::new(&[b, b, b], left)?.into_trainable(),
            right: DiffArray::new(&[b, b, b], right)?.into_trainable(),
        })
    }

    pub fn blocks(&self) -> usize {
        self.b
    }

    pub fn size(&self) -> usize {
        self.b * self.b
    }

    pub fn left(&self) -> &DiffArray {
        &self.left
    }

    pub fn right(&self) -> &DiffArray {
        &self.right
    }

    pub fn left_mut(&mut self) -> &mut DiffArray {
        &mut self.left
    }

    pub fn right_mut(&mut self) -> &mut DiffArray {
        &mut self.right
    }

    pub fn into_parts(self) -> (DiffArray, DiffArray) {
        (self.left, self.right)
    }

    /// `dense(M)·x` without materialising the matrix.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply_with(x, &mut ())
    }

    /// Same as [`apply`](Self::apply), also returning the multiplication count.
    pub fn apply_counted(&self, x: &[f64]) -> Result<(Vec<f64>, u64)> {
        let mut count = 0u64;
        let y = self.apply_with(x, &mut count)?;
        Ok((y, count))
    }

    fn apply_with<C: MulCounter>(&self, x: &[f64], counter: &mut C) -> Result<Vec<f64>> {
        let (b, n) = (self.b, self.size());
        if x.len() != n {
            return Err(Error::dim(format!("monarch of size {n} applied to length {}", x.len())));
        }
        let mut y = vec![0.0; n];
        let mut z = vec![0.0; n];
        block_diag_counted(self.right.values(), x, &mut y, b, counter);
        shuffle(&y, &mut z, b);
        block_diag_counted(self.left.values(), &z, &mut y, b, counter);
        let mut out = vec![0.0; n];
        shuffle(&y, &mut out, b);
        Ok(out)
    }

    /// Explicit `Pᵀ · BD(left) · P · BD(right)` as an n×n array.
    pub fn dense(&self) -> DiffArray {
        let (b, n) = (self.b, self.size());
        let bd = |blocks: &[f64]| {
            let mut m = vec![0.0; n * n];
            for k in 0..b {
                for i in 0..b {
                    for j in 0..b {
                        m[(k * b + i) * n + k * b + j] = blocks[k * b * b + i * b + j];
                    }
                }
            }
            m
        };
        let mut p = vec![0.0; n * n];
        for a in 0..b {
            for c in 0..b {
                // column a·b+c maps to row c·b+a
                p[(c * b + a) * n + a * b + c] = 1.0;
            }
        }
        let mut pt = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                pt[j * n + i] = p[i * n + j];
            }
        }
        let product = [pt, bd(self.left.values()), p, bd(self.right.values())]
            .into_iter()
            .reduce(|acc, m| naive_matmul(&acc, &m, n))
            .expect("four factors");
        DiffArray::new(&[n, n], product).expect("square shape")
    }
}

fn naive_matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let av = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += av * b[k * n + j];
            }
        }
    }
    out
}

/// Differentiable Monarch apply of a length-n vector.
pub fn monarch_apply(graph: &mut Graph, left: Var, right: Var, x: Var) -> Result<Var> {
    let n = graph.value(x).len();
    let row = graph.reshape(x, &[1, n])?;
    let y = graph.monarch_rows(row, left, right)?;
    graph.reshape(y, &[n])
}

/// Multiplications per apply for block count `b`.
pub fn mul_count(b: usize) -> u64 {
    2 * (b as u64).pow(3)
}
