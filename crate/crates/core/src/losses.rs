//! Fine-tuning objectives. Each has a tape form taking graph variables and an
//! eager form on a [`PairBatch`] of plain vectors.

use crate::error::{Error, Result};
use crate::numeric::{norm, DiffArray, Graph, Var};

pub const DEFAULT_MNRL_SCALE: f64 = 20.0;
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mnrl,
    Opl,
    Pl,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnrl" => Ok(Self::Mnrl),
            "opl" => Ok(Self::Opl),
            "pl" => Ok(Self::Pl),
            other => Err(Error::Config(format!("unknown loss `{other}` (mnrl, opl, pl)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mnrl => "mnrl",
            Self::Opl => "opl",
            Self::Pl => "pl",
        })
    }
}

/// A query with its positive document and any number of negatives, all
/// unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

impl PairBatch {
    pub fn new(query: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>) -> Result<Self> {
        let d = query.len();
        for v in std::iter::once(&query).chain(std::iter::once(&positive)).chain(&negatives) {
            if v.len() != d {
                return Err(Error::dim(format!("vector of length {} in a batch of dim {d}", v.len())));
            }
            let n = norm(v);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::DegenerateVector(format!("batch member has norm {n}, expected 1")));
            }
        }
        Ok(Self {
            query,
            positive,
            negatives,
        })
    }

    fn bind(&self, g: &mut Graph) -> (Var, Var, Vec<Var>) {
        let q = g.constant(&DiffArray::vector(self.query.clone()));
        let p = g.constant(&DiffArray::vector(self.positive.clone()));
        let n = self
            .negatives
            .iter()
            .map(|v| g.constant(&DiffArray::vector(v.clone())))
            .collect();
        (q, p, n)
    }

    pub fn mnrl(&self, scale: f64) -> Result<f64> {
        let mut g = Graph::new();
        let (q, p, n) = self.bind(&mut g);
        let l = mnrl(&mut g, q, p, &n, scale)?;
        Ok(g.scalar(l))
    }

    /// OPL of the query against the positive (label 1).
    pub fn opl_positive(&self) -> Result<f64> {
        let mut g = Graph::new();
        let (q, p, _) = self.bind(&mut g);
        let l = opl(&mut g, q, p, 1.0)?;
        Ok(g.scalar(l))
    }
}

/// Cross-entropy of `scale · sims` with the positive at index 0.
pub fn mnrl_from_similarities(g: &mut Graph, sims: Var, scale: f64) -> Result<Var> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("mnrl scale must be positive, got {scale}")));
    }
    if g.value(sims).len() < 2 {
        return Err(Error::BatchContract("mnrl needs at least one negative".into()));
    }
    let scores = g.scale(sims, scale);
    g.softmax_cross_entropy(scores, 0)
}

/// Multiple-negatives ranking loss of `q` against `[p, negatives…]`.
pub fn mnrl(g: &mut Graph, q: Var, p: Var, negatives: &[Var], scale: f64) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::BatchContract("mnrl needs at least one negative".into()));
    }
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    sims.push(g.cosine_sim(q, p)?);
    for &n in negatives {
        sims.push(g.cosine_sim(q, n)?);
    }
    let s = g.stack(&sims)?;
    mnrl_from_similarities(g, s, scale)
}

/// Orthogonal projection loss for a single pair: `(cos(q, doc) − label)²`.
pub fn opl(g: &mut Graph, q: Var, doc: Var, label: f64) -> Result<Var> {
    if label != 0.0 && label != 1.0 {
        return Err(Error::Config(format!("opl label must be 0.0 or 1.0, got {label}")));
    }
    let c = g.cosine_sim(q, doc)?;
    let diff = g.add_const(c, -label);
    Ok(g.square(diff))
}

/// `(1 − cos(tq, sq)) + (1 − cos(tp, sp))`. Teacher inputs should be
/// frozen or constant; gradients reach only the student side.
pub fn prototype_loss(g: &mut Graph, teacher_q: Var, student_q: Var, teacher_p: Var, student_p: Var) -> Result<Var> {
    let cq = g.cosine_sim(teacher_q, student_q)?;
    let cp = g.cosine_sim(teacher_p, student_p)?;
    let s = g.add(cq, cp)?;
    let neg = g.scale(s, -1.0);
    Ok(g.add_const(neg, 2.0))
}

/// Eager prototype loss on plain vectors.
pub fn prototype_loss_value(teacher_q: &[f64], student_q: &[f64], teacher_p: &[f64], student_p: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let mut c = |v: &[f64]| g.constant(&DiffArray::vector(v.to_vec()));
    let (a, b, cc, d) = (c(teacher_q), c(student_q), c(teacher_p), c(student_p));
    let l = prototype_loss(&mut g, a, b, cc, d)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if norm(&v) > 0.1 {
                return unit(v);
            }
        }
    }

    #[test]
    fn mnrl_equal_similarities_is_ln4() {
        let q = vec![1.0, 0.0, 0.0];
        let batch = PairBatch::new(q.clone(), q.clone(), vec![q.clone(); 3]).unwrap();
        assert!((batch.mnrl(20.0).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mnrl_closed_forms() {
        let b = PairBatch::new(vec![1.0, 0.0], vec![1.0, 0.0], vec![vec![0.0, 1.0]]).unwrap();
        assert!((b.mnrl(1.0).unwrap() - 0.31326168751822286).abs() < 1e-12);
        let l = b.mnrl(20.0).unwrap();
        assert!(l < 1e-8);
        assert!((l - (-20f64).exp().ln_1p()).abs() < 1e-20);
    }

    #[test]
    fn mnrl_contract() {
        let b = PairBatch::new(vec![1.0, 0.0], vec![1.0, 0.0], vec![]).unwrap();
        assert!(matches!(b.mnrl(20.0), Err(Error::BatchContract(_))));
        assert!(PairBatch::new(vec![2.0, 0.0], vec![1.0, 0.0], vec![]).is_err());
    }

    #[test]
    fn opl_examples() {
        let mut g = Graph::new();
        let a = g.constant(&DiffArray::vector(vec![1.0, 0.0]));
        let b = g.constant(&DiffArray::vector(vec![0.0, 1.0]));
        let h = g.constant(&DiffArray::vector(vec![0.5, 0.75f64.sqrt()]));
        let same = opl(&mut g, a, a, 1.0).unwrap();
        let perp = opl(&mut g, a, b, 0.0).unwrap();
        let half = opl(&mut g, a, h, 1.0).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        assert_eq!(g.scalar(perp), 0.0);
        assert!((g.scalar(half) - 0.25).abs() < 1e-12);
        assert!(opl(&mut g, a, b, 0.5).is_err());
    }

    #[test]
    fn opl_gradient_vanishes_at_label() {
        let mut g = Graph::new();
        let q = g.variable(&DiffArray::vector(vec![0.6, 0.8]));
        let d = g.constant(&DiffArray::vector(vec![0.6, 0.8]));
        let l = opl(&mut g, q, d, 1.0).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(q).unwrap().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn prototype_examples() {
        let t = vec![0.0, 1.0];
        assert!(prototype_loss_value(&t, &t, &t, &t).unwrap().abs() < 1e-15);
        assert!((prototype_loss_value(&t, &[0.0, -1.0], &t, &t).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn prototype_random_mean_is_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1000;
        let total: f64 = (0..n)
            .map(|_| {
                let v: Vec<Vec<f64>> = (0..4).map(|_| random_unit(&mut rng, 8)).collect();
                prototype_loss_value(&v[0], &v[1], &v[2], &v[3]).unwrap()
            })
            .sum();
        // std of one term is about sqrt(2/8) = 0.5, so the mean has std 0.016
        assert!((total / n as f64 - 2.0).abs() < 0.05);
    }

    #[test]
    fn prototype_teacher_gets_no_gradient() {
        let mut g = Graph::new();
        let tq = g.constant(&DiffArray::vector(vec![1.0, 0.0]));
        let sq = g.variable(&DiffArray::vector(vec![0.6, 0.8]));
        let tp = g.constant(&DiffArray::vector(vec![0.0, 1.0]));
        let sp = g.variable(&DiffArray::vector(vec![0.8, 0.6]));
        let l = prototype_loss(&mut g, tq, sq, tp, sp).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(tq).is_none());
        assert!(g.grad(sq).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mnrl_permutation_and_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_unit(&mut rng, 6);
        let p = random_unit(&mut rng, 6);
        let mut negs: Vec<Vec<f64>> = (0..5).map(|_| random_unit(&mut rng, 6)).collect();
        let a = PairBatch::new(q.clone(), p.clone(), negs.clone()).unwrap().mnrl(20.0).unwrap();
        negs.reverse();
        negs.swap(0, 2);
        let b = PairBatch::new(q, p, negs).unwrap().mnrl(20.0).unwrap();
        assert!((a - b).abs() < 1e-12);

        let sims = vec![0.3, 0.1, -0.2, 0.5];
        let eval = |s: &[f64]| {
            let mut g = Graph::new();
            let v = g.constant(&DiffArray::vector(s.to_vec()));
            let l = mnrl_from_similarities(&mut g, v, 20.0).unwrap();
            g.scalar(l)
        };
        let shifted: Vec<f64> = sims.iter().map(|s| s + 0.37).collect();
        assert!((eval(&sims) - eval(&shifted)).abs() < 1e-12);
    }

    #[test]
    fn mnrl_decreases_as_positive_similarity_grows() {
        let eval = |pos: f64| {
            let mut g = Graph::new();
            let v = g.constant(&DiffArray::vector(vec![pos, 0.2, -0.1, 0.4]));
            let l = mnrl_from_similarities(&mut g, v, 20.0).unwrap();
            g.scalar(l)
        };
        let grid: Vec<f64> = (0..=40).map(|i| -1.0 + i as f64 * 0.05).collect();
        for w in grid.windows(2) {
            assert!(eval(w[1]) < eval(w[0]));
        }
    }

    fn check_loss(build: impl Fn(&mut Graph, &[Var]) -> Result<Var>, count: usize, seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for i in 0..count {
            store.insert(format!("v{i}"), DiffArray::vector(random_unit(&mut rng, 5)));
        }
        let report = grad_check(&mut store, crate::numeric::DEFAULT_STEP, |s, g| {
            let vars: Vec<Var> = s.ids().map(|id| s.bind(g, id)).collect();
            build(g, &vars)
        })
        .unwrap();
        assert!(report.max_rel_error < tol, "{report:?}");
    }

    #[test]
    fn losses_pass_grad_check() {
        for seed in 0..3 {
            check_loss(|g, v| mnrl(g, v[0], v[1], &v[2..], 1.0), 6, seed, 1e-5);
            check_loss(|g, v| opl(g, v[0], v[1], 1.0), 2, seed, 1e-5);
            check_loss(|g, v| opl(g, v[0], v[1], 0.0), 2, seed, 1e-5);
            check_loss(|g, v| prototype_loss(g, v[0], v[1], v[2], v[3]), 4, seed, 1e-5);
        }
    }

    #[test]
    fn mnrl_grad_check_at_default_scale() {
        // negatives with softmax weight near e^-30 have gradients at the 1e-8
        // floor of the relative error, so the generic tolerance applies here
        for seed in 0..3 {
            check_loss(|g, v| mnrl(g, v[0], v[1], &v[2..], DEFAULT_MNRL_SCALE), 6, seed, 1e-3);
        }
    }
}
