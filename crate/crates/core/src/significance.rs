//! Attention rollout and per-token significance.
//!
//! A transition matrix `P⁽ⁱ⁾` is the transpose of block `i`'s head-averaged
//! attention, so rows index source tokens and every column sums to one. The
//! rolled-out transition from layer `s` is
//!
//! ```text
//! exact:   H = Π_{i=s..n} [ α_i P⁽ⁱ⁾ + (1 − α_i) I ]
//! approx:  Ĥ = β · P⁽ˢ⁾ P⁽ˢ⁺¹⁾ ⋯ P⁽ⁿ⁾ + (1 − β) I
//! ```
//!
//! and a token's significance is its row of `Ĥ · e`. With `e = 1` the total
//! significance is exactly `k`.
//!
//! Using the attention itself instead of its transpose makes every row sum to
//! one and the significance collapses to uniform; see
//! `degenerate_without_transpose` below.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::numeric::Tensor;

/// Tolerance used when validating stochastic matrices.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Residual-mix default.
pub const DEFAULT_BETA: f64 = 0.5;

/// Uniform exact-mode mixing values explored in the α ablation.
pub const ALPHA_ABLATION: [f64; 3] = [0.90, 0.95, 0.99];

/// Whose attention feeds the significance weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    /// Rollout of the teacher's attention (image input).
    #[default]
    Teacher,
    /// Rollout of the student's attention (event input).
    Student,
    /// The teacher's attention at the regularized layer only.
    TeacherSingleLayer,
    /// All ones.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceVector {
    pub values: Vec<f64>,
    pub source_layer: usize,
    pub beta: f64,
    pub source: AttentionSource,
}

impl SignificanceVector {
    pub fn uniform(k: usize, source_layer: usize) -> Self {
        Self {
            values: vec![1.0; k],
            source_layer,
            beta: 0.0,
            source: AttentionSource::Uniform,
        }
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Transition matrices `P⁽¹⁾ … P⁽ⁿ⁾`, all `k × k` and column-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionStack {
    mats: Vec<Tensor>,
}

fn check_square(mats: &[Tensor]) -> Result<usize> {
    let Some(first) = mats.first() else {
        return invalid("transition stack is empty");
    };
    let k = first.rows();
    for (i, m) in mats.iter().enumerate() {
        if !m.is_matrix() || m.dims() != [k, k] {
            return shape_err(format!(
                "matrix {} has dims {:?}, expected [{k}, {k}]",
                i + 1,
                m.dims()
            ));
        }
    }
    Ok(k)
}

fn check_stochastic(m: &Tensor, sums: &[f64], what: &str, i: usize) -> Result<()> {
    if m.data().iter().any(|&v| v < 0.0) {
        return invalid(format!("{what} {i} has negative entries"));
    }
    if let Some(s) = sums.iter().find(|s| (*s - 1.0).abs() > STOCHASTIC_TOL) {
        return invalid(format!("{what} {i} is not stochastic (sum {s})"));
    }
    Ok(())
}

impl TransitionStack {
    /// Builds the stack from row-stochastic head-averaged attention `A⁽ⁱ⁾`.
    pub fn from_attention(attn: &[Tensor]) -> Result<Self> {
        check_square(attn)?;
        for (i, a) in attn.iter().enumerate() {
            check_stochastic(a, &a.row_sums(), "attention", i + 1)?;
        }
        Ok(Self {
            mats: attn.iter().map(Tensor::transpose).collect(),
        })
    }

    /// Wraps already-transposed, column-stochastic matrices.
    pub fn from_transitions(mats: Vec<Tensor>) -> Result<Self> {
        check_square(&mats)?;
        for (i, m) in mats.iter().enumerate() {
            check_stochastic(m, &m.col_sums(), "transition", i + 1)?;
        }
        Ok(Self { mats })
    }

    pub fn depth(&self) -> usize {
        self.mats.len()
    }

    pub fn tokens(&self) -> usize {
        self.mats[0].rows()
    }

    /// `P⁽ⁱ⁾`, 1-based.
    pub fn get(&self, i: usize) -> &Tensor {
        &self.mats[i - 1]
    }

    pub fn matrices(&self) -> &[Tensor] {
        &self.mats
    }

    fn check_layer(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.depth() {
            return invalid(format!("layer {s} outside 1..={}", self.depth()));
        }
        Ok(())
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return invalid(format!("{name} must lie in [0, 1], got {v}"));
    }
    Ok(())
}

fn mix_with_identity(m: &Tensor, w: f64) -> Tensor {
    let mut out = m.scale(w);
    for i in 0..out.rows() {
        let v = out.at(i, i) + (1.0 - w);
        out.set(i, i, v);
    }
    out
}

/// Exact rollout `Π_{i=s..n} [α_i P⁽ⁱ⁾ + (1 − α_i) I]`, increasing `i` left to right.
/// `alphas` holds one value per layer `s..=n`.
pub fn transition_exact(stack: &TransitionStack, s: usize, alphas: &[f64]) -> Result<Tensor> {
    stack.check_layer(s)?;
    let n = stack.depth();
    if alphas.len() != n - s + 1 {
        return invalid(format!("need {} alphas for layers {s}..={n}, got {}", n - s + 1, alphas.len()));
    }
    for &a in alphas {
        check_unit("alpha", a)?;
    }
    let mut h = Tensor::eye(stack.tokens());
    for (i, &a) in (s..=n).zip(alphas) {
        h = h.matmul(&mix_with_identity(stack.get(i), a))?;
    }
    Ok(h)
}

/// `β · Π mats + (1 − β) I` for any square matrices, no stochasticity check.
pub fn rollout_approx(mats: &[Tensor], beta: f64) -> Result<Tensor> {
    check_unit("beta", beta)?;
    let k = check_square(mats)?;
    let mut prod = mats[0].clone();
    for m in &mats[1..] {
        prod = prod.matmul(m)?;
    }
    debug_assert_eq!(prod.rows(), k);
    Ok(mix_with_identity(&prod, beta))
}

/// `Ĥ⁽ˢ⁾ = β · P⁽ˢ⁾ ⋯ P⁽ⁿ⁾ + (1 − β) I`.
pub fn transition_approx(stack: &TransitionStack, s: usize, beta: f64) -> Result<Tensor> {
    transition_approx_horizon(stack, s, beta, None)
}

/// As [`transition_approx`], but with the product cut after `horizon` layers
/// (`P⁽ˢ⁾ ⋯ P⁽ˢ⁺ʰ⁻¹⁾`) when a horizon is given.
pub fn transition_approx_horizon(
    stack: &TransitionStack,
    s: usize,
    beta: f64,
    horizon: Option<usize>,
) -> Result<Tensor> {
    stack.check_layer(s)?;
    let end = match horizon {
        Some(0) => return invalid("rollout horizon must be at least 1"),
        Some(h) => (s + h - 1).min(stack.depth()),
        None => stack.depth(),
    };
    rollout_approx(&stack.mats[s - 1..end], beta)
}

/// `H · e`, requiring `e ≥ 0`.
pub fn project_importance(h: &Tensor, e: &[f64]) -> Result<Vec<f64>> {
    if e.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return invalid("final-layer importance must be finite and nonnegative");
    }
    h.matvec(e)
}

/// Significance of every token at layer `s` from the rolled-out transition.
pub fn token_significance(stack: &TransitionStack, s: usize, beta: f64, e: &[f64]) -> Result<SignificanceVector> {
    token_significance_horizon(stack, s, beta, e, None)
}

pub fn token_significance_horizon(
    stack: &TransitionStack,
    s: usize,
    beta: f64,
    e: &[f64],
    horizon: Option<usize>,
) -> Result<SignificanceVector> {
    let h = transition_approx_horizon(stack, s, beta, horizon)?;
    Ok(SignificanceVector {
        values: project_importance(&h, e)?,
        source_layer: s,
        beta,
        source: AttentionSource::Teacher,
    })
}

/// Significance from one layer's attention `A⁽ˢ⁾` alone: `(β Aᵀ + (1 − β) I) · e`.
pub fn significance_single_layer(attn: &Tensor, beta: f64, e: &[f64]) -> Result<SignificanceVector> {
    let stack = TransitionStack::from_attention(std::slice::from_ref(attn))?;
    let mut v = token_significance(&stack, 1, beta, e)?;
    v.source = AttentionSource::TeacherSingleLayer;
    Ok(v)
}

/// Frobenius distance from each prefix product `P⁽¹⁾ ⋯ P⁽ⁱ⁾` to the full
/// product, for `i = 1..=n`. The last entry is zero.
pub fn convergence_diagnostic(stack: &TransitionStack) -> Vec<f64> {
    let mut prefixes = Vec::with_capacity(stack.depth());
    let mut acc = stack.mats[0].clone();
    prefixes.push(acc.clone());
    for m in &stack.mats[1..] {
        acc = acc.matmul(m).expect("validated square stack");
        prefixes.push(acc.clone());
    }
    let full = prefixes.last().expect("non-empty stack").clone();
    prefixes
        .iter()
        .map(|p| p.sub(&full).expect("same shape").frobenius_norm())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pivot_attention() -> Tensor {
        Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0]])
    }

    fn ones(k: usize) -> Vec<f64> {
        vec![1.0; k]
    }

    #[test]
    fn exact_edge_cases() {
        let stack = TransitionStack::from_attention(&[pivot_attention(), pivot_attention()]).unwrap();
        assert_eq!(transition_exact(&stack, 1, &[0.0, 0.0]).unwrap(), Tensor::eye(2));
        let prod = stack.get(1).matmul(stack.get(2)).unwrap();
        assert_eq!(transition_exact(&stack, 1, &[1.0, 1.0]).unwrap(), prod);
        assert!(transition_exact(&stack, 1, &[1.5, 0.0]).is_err());
        assert!(transition_exact(&stack, 1, &[0.5]).is_err());
        assert!(transition_exact(&stack, 3, &[]).is_err());
    }

    #[test]
    fn exact_single_layer_worked_example() {
        let stack = TransitionStack::from_attention(&[pivot_attention()]).unwrap();
        assert_eq!(stack.get(1), &Tensor::from_rows(&[[1.0, 1.0], [0.0, 0.0]]));
        let h = transition_exact(&stack, 1, &[0.5]).unwrap();
        assert_eq!(h, Tensor::from_rows(&[[1.0, 0.5], [0.0, 0.5]]));
    }

    #[test]
    fn approx_worked_example() {
        let stack = TransitionStack::from_attention(&[pivot_attention(), pivot_attention()]).unwrap();
        assert_eq!(transition_approx(&stack, 1, 0.0).unwrap(), Tensor::eye(2));
        let prod = Tensor::from_rows(&[[1.0, 1.0], [0.0, 0.0]]);
        assert_eq!(transition_approx(&stack, 1, 1.0).unwrap(), prod);
        let h = transition_approx(&stack, 1, 0.5).unwrap();
        assert_eq!(h, Tensor::from_rows(&[[1.0, 0.5], [0.0, 0.5]]));
        assert!(transition_approx(&stack, 1, -0.1).is_err());
    }

    #[test]
    fn significance_worked_examples() {
        let stack = TransitionStack::from_attention(&[pivot_attention()]).unwrap();
        let v = token_significance(&stack, 1, 0.5, &ones(2)).unwrap();
        assert_eq!(v.values, vec![1.5, 0.5]);
        let single = significance_single_layer(&pivot_attention(), 0.5, &ones(2)).unwrap();
        assert_eq!(single.values, vec![1.5, 0.5]);
        assert_eq!(single.source, AttentionSource::TeacherSingleLayer);
        let flat = significance_single_layer(&pivot_attention(), 0.0, &ones(2)).unwrap();
        assert_eq!(flat.values, vec![1.0, 1.0]);
        assert!(token_significance(&stack, 1, 0.5, &[1.0, -1.0]).is_err());
    }

    #[test]
    fn identity_and_uniform_attention_give_uniform_significance() {
        let k = 5;
        let ident = TransitionStack::from_attention(&vec![Tensor::eye(k); 3]).unwrap();
        let uni = TransitionStack::from_attention(&vec![Tensor::full(&[k, k], 1.0 / k as f64); 3]).unwrap();
        for beta in [0.0, 0.3, 1.0] {
            for stack in [&ident, &uni] {
                let v = token_significance(stack, 1, beta, &ones(k)).unwrap();
                assert!(v.values.iter().all(|x| (x - 1.0).abs() < 1e-12), "{v:?}");
            }
        }
    }

    #[test]
    fn horizon_truncates_product() {
        let a = Tensor::from_rows(&[[0.5, 0.5], [0.1, 0.9]]);
        let b = pivot_attention();
        let stack = TransitionStack::from_attention(&[a.clone(), b, a]).unwrap();
        let h1 = transition_approx_horizon(&stack, 1, 1.0, Some(1)).unwrap();
        assert_eq!(&h1, stack.get(1));
        let h_long = transition_approx_horizon(&stack, 2, 0.5, Some(10)).unwrap();
        assert_eq!(h_long, transition_approx(&stack, 2, 0.5).unwrap());
        assert!(transition_approx_horizon(&stack, 1, 0.5, Some(0)).is_err());
    }

    #[test]
    fn diagnostic_edge_cases() {
        let k = 4;
        let ident = TransitionStack::from_attention(&vec![Tensor::eye(k); 4]).unwrap();
        assert_eq!(convergence_diagnostic(&ident), vec![0.0; 4]);
        let uni = TransitionStack::from_attention(&vec![Tensor::full(&[k, k], 0.25); 4]).unwrap();
        assert!(convergence_diagnostic(&uni).iter().all(|&v| v < 1e-15));
    }

    #[test]
    fn rejects_bad_stacks() {
        assert!(TransitionStack::from_attention(&[]).is_err());
        assert!(TransitionStack::from_attention(&[Tensor::eye(2), Tensor::eye(3)]).is_err());
        assert!(TransitionStack::from_attention(&[Tensor::ones(&[2, 2])]).is_err());
        assert!(TransitionStack::from_transitions(vec![pivot_attention()]).is_err());
    }

    #[test]
    fn degenerate_without_transpose() {
        // Row-stochastic matrices used directly: Ĥ·1 = 1 for every β.
        let a = Tensor::from_rows(&[[0.7, 0.2, 0.1], [0.3, 0.3, 0.4], [0.05, 0.9, 0.05]]);
        let h = rollout_approx(&[a.clone(), a], 0.5).unwrap();
        let v = project_importance(&h, &ones(3)).unwrap();
        assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    fn row_stochastic(k: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(0.0f64..1.0, k * k).prop_map(move |mut d| {
            for row in d.chunks_mut(k) {
                row[0] += 1e-3;
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor::from_vec(&[k, k], d).unwrap()
        })
    }

    fn stack_strategy() -> impl Strategy<Value = Vec<Tensor>> {
        (1usize..7, 1usize..6).prop_flat_map(|(k, n)| proptest::collection::vec(row_stochastic(k), n))
    }

    proptest! {
        #[test]
        fn mass_and_column_stochasticity(attn in stack_strategy(), beta in 0.0f64..=1.0, s_pick in 0usize..10) {
            let stack = TransitionStack::from_attention(&attn).unwrap();
            let k = stack.tokens();
            let s = 1 + s_pick % stack.depth();
            let h = transition_approx(&stack, s, beta).unwrap();
            for c in h.col_sums() {
                prop_assert!((c - 1.0).abs() < 1e-9);
            }
            prop_assert!(h.data().iter().all(|&v| v >= 0.0));
            let v = token_significance(&stack, s, beta, &ones(k)).unwrap();
            prop_assert!((v.total() - k as f64).abs() < 1e-6);
        }

        #[test]
        fn single_layer_exact_equals_approx(attn in stack_strategy(), beta in 0.0f64..=1.0) {
            let stack = TransitionStack::from_attention(&attn[..1]).unwrap();
            let exact = transition_exact(&stack, 1, &[beta]).unwrap();
            let approx = transition_approx(&stack, 1, beta).unwrap();
            prop_assert!(exact.max_abs_diff(&approx) <= 1e-12);
        }

        #[test]
        fn relabeling_permutes_significance(attn in stack_strategy(), beta in 0.0f64..=1.0, seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let k = attn[0].rows();
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<Tensor> = attn.iter().map(|a| {
                let mut p = Tensor::zeros(&[k, k]);
                for i in 0..k { for j in 0..k { p.set(perm[i], perm[j], a.at(i, j)); } }
                p
            }).collect();
            let base = token_significance(&TransitionStack::from_attention(&attn).unwrap(), 1, beta, &ones(k)).unwrap();
            let moved = token_significance(&TransitionStack::from_attention(&permuted).unwrap(), 1, beta, &ones(k)).unwrap();
            for (i, &pi) in perm.iter().enumerate() {
                prop_assert!((moved.values[pi] - base.values[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn diagnostic_matches_naive_prefixes(attn in stack_strategy()) {
            let stack = TransitionStack::from_attention(&attn).unwrap();
            let d = convergence_diagnostic(&stack);
            let n = stack.depth();
            let naive = |len: usize| {
                let mut p = Tensor::eye(stack.tokens());
                for i in 1..=len { p = p.matmul(stack.get(i)).unwrap(); }
                p
            };
            let full = naive(n);
            for i in 1..=n {
                let want = naive(i).sub(&full).unwrap().frobenius_norm();
                prop_assert!((d[i - 1] - want).abs() < 1e-10);
            }
            prop_assert_eq!(d[n - 1], 0.0);
        }
    }
}
