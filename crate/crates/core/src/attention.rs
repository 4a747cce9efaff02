//! Multi-head self-attention with prompt- and prefix-tuning, and the exact
//! mixture-of-experts reading of a single head.
//!
//! For head `l`, every output row of prefix-tuned attention is a softmax
//! gated mixture over `N + L` experts: the `N` pre-trained experts
//! `W_V^T x_j` and the `L` prefix experts `W_V^T p^V_j`, which do not depend
//! on the input. The gate logits are the bilinear score functions
//! `x_i^T W_Q W_K^T x_j / sqrt(d_v)` and `x_i^T W_Q W_K^T p^K_j / sqrt(d_v)`.
//! Prompt-tuning feeds the same prompt rows to the query, key and value paths,
//! so it adds `N_p` experts to the `N` existing rows and creates `N_p` new
//! mixtures (one per prompt row).
//!
//! Row ordering: prompt-tuned outputs list the `N` original positions first
//! and the `N_p` prompt positions after them.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Result};

/// Query/key/value projections of one head, each `d × d_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub query: DMatrix<f64>,
    pub key: DMatrix<f64>,
    pub value: DMatrix<f64>,
}

/// Input sequence plus the frozen weights of one MSA layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle {
    /// Sequence embeddings, `N × d`.
    pub x: DMatrix<f64>,
    pub heads: Vec<HeadWeights>,
    /// Output projection, `(m · d_v) × d`.
    pub output: DMatrix<f64>,
}

impl AttentionBundle {
    pub fn new(x: DMatrix<f64>, heads: Vec<HeadWeights>, output: DMatrix<f64>) -> Result<Self> {
        let bundle = Self { x, heads, output };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Standard-normal weights scaled by `1/sqrt(d)`, standard-normal inputs.
    pub fn random<R: Rng + ?Sized>(
        tokens: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return config(format!("embedding dim {dim} is not divisible by head count {heads}"));
        }
        let head_dim = dim / heads;
        let scale = 1.0 / (dim as f64).sqrt();
        let heads = (0..heads)
            .map(|_| HeadWeights {
                query: gaussian(dim, head_dim, scale, rng),
                key: gaussian(dim, head_dim, scale, rng),
                value: gaussian(dim, head_dim, scale, rng),
            })
            .collect::<Vec<_>>();
        let output = gaussian(heads.len() * head_dim, dim, scale, rng);
        let x = gaussian(tokens, dim, 1.0, rng);
        Self::new(x, heads, output)
    }

    pub fn tokens(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.head_count().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let m = self.head_count();
        if m == 0 {
            return config("attention bundle needs at least one head");
        }
        if d % m != 0 {
            return config(format!("embedding dim {d} is not divisible by head count {m}"));
        }
        let dh = d / m;
        for (l, h) in self.heads.iter().enumerate() {
            for (name, w) in [("query", &h.query), ("key", &h.key), ("value", &h.value)] {
                if w.shape() != (d, dh) {
                    return config(format!(
                        "head {l} {name} weights are {:?}, expected ({d}, {dh})",
                        w.shape()
                    ));
                }
            }
        }
        if self.output.shape() != (m * dh, d) {
            return config(format!(
                "output projection is {:?}, expected ({}, {d})",
                self.output.shape(),
                m * dh
            ));
        }
        let finite = |w: &DMatrix<f64>| w.iter().all(|v| v.is_finite());
        if !finite(&self.x)
            || !finite(&self.output)
            || !self.heads.iter().all(|h| finite(&h.query) && finite(&h.key) && finite(&h.value))
        {
            return config("attention bundle contains non-finite entries");
        }
        Ok(())
    }

    fn check_head(&self, head: usize) -> Result<&HeadWeights> {
        self.heads
            .get(head)
            .ok_or_else(|| crate::Error::Usage(format!("head {head} out of range (m = {})", self.head_count())))
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// Learnable prompt rows.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptSet {
    /// Prompt-tuning: the same `N_p × d` rows are prepended to queries, keys and values.
    Prompt { prompts: DMatrix<f64> },
    /// Prefix-tuning: `L × d` key rows and `L × d` value rows.
    Prefix { keys: DMatrix<f64>, values: DMatrix<f64> },
}

impl PromptSet {
    pub fn prompt(prompts: DMatrix<f64>) -> Self {
        Self::Prompt { prompts }
    }

    pub fn prefix(keys: DMatrix<f64>, values: DMatrix<f64>) -> Result<Self> {
        if keys.shape() != values.shape() {
            return config(format!(
                "prefix keys {:?} and values {:?} differ in shape",
                keys.shape(),
                values.shape()
            ));
        }
        Ok(Self::Prefix { keys, values })
    }

    pub fn random_prefix<R: Rng + ?Sized>(len: usize, dim: usize, rng: &mut R) -> Self {
        Self::Prefix { keys: gaussian(len, dim, 1.0, rng), values: gaussian(len, dim, 1.0, rng) }
    }

    pub fn random_prompt<R: Rng + ?Sized>(len: usize, dim: usize, rng: &mut R) -> Self {
        Self::Prompt { prompts: gaussian(len, dim, 1.0, rng) }
    }

    /// Number of prompt rows (`L` for prefix, `N_p` for prompt).
    pub fn len(&self) -> usize {
        match self {
            Self::Prompt { prompts } => prompts.nrows(),
            Self::Prefix { keys, .. } => keys.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows fed to the key and value paths. In prompt mode both are the very
    /// same array.
    pub fn key_value_rows(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        match self {
            Self::Prompt { prompts } => (prompts, prompts),
            Self::Prefix { keys, values } => (keys, values),
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        let (k, v) = self.key_value_rows();
        if (k.nrows() > 0 && k.ncols() != d) || (v.nrows() > 0 && v.ncols() != d) {
            return config(format!("prompt rows have {} columns, expected {d}", k.ncols()));
        }
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Stable softmax of each row, in place.
fn softmax_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row /= sum;
    }
}

fn attend(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let mut logits = q * k.transpose() * scale;
    softmax_rows(&mut logits);
    logits * v
}

fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    if top.nrows() == 0 {
        return bottom.clone();
    }
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), bottom.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

fn concat_heads(bundle: &AttentionBundle, heads: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = heads.first().map_or(0, |h| h.nrows());
    let dh = bundle.head_dim();
    let mut cat = DMatrix::zeros(rows, dh * heads.len());
    for (l, h) in heads.iter().enumerate() {
        cat.columns_mut(l * dh, dh).copy_from(h);
    }
    cat * &bundle.output
}

/// Per-head outputs of plain MSA, each `N × d_v`.
pub fn msa_heads(bundle: &AttentionBundle) -> Result<Vec<DMatrix<f64>>> {
    bundle.validate()?;
    let scale = bundle.scale();
    Ok(bundle
        .heads
        .iter()
        .map(|h| attend(&(&bundle.x * &h.query), &(&bundle.x * &h.key), &(&bundle.x * &h.value), scale))
        .collect())
}

/// `Concat(h_1, ..., h_m) W^O`, an `N × d` matrix.
pub fn msa_forward(bundle: &AttentionBundle) -> Result<DMatrix<f64>> {
    Ok(concat_heads(bundle, &msa_heads(bundle)?))
}

/// Per-head outputs with prefix keys/values appended, each `N × d_v`.
pub fn prefix_heads(bundle: &AttentionBundle, prompts: &PromptSet) -> Result<Vec<DMatrix<f64>>> {
    let PromptSet::Prefix { keys, values } = prompts else {
        return usage("prefix_forward requires a prefix-mode prompt set");
    };
    bundle.validate()?;
    prompts.check_dim(bundle.dim())?;
    let scale = bundle.scale();
    let key_rows = stack(keys, &bundle.x);
    let value_rows = stack(values, &bundle.x);
    Ok(bundle
        .heads
        .iter()
        .map(|h| attend(&(&bundle.x * &h.query), &(&key_rows * &h.key), &(&value_rows * &h.value), scale))
        .collect())
}

/// Prefix-tuned MSA. The output keeps the input's `N` rows.
pub fn prefix_forward(bundle: &AttentionBundle, prompts: &PromptSet) -> Result<DMatrix<f64>> {
    Ok(concat_heads(bundle, &prefix_heads(bundle, prompts)?))
}

/// Per-head outputs of prompt-tuned MSA, each `(N + N_p) × d_v`.
pub fn prompt_heads(bundle: &AttentionBundle, prompts: &PromptSet) -> Result<Vec<DMatrix<f64>>> {
    let PromptSet::Prompt { prompts: p } = prompts else {
        return usage("prompt_forward requires a prompt-mode prompt set");
    };
    bundle.validate()?;
    prompts.check_dim(bundle.dim())?;
    let scale = bundle.scale();
    let z = stack(&bundle.x, p);
    Ok(bundle
        .heads
        .iter()
        .map(|h| attend(&(&z * &h.query), &(&z * &h.key), &(&z * &h.value), scale))
        .collect())
}

/// Prompt-tuned MSA, `(N + N_p) × d`; rows `N..N+N_p` belong to the prompt positions.
pub fn prompt_forward(bundle: &AttentionBundle, prompts: &PromptSet) -> Result<DMatrix<f64>> {
    Ok(concat_heads(bundle, &prompt_heads(bundle, prompts)?))
}

/// Mixture-of-experts view of one attention head.
///
/// Every row shares the same expert outputs; only the gates differ by row.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeDecomposition {
    pub head: usize,
    /// Pre-softmax score functions, `rows × experts`.
    pub scores: DMatrix<f64>,
    /// Softmax of `scores` along each row.
    pub gates: DMatrix<f64>,
    /// Expert outputs, `experts × d_v`. The first `N` experts are the
    /// pre-trained ones, the rest come from the prompt rows.
    pub experts: DMatrix<f64>,
}

impl MoeDecomposition {
    /// `Σ_j gate_ij · f_j`, one row per mixture.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.gates * &self.experts
    }
}

/// Score matrix `s_{i,j} = a_i^T W_Q W_K^T c_j / sqrt(d_v)` computed through the
/// `d × d` bilinear form, a different arithmetic path than `attend`.
fn score_functions(
    h: &HeadWeights,
    queries: &DMatrix<f64>,
    keys: &DMatrix<f64>,
    scale: f64,
) -> DMatrix<f64> {
    let form = &h.query * h.key.transpose();
    DMatrix::from_fn(queries.nrows(), keys.nrows(), |i, j| {
        let mut s = 0.0;
        for a in 0..form.nrows() {
            let qa = queries[(i, a)];
            if qa == 0.0 {
                continue;
            }
            let mut t = 0.0;
            for b in 0..form.ncols() {
                t += form[(a, b)] * keys[(j, b)];
            }
            s += qa * t;
        }
        s * scale
    })
}

fn expert_outputs(h: &HeadWeights, rows: &DMatrix<f64>) -> DMatrix<f64> {
    rows * &h.value
}

fn decompose(
    bundle: &AttentionBundle,
    head: usize,
    queries: &DMatrix<f64>,
    key_rows: &DMatrix<f64>,
    value_rows: &DMatrix<f64>,
) -> Result<MoeDecomposition> {
    let h = bundle.check_head(head)?;
    let scores = score_functions(h, queries, key_rows, bundle.scale());
    let mut gates = scores.clone();
    softmax_rows(&mut gates);
    Ok(MoeDecomposition { head, scores, gates, experts: expert_outputs(h, value_rows) })
}

/// Gates and experts of head `head` under prefix-tuning.
///
/// Expert order: `x_1..x_N` then `p^V_1..p^V_L`.
pub fn prefix_moe_decompose(
    bundle: &AttentionBundle,
    prompts: &PromptSet,
    head: usize,
) -> Result<MoeDecomposition> {
    let PromptSet::Prefix { keys, values } = prompts else {
        return usage("prefix decomposition requires a prefix-mode prompt set");
    };
    bundle.validate()?;
    prompts.check_dim(bundle.dim())?;
    decompose(bundle, head, &bundle.x, &stack(&bundle.x, keys), &stack(&bundle.x, values))
}

/// Gates and experts of head `head` under prompt-tuning, for all `N + N_p` rows.
///
/// Rows `0..N` are the pre-trained mixtures extended by `N_p` prompt experts;
/// rows `N..N+N_p` are the new mixtures whose scores against prompt experts,
/// `p_i^T W_Q W_K^T p_j / sqrt(d_v)`, do not involve the input.
pub fn prompt_moe_decompose(
    bundle: &AttentionBundle,
    prompts: &PromptSet,
    head: usize,
) -> Result<MoeDecomposition> {
    let PromptSet::Prompt { prompts: p } = prompts else {
        return usage("prompt decomposition requires a prompt-mode prompt set");
    };
    bundle.validate()?;
    prompts.check_dim(bundle.dim())?;
    let z = stack(&bundle.x, p);
    decompose(bundle, head, &z, &z, &z)
}

/// Rebuilds the layer output from one decomposition per head.
pub fn reconstruct_output(bundle: &AttentionBundle, parts: &[MoeDecomposition]) -> Result<DMatrix<f64>> {
    if parts.len() != bundle.head_count() {
        return usage(format!("need {} head decompositions, got {}", bundle.head_count(), parts.len()));
    }
    let heads: Vec<_> = parts.iter().map(MoeDecomposition::reconstruct).collect();
    Ok(concat_heads(bundle, &heads))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Size limits for randomized equivalence trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialLimits {
    pub max_tokens: usize,
    pub max_dim: usize,
    pub max_heads: usize,
    pub max_prompts: usize,
}

impl Default for TrialLimits {
    fn default() -> Self {
        Self { max_tokens: 8, max_dim: 16, max_heads: 2, max_prompts: 4 }
    }
}

/// Maximum discrepancy between the attention outputs and their MoE
/// reconstructions for one random bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceTrial {
    pub seed: u64,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub prompts: usize,
    pub prefix_diff: f64,
    pub prompt_diff: f64,
}

impl EquivalenceTrial {
    pub fn max_diff(&self) -> f64 {
        self.prefix_diff.max(self.prompt_diff)
    }
}

/// Draws a bundle within `limits` from `seed` and compares `prefix_forward`
/// and `prompt_forward` with the per-head decompositions.
pub fn equivalence_trial(seed: u64, limits: TrialLimits) -> Result<EquivalenceTrial> {
    if limits.max_tokens == 0 || limits.max_heads == 0 || limits.max_dim < limits.max_heads {
        return config(format!("invalid trial limits {limits:?}"));
    }
    let mut rng = crate::seed::rng(seed);
    let heads = rng.random_range(1..=limits.max_heads);
    let head_dim = rng.random_range(1..=limits.max_dim / heads);
    let dim = heads * head_dim;
    let tokens = rng.random_range(1..=limits.max_tokens);
    let prompts = rng.random_range(0..=limits.max_prompts);
    let bundle = AttentionBundle::random(tokens, dim, heads, &mut rng)?;
    let prefix = PromptSet::random_prefix(prompts, dim, &mut rng);
    let prompt = PromptSet::random_prompt(prompts, dim, &mut rng);

    let parts = (0..heads).map(|h| prefix_moe_decompose(&bundle, &prefix, h)).collect::<Result<Vec<_>>>()?;
    let prefix_diff = max_abs_diff(&prefix_forward(&bundle, &prefix)?, &reconstruct_output(&bundle, &parts)?);
    let parts = (0..heads).map(|h| prompt_moe_decompose(&bundle, &prompt, h)).collect::<Result<Vec<_>>>()?;
    let prompt_diff = max_abs_diff(&prompt_forward(&bundle, &prompt)?, &reconstruct_output(&bundle, &parts)?);
    Ok(EquivalenceTrial { seed, tokens, dim, heads, prompts, prefix_diff, prompt_diff })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    /// Textbook attention written with explicit loops, independent of nalgebra
    /// products and of the decomposition path.
    fn naive_msa(b: &AttentionBundle) -> DMatrix<f64> {
        let (n, d) = (b.tokens(), b.dim());
        let dh = b.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut cat = vec![vec![0.0; dh * b.head_count()]; n];
        for (l, h) in b.heads.iter().enumerate() {
            let proj = |w: &DMatrix<f64>| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|i| (0..dh).map(|c| (0..d).map(|a| b.x[(i, a)] * w[(a, c)]).sum()).collect())
                    .collect()
            };
            let (q, k, v) = (proj(&h.query), proj(&h.key), proj(&h.value));
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = w.iter().sum();
                for c in 0..dh {
                    cat[i][l * dh + c] = (0..n).map(|j| w[j] / z * v[j][c]).sum();
                }
            }
        }
        DMatrix::from_fn(n, d, |i, c| {
            (0..dh * b.head_count()).map(|a| cat[i][a] * b.output[(a, c)]).sum()
        })
    }

    fn identity_bundle(x: DMatrix<f64>) -> AttentionBundle {
        let d = x.ncols();
        let eye = DMatrix::identity(d, d);
        AttentionBundle::new(
            x,
            vec![HeadWeights { query: eye.clone(), key: eye.clone(), value: eye.clone() }],
            eye,
        )
        .unwrap()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let b = identity_bundle(DMatrix::zeros(1, 3));
        assert_eq!(msa_forward(&b).unwrap(), DMatrix::zeros(1, 3));
    }

    #[test]
    fn msa_matches_naive_loops() {
        let b = AttentionBundle::random(4, 8, 2, &mut rng(7)).unwrap();
        let diff = max_abs_diff(&msa_forward(&b).unwrap(), &naive_msa(&b));
        assert!(diff <= 1e-12, "diff {diff}");
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(matches!(AttentionBundle::random(3, 5, 2, &mut rng(1)), Err(crate::Error::Config(_))));
        let mut b = AttentionBundle::random(3, 4, 2, &mut rng(1)).unwrap();
        b.output = DMatrix::zeros(3, 4);
        assert!(b.validate().is_err());
    }

    #[test]
    fn empty_prefix_and_prompt_reduce_to_msa() {
        let b = AttentionBundle::random(5, 6, 2, &mut rng(3)).unwrap();
        let base = msa_forward(&b).unwrap();
        let empty_prefix = PromptSet::prefix(DMatrix::zeros(0, 6), DMatrix::zeros(0, 6)).unwrap();
        let pre = prefix_forward(&b, &empty_prefix).unwrap();
        assert!(max_abs_diff(&base, &pre) <= 1e-15);
        let pro = prompt_forward(&b, &PromptSet::prompt(DMatrix::zeros(0, 6))).unwrap();
        assert!(max_abs_diff(&base, &pro) <= 1e-15);
    }

    #[test]
    fn output_row_counts() {
        let mut r = rng(5);
        let b = AttentionBundle::random(4, 8, 2, &mut r).unwrap();
        let pre = PromptSet::random_prefix(3, 8, &mut r);
        assert_eq!(prefix_forward(&b, &pre).unwrap().shape(), (4, 8));
        for np in 1..4 {
            let pro = PromptSet::random_prompt(np, 8, &mut r);
            assert_eq!(prompt_forward(&b, &pro).unwrap().nrows(), 4 + np);
        }
    }

    #[test]
    fn mode_mismatch_is_usage_error() {
        let mut r = rng(5);
        let b = AttentionBundle::random(2, 4, 1, &mut r).unwrap();
        let pre = PromptSet::random_prefix(1, 4, &mut r);
        let pro = PromptSet::random_prompt(1, 4, &mut r);
        assert!(matches!(prompt_forward(&b, &pre), Err(crate::Error::Usage(_))));
        assert!(matches!(prefix_forward(&b, &pro), Err(crate::Error::Usage(_))));
        assert!(matches!(prefix_moe_decompose(&b, &pre, 3), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn prefix_decomposition_reconstructs_head() {
        let mut r = rng(11);
        let b = AttentionBundle::random(6, 8, 2, &mut r).unwrap();
        let p = PromptSet::random_prefix(3, 8, &mut r);
        let heads = prefix_heads(&b, &p).unwrap();
        for l in 0..2 {
            let dec = prefix_moe_decompose(&b, &p, l).unwrap();
            assert_eq!(dec.gates.shape(), (6, 9));
            for row in dec.gates.row_iter() {
                assert!((row.sum() - 1.0).abs() <= 1e-12);
            }
            assert!(max_abs_diff(&dec.reconstruct(), &heads[l]) <= 1e-9);
        }
    }

    #[test]
    fn prefix_experts_do_not_depend_on_input() {
        let mut r = rng(12);
        let b1 = AttentionBundle::random(4, 4, 1, &mut r).unwrap();
        let p = PromptSet::random_prefix(2, 4, &mut r);
        let mut b2 = b1.clone();
        b2.x = gaussian(4, 4, 1.0, &mut r);
        let d1 = prefix_moe_decompose(&b1, &p, 0).unwrap();
        let d2 = prefix_moe_decompose(&b2, &p, 0).unwrap();
        assert_eq!(d1.experts.rows(4, 2), d2.experts.rows(4, 2));
        let PromptSet::Prefix { values, .. } = &p else { unreachable!() };
        let expected = values * &b1.heads[0].value;
        assert_eq!(d1.experts.rows(4, 2).into_owned(), expected);
    }

    #[test]
    fn prompt_new_rows_scores_against_prompts_ignore_input() {
        let mut r = rng(13);
        let b1 = AttentionBundle::random(3, 4, 2, &mut r).unwrap();
        let p = PromptSet::random_prompt(2, 4, &mut r);
        let mut b2 = b1.clone();
        b2.x = gaussian(3, 4, 1.0, &mut r);
        let d1 = prompt_moe_decompose(&b1, &p, 1).unwrap();
        let d2 = prompt_moe_decompose(&b2, &p, 1).unwrap();
        assert_eq!(d1.scores.view((3, 3), (2, 2)), d2.scores.view((3, 3), (2, 2)));
        assert_ne!(d1.scores.view((3, 0), (2, 3)), d2.scores.view((3, 0), (2, 3)));
        let heads = prompt_heads(&b1, &p).unwrap();
        assert!(max_abs_diff(&d1.reconstruct(), &heads[1]) <= 1e-9);
    }

    #[test]
    fn prompt_mode_shares_key_and_value_rows() {
        let p = PromptSet::random_prompt(3, 4, &mut rng(1));
        let (k, v) = p.key_value_rows();
        assert!(std::ptr::eq(k, v));
    }

    #[test]
    fn random_trials_stay_within_limits() {
        for seed in 0..20 {
            let t = equivalence_trial(seed, TrialLimits::default()).unwrap();
            assert!(t.tokens <= 8 && t.dim <= 16 && t.heads <= 2 && t.prompts <= 4);
            assert!(t.max_diff() <= 1e-9, "{t:?}");
        }
        assert_eq!(equivalence_trial(3, TrialLimits::default()).unwrap(), equivalence_trial(3, TrialLimits::default()).unwrap());
    }
}
