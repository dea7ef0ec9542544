//! Task-sequence generators and input preprocessing.
//!
//! Each generator is a pure function of its parameters and a seed: every
//! random draw comes from [`crate::rng::keyed_rng`] with the key
//! `(seed, task_index, purpose)`, so regenerating any single task sequence
//! is bit-identical regardless of what else ran. Image sources are loaded
//! through [`load`].

pub mod load;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::rng::keyed_rng;
use crate::{Error, Result};

pub use load::{load_source, LabeledPool, SourceFormat};

// ---------------------------------------------------------------------------
// preprocessing

/// Center columns, whiten, and renormalize rows so every row has squared
/// norm equal to the input dimension.
///
/// Whitening divides each covariance eigendirection by `sqrt(eig)`, with
/// eigenvalues floored at `1e-8 * eig_max` so near-singular directions of
/// benchmark images stay finite. Rows that are exactly zero after centering
/// are left as zeros.
pub fn preprocess(raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (p, n0) = raw.shape();
    if p < 2 {
        return Err(Error::InvalidConfig(
            "preprocess needs at least 2 rows".into(),
        ));
    }
    let mut x = raw.clone();
    for j in 0..n0 {
        let mean = x.column(j).mean();
        for i in 0..p {
            x[(i, j)] -= mean;
        }
    }
    let cov = x.transpose() * &x / p as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let lam_max = eig.eigenvalues.max();
    if !(lam_max > 0.0) {
        return Err(Error::InvalidConfig(
            "preprocess: input has rank 0 after centering".into(),
        ));
    }
    let floor = 1e-8 * lam_max;
    let scale = DVector::from_iterator(
        n0,
        eig.eigenvalues.iter().map(|&l| 1.0 / l.max(floor).sqrt()),
    );
    // Symmetric whitening U diag(1/sqrt(eig)) U^T keeps the pixel basis.
    let white = &eig.eigenvectors * DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose();
    x *= white;
    renormalize_rows(&mut x, n0 as f64);
    Ok(x)
}

/// Scale each row to squared norm `target`; zero rows stay zero.
fn renormalize_rows(x: &mut DMatrix<f64>, target: f64) {
    for i in 0..x.nrows() {
        let norm = x.row(i).norm();
        if norm > 0.0 {
            let s = target.sqrt() / norm;
            for j in 0..x.ncols() {
                x[(i, j)] *= s;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// target-distractor sequences

/// Parameters of the target-distractor protocol.
///
/// Per task, `target_fraction` of the `p` images carry labels +-1 and the
/// rest carry 0. `rho_target` of the labeled images and enough unlabeled
/// ones to reach a total shared fraction of `rho_shared` are common to all
/// tasks; shared labeled images have their signs flipped independently with
/// probability `rho_flip` in every task after the first.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TargetDistractorParams {
    pub rho_shared: f64,
    pub rho_target: f64,
    pub rho_flip: f64,
    /// Fraction of images with +-1 labels.
    #[serde(default = "default_target_fraction")]
    pub target_fraction: f64,
    pub p: usize,
    pub t: usize,
    pub seed: u64,
}

fn default_target_fraction() -> f64 {
    0.10
}

impl Default for TargetDistractorParams {
    fn default() -> Self {
        Self {
            rho_shared: 1.0,
            rho_target: 1.0,
            rho_flip: 0.0,
            target_fraction: 0.10,
            p: 2000,
            t: 2,
            seed: 0,
        }
    }
}

impl TargetDistractorParams {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.rho_shared) || !in_unit(self.rho_target) {
            return Err(Error::InvalidConfig(
                "rho_shared and rho_target must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.rho_flip) {
            return Err(Error::InvalidConfig("rho_flip must lie in [0, 0.5]".into()));
        }
        let x = self.target_fraction;
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::InvalidConfig(
                "target_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.p == 0 || self.t == 0 {
            return Err(Error::InvalidConfig("p and t must be positive".into()));
        }
        // The shared unlabeled count (rho_shared - x * rho_target) * p must
        // fit in [0, (1 - x) * p].
        if self.rho_shared < x && self.rho_target > self.rho_shared / x {
            return Err(Error::Infeasible(format!(
                "rho_target <= rho_shared / target_fraction required when rho_shared < \
                 target_fraction: {} > {} / {}",
                self.rho_target, self.rho_shared, x
            )));
        }
        if self.rho_shared > 1.0 - x && self.rho_target < (self.rho_shared - (1.0 - x)) / x {
            return Err(Error::Infeasible(format!(
                "rho_target >= (rho_shared - (1 - target_fraction)) / target_fraction required \
                 when rho_shared > 1 - target_fraction: {} < ({} - {}) / {}",
                self.rho_target,
                self.rho_shared,
                1.0 - x,
                x
            )));
        }
        Ok(())
    }
}

/// Per-task image counts of the four blocks, in row order:
/// shared labeled, unique labeled, shared unlabeled, unique unlabeled.
fn td_counts(params: &TargetDistractorParams) -> Result<(usize, usize, usize, usize)> {
    let p = params.p as f64;
    let n_pm = (params.target_fraction * p).round() as usize;
    if n_pm == 0 || n_pm > params.p {
        return Err(Error::InvalidConfig(format!(
            "target_fraction {} of p = {} rounds to {} labeled images",
            params.target_fraction, params.p, n_pm
        )));
    }
    let n_pm_sh = (params.rho_target * n_pm as f64).round() as usize;
    let n_zero = params.p - n_pm;
    let raw = (params.rho_shared - params.target_fraction * params.rho_target) * p;
    let n_zero_sh = (raw.round().max(0.0) as usize).min(n_zero);
    Ok((n_pm_sh, n_pm - n_pm_sh, n_zero_sh, n_zero - n_zero_sh))
}

/// Generate a target-distractor sequence from a pool of images (rows).
///
/// The pool is consumed without replacement; rows of each task are laid out
/// as shared labeled, unique labeled, shared unlabeled, unique unlabeled.
pub fn gen_target_distractor(
    pool: &DMatrix<f64>,
    params: &TargetDistractorParams,
) -> Result<Vec<Dataset>> {
    params.validate()?;
    let (sh_pm, un_pm, sh_zero, un_zero) = td_counts(params)?;
    let needed = sh_pm + sh_zero + params.t * (un_pm + un_zero);
    if pool.nrows() < needed {
        return Err(Error::Infeasible(format!(
            "pool exhausted: need {} images for {} tasks, pool has {}",
            needed,
            params.t,
            pool.nrows()
        )));
    }
    let mut order: Vec<usize> = (0..pool.nrows()).collect();
    order.shuffle(&mut keyed_rng(params.seed, 0, "td-select"));
    let mut next = 0;
    let mut take = |n: usize| {
        let slice = order[next..next + n].to_vec();
        next += n;
        slice
    };
    let shared_pm_rows = take(sh_pm);
    let shared_zero_rows = take(sh_zero);

    // Reference signs of the shared labeled images (task 1's labels).
    let mut sign_rng = keyed_rng(params.seed, 0, "td-signs");
    let ref_signs: Vec<f64> = (0..sh_pm)
        .map(|_| if sign_rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();

    let provenance = serde_json::to_string(params).unwrap_or_default();
    let mut out = Vec::with_capacity(params.t);
    for t in 0..params.t {
        let unique_pm_rows = take(un_pm);
        let unique_zero_rows = take(un_zero);
        let mut x = DMatrix::zeros(params.p, pool.ncols());
        let mut y = DVector::zeros(params.p);
        let mut row = 0;
        let mut flip_rng = keyed_rng(params.seed, t as u64, "td-flip");
        for (i, &src) in shared_pm_rows.iter().enumerate() {
            x.row_mut(row).copy_from(&pool.row(src));
            let flip = t > 0 && flip_rng.random::<f64>() < params.rho_flip;
            y[row] = if flip { -ref_signs[i] } else { ref_signs[i] };
            row += 1;
        }
        let mut unique_sign_rng = keyed_rng(params.seed, t as u64, "td-signs-unique");
        for &src in &unique_pm_rows {
            x.row_mut(row).copy_from(&pool.row(src));
            y[row] = if unique_sign_rng.random::<bool>() { 1.0 } else { -1.0 };
            row += 1;
        }
        for &src in shared_zero_rows.iter().chain(&unique_zero_rows) {
            x.row_mut(row).copy_from(&pool.row(src));
            row += 1;
        }
        out.push(
            Dataset::new(x, y, format!("td-{}", t + 1), Split::Train)?
                .with_provenance(provenance.clone()),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// permutation sequences

/// Pixel permutation of one task: identity outside `ceil(ratio * n0)`
/// chosen positions, a single uniformly random cycle on them.
///
/// Depends only on `(n0, ratio, seed, task_index)`, never on image content,
/// so train and test sets generated with the same seed stay aligned. A
/// single orbit needs at least two positions, so any positive ratio moves
/// at least two pixels.
pub fn permutation_indices(n0: usize, ratio: f64, seed: u64, task_index: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n0).collect();
    if ratio <= 0.0 || n0 < 2 {
        return perm;
    }
    let k = ((ratio * n0 as f64).ceil() as usize).clamp(2, n0);
    let mut rng = keyed_rng(seed, task_index as u64, "perm");
    let mut positions = rand::seq::index::sample(&mut rng, n0, k).into_vec();
    positions.shuffle(&mut rng);
    for i in 0..k {
        perm[positions[i]] = positions[(i + 1) % k];
    }
    perm
}

/// Permuted-pixels sequence: `t` tasks sharing the base images, each under
/// an independent permutation. With `permute_first` false the first task
/// keeps the unpermuted pixels (the two-task convention); with it true every
/// task is permuted so all pairs are statistically alike (long sequences).
pub fn gen_permutation(
    base: &Dataset,
    ratio: f64,
    t: usize,
    seed: u64,
    permute_first: bool,
) -> Result<Vec<Dataset>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidConfig(format!(
            "permutation ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let n0 = base.n0();
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let identity = ratio == 0.0 || (i == 0 && !permute_first);
        let mut x = base.x.clone();
        if !identity {
            let perm = permutation_indices(n0, ratio, seed, i);
            for (j, &dest) in perm.iter().enumerate() {
                if dest != j {
                    x.set_column(dest, &base.x.column(j));
                }
            }
        }
        let provenance = format!(
            "{{\"protocol\":\"permutation\",\"ratio\":{ratio},\"seed\":{seed},\
             \"permute_first\":{permute_first}}}"
        );
        out.push(
            Dataset::new(x, base.y.clone(), format!("perm-{}", i + 1), base.split)?
                .with_provenance(provenance),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// split sequences

/// Class-split protocol variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SplitMode {
    /// Each task gets a disjoint class group, labeled half vs half.
    Disjoint,
    /// Two tasks mixing two class groups; the payload is the split in
    /// percent. Task 1 draws `(x/2 + 50)%` of its images from group one,
    /// task 2 the mirror, and labels follow the group dichotomy in both.
    Partial(f64),
}

/// Build tasks of `p` examples each from a labeled pool.
///
/// Classes are shuffled by seed and chunked into groups of two, or four
/// when two classes cannot supply `p` examples. `Disjoint` yields as many
/// tasks as there are full groups; `Partial` yields exactly two.
pub fn gen_split(source: &LabeledPool, mode: SplitMode, p: usize, seed: u64) -> Result<Vec<Dataset>> {
    if p == 0 {
        return Err(Error::InvalidConfig("p must be positive".into()));
    }
    let mut by_class: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
    for (i, &c) in source.labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let min_count = by_class.values().map(Vec::len).min().unwrap_or(0);
    let classes_per_task = if 2 * min_count >= p { 2 } else { 4 };
    if classes_per_task * min_count < p {
        return Err(Error::Infeasible(format!(
            "insufficient examples per class: {} classes x {} examples cannot supply p = {}",
            classes_per_task, min_count, p
        )));
    }
    let mut classes: Vec<i64> = by_class.keys().copied().collect();
    classes.shuffle(&mut keyed_rng(seed, 0, "split-classes"));
    let n_groups = classes.len() / classes_per_task;
    let groups: Vec<&[i64]> = classes.chunks(classes_per_task).take(n_groups).collect();

    let n0 = source.images.ncols();
    let provenance = format!(
        "{{\"protocol\":\"split\",\"mode\":{:?},\"p\":{p},\"seed\":{seed}}}",
        mode
    );
    // Draw `count` examples of class `c`, without replacement per call.
    let draw = |c: i64, count: usize, task: usize| -> Vec<usize> {
        let rows = &by_class[&c];
        let mut rng = keyed_rng(seed, task as u64, &format!("split-pick-{c}"));
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rng);
        order[..count].iter().map(|&i| rows[i]).collect()
    };
    let build = |rows: &[(usize, f64)], task_id: String| -> Result<Dataset> {
        let mut x = DMatrix::zeros(rows.len(), n0);
        let mut y = DVector::zeros(rows.len());
        for (r, &(src, label)) in rows.iter().enumerate() {
            x.row_mut(r).copy_from(&source.images.row(src));
            y[r] = label;
        }
        Ok(Dataset::new(x, y, task_id, Split::Train)?.with_provenance(provenance.clone()))
    };

    match mode {
        SplitMode::Disjoint => {
            let mut out = Vec::with_capacity(groups.len());
            for (t, group) in groups.iter().enumerate() {
                let mut rows = Vec::with_capacity(p);
                for (ci, &c) in group.iter().enumerate() {
                    let count = p / classes_per_task + usize::from(ci < p % classes_per_task);
                    let label = if ci < classes_per_task / 2 { 1.0 } else { -1.0 };
                    rows.extend(draw(c, count, t).into_iter().map(|s| (s, label)));
                }
                out.push(build(&rows, format!("split-{}", t + 1))?);
            }
            Ok(out)
        }
        SplitMode::Partial(x) => {
            if !(0.0..=100.0).contains(&x) {
                return Err(Error::InvalidConfig(format!(
                    "partial split percent must lie in [0, 100], got {x}"
                )));
            }
            if groups.len() < 2 {
                return Err(Error::Infeasible(
                    "partial split needs at least two class groups".into(),
                ));
            }
            let n_major = ((0.5 + x / 200.0) * p as f64).round() as usize;
            let per_group = |task: usize, n_one: usize| -> Result<Dataset> {
                let mut rows = Vec::with_capacity(p);
                for (g, count) in [(0usize, n_one), (1, p - n_one)] {
                    let label = if g == 0 { 1.0 } else { -1.0 };
                    for (ci, &c) in groups[g].iter().enumerate() {
                        let n = count / classes_per_task + usize::from(ci < count % classes_per_task);
                        if n > by_class[&c].len() {
                            return Err(Error::Infeasible(format!(
                                "insufficient examples per class: class {c} has {}, need {n}",
                                by_class[&c].len()
                            )));
                        }
                        rows.extend(draw(c, n, task).into_iter().map(|s| (s, label)));
                    }
                }
                build(&rows, format!("split-{}", task + 1))
            };
            Ok(vec![per_group(0, n_major)?, per_group(1, p - n_major)?])
        }
    }
}

// ---------------------------------------------------------------------------
// interpolated sequences

/// Insert `s` intermediate datasets between two tasks of equal size.
///
/// Dataset `k` of the returned `s + 2` takes its first `floor(p * k/(s+1))`
/// rows from the second task and the rest from the first, so the mixture
/// fraction rises in equal steps from 0 to 1.
pub fn gen_interpolated(d1: &Dataset, d2: &Dataset, s: usize) -> Result<Vec<Dataset>> {
    if d1.p() != d2.p() {
        return Err(Error::DimensionMismatch {
            what: "interpolated task sizes",
            left: d1.p(),
            right: d2.p(),
        });
    }
    if d1.n0() != d2.n0() {
        return Err(Error::DimensionMismatch {
            what: "interpolated input dims",
            left: d1.n0(),
            right: d2.n0(),
        });
    }
    let p = d1.p();
    let mut out = Vec::with_capacity(s + 2);
    for k in 0..s + 2 {
        let take2 = p * k / (s + 1);
        let mut x = d1.x.clone();
        let mut y = d1.y.clone();
        for r in 0..take2 {
            x.row_mut(r).copy_from(&d2.x.row(r));
            y[r] = d2.y[r];
        }
        let provenance = format!(
            "{{\"protocol\":\"interpolated\",\"s\":{s},\"step\":{k},\"rows_from_second\":{take2}}}"
        );
        out.push(
            Dataset::new(x, y, format!("interp-{}", k), d1.split)?.with_provenance(provenance),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// context augmentation

/// Append a per-task Gaussian context vector to every input row and
/// renormalize rows to the enlarged dimension.
///
/// The context is keyed by `(seed, position in seq)`, so calling this on a
/// train list and a test list with one seed gives matching vectors per task.
/// `n_context = 0` returns the sequence unchanged.
pub fn append_context(seq: &[Dataset], n_context: usize, seed: u64) -> Result<Vec<Dataset>> {
    if n_context == 0 {
        return Ok(seq.to_vec());
    }
    let mut out = Vec::with_capacity(seq.len());
    for (i, d) in seq.iter().enumerate() {
        let mut rng = keyed_rng(seed, i as u64, "context");
        let ctx: Vec<f64> = (0..n_context).map(|_| rng.sample(StandardNormal)).collect();
        let n_new = d.n0() + n_context;
        let mut x = DMatrix::zeros(d.p(), n_new);
        for r in 0..d.p() {
            for j in 0..d.n0() {
                x[(r, j)] = d.x[(r, j)];
            }
            for (j, &c) in ctx.iter().enumerate() {
                x[(r, d.n0() + j)] = c;
            }
        }
        renormalize_rows(&mut x, n_new as f64);
        let provenance = format!(
            "{{\"protocol\":\"context\",\"n_context\":{n_context},\"seed\":{seed},\"base\":{:?}}}",
            d.provenance
        );
        out.push(
            Dataset::new(x, d.y.clone(), d.task_id.clone(), d.split)?.with_provenance(provenance),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{KernelConfig, Lambda, Nonlinearity};
    use crate::orderparams;

    fn gaussian_pool(rows: usize, cols: usize, purpose: &str) -> DMatrix<f64> {
        let mut rng = keyed_rng(53, 0, purpose);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn preprocess_enforces_the_row_and_column_contracts() {
        let raw = gaussian_pool(400, 10, "pre") * 3.0;
        let x = preprocess(&raw).unwrap();
        for i in 0..x.nrows() {
            assert!((x.row(i).norm_squared() - 10.0).abs() < 1e-6 * 10.0);
        }
        for j in 0..x.ncols() {
            assert!(x.column(j).mean().abs() < 0.05);
        }
        // Covariance of the whitened (pre-renormalization) data is the
        // identity by construction; renormalization only rescales rows, so
        // the sample covariance stays close to a multiple of it.
        let cov = x.transpose() * &x / x.nrows() as f64;
        let diag_mean = cov.diagonal().mean();
        for i in 0..cov.nrows() {
            for j in 0..cov.ncols() {
                let want = if i == j { diag_mean } else { 0.0 };
                assert!((cov[(i, j)] - want).abs() < 0.12 * diag_mean);
            }
        }
    }

    #[test]
    fn preprocess_handles_degenerate_directions() {
        let mut raw = gaussian_pool(60, 8, "pre-deg");
        for i in 0..raw.nrows() {
            raw[(i, 3)] = 7.0;
        }
        let x = preprocess(&raw).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
        for i in 0..x.nrows() {
            assert!((x.row(i).norm_squared() - 8.0).abs() < 1e-6 * 8.0);
        }
    }

    #[test]
    fn preprocess_commutes_with_row_duplication() {
        let mut raw = gaussian_pool(50, 6, "pre-dup");
        let copy = raw.row(11).into_owned();
        raw.row_mut(29).copy_from(&copy);
        let x = preprocess(&raw).unwrap();
        assert_eq!(x.row(11), x.row(29));
    }

    #[test]
    fn renormalization_is_idempotent() {
        let raw = gaussian_pool(40, 12, "pre-idem");
        let x = preprocess(&raw).unwrap();
        let mut again = x.clone();
        renormalize_rows(&mut again, 12.0);
        for (a, b) in x.iter().zip(again.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn preprocess_rejects_rank_zero_input() {
        let raw = DMatrix::from_element(10, 5, 2.5);
        assert!(matches!(preprocess(&raw), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn full_sharing_gives_identical_tasks() {
        // p = 40 below the input dimension keeps the linear Gram matrix
        // invertible, so the similarity comes out exactly 1.
        let pool = gaussian_pool(200, 60, "td-full");
        let params = TargetDistractorParams {
            rho_shared: 1.0,
            rho_target: 1.0,
            rho_flip: 0.0,
            p: 40,
            t: 3,
            seed: 9,
            ..Default::default()
        };
        let seq = gen_target_distractor(&pool, &params).unwrap();
        assert_eq!(seq.len(), 3);
        for d in &seq[1..] {
            assert_eq!(d.x, seq[0].x);
            assert_eq!(d.y, seq[0].y);
        }
        let cfg = KernelConfig {
            depth: 1,
            nonlinearity: Nonlinearity::Linear,
            sigma_sq: 1.0,
            lambda: Lambda::Infinite,
            input_dim: 60,
        };
        let gs = orderparams::gamma_sim(&seq[0], &seq[1], &cfg).unwrap();
        assert!((gs - 1.0).abs() < 1e-8);
    }

    #[test]
    fn zero_sharing_needs_zero_target_and_disjoint_images() {
        let pool = gaussian_pool(400, 20, "td-zero");
        let bad = TargetDistractorParams {
            rho_shared: 0.0,
            rho_target: 0.5,
            p: 40,
            t: 2,
            seed: 1,
            ..Default::default()
        };
        assert!(matches!(
            gen_target_distractor(&pool, &bad),
            Err(Error::Infeasible(_))
        ));
        let params = TargetDistractorParams {
            rho_target: 0.0,
            ..bad
        };
        let seq = gen_target_distractor(&pool, &params).unwrap();
        // No row of task 2 appears anywhere in task 1.
        for i in 0..seq[1].x.nrows() {
            for j in 0..seq[0].x.nrows() {
                assert_ne!(seq[1].x.row(i), seq[0].x.row(j));
            }
        }
    }

    #[test]
    fn infeasible_combinations_name_the_violated_bound() {
        let base = TargetDistractorParams {
            p: 100,
            t: 2,
            seed: 0,
            ..Default::default()
        };
        let low = TargetDistractorParams {
            rho_shared: 0.05,
            rho_target: 0.9,
            ..base
        };
        match low.validate() {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("rho_target <=")),
            other => panic!("expected infeasible, got {other:?}"),
        }
        let high = TargetDistractorParams {
            rho_shared: 0.95,
            rho_target: 0.1,
            ..base
        };
        match high.validate() {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("rho_target >=")),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn flip_statistics_match_the_requested_rate() {
        // All labeled images shared: x = 0.5 of p = 400 gives 200 Bernoulli
        // draws per seed; ten seeds give 2000 with sigma ~ 14.5.
        let pool = gaussian_pool(650, 16, "td-flip");
        let mut flipped = 0usize;
        let total = 10 * 200;
        for seed in 0..10 {
            let params = TargetDistractorParams {
                rho_shared: 0.5,
                rho_target: 1.0,
                rho_flip: 0.3,
                target_fraction: 0.5,
                p: 400,
                t: 2,
                seed,
                ..Default::default()
            };
            let seq = gen_target_distractor(&pool, &params).unwrap();
            for i in 0..200 {
                assert!(seq[0].y[i] * seq[1].y[i] != 0.0);
                if seq[0].y[i] * seq[1].y[i] < 0.0 {
                    flipped += 1;
                }
            }
        }
        let freq = flipped as f64 / total as f64;
        let sigma = (0.3 * 0.7 / total as f64).sqrt();
        assert!((freq - 0.3).abs() < 2.0 * sigma, "freq {freq}");
    }

    #[test]
    fn distractor_labels_never_flip() {
        let pool = gaussian_pool(300, 12, "td-dist");
        let params = TargetDistractorParams {
            rho_shared: 0.9,
            rho_target: 1.0,
            rho_flip: 0.5,
            target_fraction: 0.5,
            p: 200,
            t: 3,
            seed: 4,
            ..Default::default()
        };
        let seq = gen_target_distractor(&pool, &params).unwrap();
        for d in &seq {
            let zeros = d.y.iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, 100);
        }
        // Zero labels sit at the same positions in every task.
        for i in 0..200 {
            let z0 = seq[0].y[i] == 0.0;
            for d in &seq[1..] {
                assert_eq!(d.y[i] == 0.0, z0);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_pool_limited() {
        let pool = gaussian_pool(120, 10, "td-det");
        let params = TargetDistractorParams {
            rho_shared: 0.5,
            rho_target: 0.5,
            rho_flip: 0.2,
            p: 50,
            t: 2,
            seed: 77,
            ..Default::default()
        };
        let a = gen_target_distractor(&pool, &params).unwrap();
        let b = gen_target_distractor(&pool, &params).unwrap();
        for (da, db) in a.iter().zip(&b) {
            assert_eq!(da.x, db.x);
            assert_eq!(da.y, db.y);
        }
        let big = TargetDistractorParams { t: 40, ..params };
        match gen_target_distractor(&pool, &big) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("pool exhausted")),
            other => panic!("expected pool exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn zero_ratio_permutation_is_the_identity() {
        let base = Dataset::new(
            gaussian_pool(12, 16, "perm-zero"),
            DVector::from_element(12, 1.0),
            "base",
            Split::Train,
        )
        .unwrap();
        let seq = gen_permutation(&base, 0.0, 4, 3, true).unwrap();
        for d in &seq {
            assert_eq!(d.x, base.x);
        }
    }

    #[test]
    fn permutation_touches_exactly_the_requested_positions() {
        let base = Dataset::new(
            gaussian_pool(8, 16, "perm-count"),
            DVector::from_element(8, -1.0),
            "base",
            Split::Train,
        )
        .unwrap();
        let seq = gen_permutation(&base, 0.25, 2, 11, false).unwrap();
        assert_eq!(seq[0].x, base.x);
        let moved = (0..16)
            .filter(|&j| seq[1].x.column(j) != base.x.column(j))
            .count();
        assert_eq!(moved, 4);
        let full = gen_permutation(&base, 1.0, 2, 11, false).unwrap();
        let moved = (0..16)
            .filter(|&j| full[1].x.column(j) != base.x.column(j))
            .count();
        assert_eq!(moved, 16);
    }

    #[test]
    fn permutations_replay_under_the_seed_and_differ_across_tasks() {
        let p1 = permutation_indices(100, 0.5, 21, 1);
        assert_eq!(p1, permutation_indices(100, 0.5, 21, 1));
        assert_ne!(p1, permutation_indices(100, 0.5, 21, 2));
        assert_ne!(p1, permutation_indices(100, 0.5, 22, 1));
        // A valid permutation: sorted image is the identity.
        let mut sorted = p1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    /// Pool of `classes` classes, `per_class` rows each; a row's class is
    /// recoverable as `row[0].round()`.
    fn labeled_pool(classes: usize, per_class: usize, n0: usize) -> LabeledPool {
        let mut rng = keyed_rng(53, 1, "split-pool");
        let rows = classes * per_class;
        let mut images = DMatrix::from_fn(rows, n0, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let mut labels = Vec::with_capacity(rows);
        for c in 0..classes {
            for r in 0..per_class {
                images[(c * per_class + r, 0)] = c as f64;
                labels.push(c as i64);
            }
        }
        LabeledPool { images, labels }
    }

    fn row_class(d: &Dataset, r: usize) -> i64 {
        d.x[(r, 0)].round() as i64
    }

    #[test]
    fn disjoint_split_uses_each_class_once() {
        let pool = labeled_pool(10, 30, 8);
        let seq = gen_split(&pool, SplitMode::Disjoint, 40, 5).unwrap();
        assert_eq!(seq.len(), 5);
        let mut seen = std::collections::BTreeSet::new();
        for d in &seq {
            assert_eq!(d.p(), 40);
            let plus = d.y.iter().filter(|&&v| v == 1.0).count();
            assert_eq!(plus, 20);
            for r in 0..d.p() {
                seen.insert((row_class(d, r), d.task_id.clone()));
            }
        }
        // 10 classes, each in exactly one task.
        let classes: std::collections::BTreeSet<i64> = seen.iter().map(|(c, _)| *c).collect();
        assert_eq!(classes.len(), 10);
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn split_widens_to_four_classes_when_pairs_run_short() {
        let pool = labeled_pool(10, 12, 8);
        let seq = gen_split(&pool, SplitMode::Disjoint, 40, 2).unwrap();
        assert_eq!(seq.len(), 2);
        for d in &seq {
            let distinct: std::collections::BTreeSet<i64> =
                (0..d.p()).map(|r| row_class(d, r)).collect();
            assert_eq!(distinct.len(), 4);
        }
        assert!(matches!(
            gen_split(&pool, SplitMode::Disjoint, 200, 2),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn partial_split_mixes_by_the_requested_percent() {
        let pool = labeled_pool(4, 60, 8);
        for (x, major) in [(0.0, 20), (50.0, 30), (100.0, 40)] {
            let seq = gen_split(&pool, SplitMode::Partial(x), 40, 7).unwrap();
            assert_eq!(seq.len(), 2);
            let plus1 = seq[0].y.iter().filter(|&&v| v == 1.0).count();
            let plus2 = seq[1].y.iter().filter(|&&v| v == 1.0).count();
            assert_eq!(plus1, major);
            assert_eq!(plus2, 40 - major);
        }
    }

    #[test]
    fn partial_split_labels_follow_the_group_dichotomy() {
        let pool = labeled_pool(4, 60, 8);
        let seq = gen_split(&pool, SplitMode::Partial(50.0), 40, 7).unwrap();
        // Group membership is fixed by the seed, shared by both tasks.
        let mut group_of: std::collections::BTreeMap<i64, f64> = Default::default();
        for d in &seq {
            for r in 0..d.p() {
                let c = row_class(d, r);
                let entry = group_of.entry(c).or_insert(d.y[r]);
                assert_eq!(*entry, d.y[r], "class {c} label changed between tasks");
            }
        }
    }

    #[test]
    fn interpolation_steps_through_even_mixtures() {
        let p = 40;
        let d1 = Dataset::new(
            DMatrix::from_element(p, 4, 1.0),
            DVector::from_element(p, 1.0),
            "one",
            Split::Train,
        )
        .unwrap();
        let d2 = Dataset::new(
            DMatrix::from_element(p, 4, 2.0),
            DVector::from_element(p, -1.0),
            "two",
            Split::Train,
        )
        .unwrap();
        let plain = gen_interpolated(&d1, &d2, 0).unwrap();
        assert_eq!(plain.len(), 2);
        assert_eq!(plain[0].x, d1.x);
        assert_eq!(plain[1].x, d2.x);
        let seq = gen_interpolated(&d1, &d2, 3).unwrap();
        assert_eq!(seq.len(), 5);
        for (k, want) in [(1usize, 10usize), (2, 20), (3, 30)] {
            let from2 = (0..p).filter(|&r| seq[k].x[(r, 0)] == 2.0).count();
            assert_eq!(from2, want);
            assert_eq!(seq[k].y.iter().filter(|&&v| v == -1.0).count(), want);
        }
    }

    #[test]
    fn context_vectors_are_per_task_and_shared_across_splits() {
        let train: Vec<Dataset> = (0..2)
            .map(|i| {
                Dataset::new(
                    gaussian_pool(10, 6, &format!("ctx-train-{i}")),
                    DVector::zeros(10),
                    format!("t{i}"),
                    Split::Train,
                )
                .unwrap()
            })
            .collect();
        let test: Vec<Dataset> = (0..2)
            .map(|i| {
                Dataset::new(
                    gaussian_pool(7, 6, &format!("ctx-test-{i}")),
                    DVector::zeros(7),
                    format!("t{i}"),
                    Split::Test,
                )
                .unwrap()
            })
            .collect();
        let unchanged = append_context(&train, 0, 5).unwrap();
        assert_eq!(unchanged[0].x, train[0].x);
        let tr = append_context(&train, 4, 5).unwrap();
        let te = append_context(&test, 4, 5).unwrap();
        for d in tr.iter().chain(&te) {
            assert_eq!(d.n0(), 10);
            for r in 0..d.p() {
                assert!((d.x.row(r).norm_squared() - 10.0).abs() < 1e-9 * 10.0);
            }
        }
        // The appended block of every row points along the task's context
        // vector; renormalization only rescales it.
        let dir = |d: &Dataset, r: usize| {
            let tail = d.x.row(r).columns(6, 4).into_owned();
            &tail / tail.norm()
        };
        let d0 = dir(&tr[0], 0);
        for r in 1..10 {
            assert!((dir(&tr[0], r) - &d0).norm() < 1e-12);
        }
        for r in 0..7 {
            assert!((dir(&te[0], r) - &d0).norm() < 1e-12);
        }
        assert!((dir(&tr[1], 0) - &d0).norm() > 0.1);
    }
}
