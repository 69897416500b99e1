//! Displacement-error metrics, best-of-N evaluation, and the weak/strong
//! mean-correlation-coefficient identifiability score.
//!
//! ADE averages the per-step Euclidean error over all predicted steps and
//! agents; FDE looks at the final step only. Best-of-N selects, per agent,
//! the sampled trajectory with the lowest ADE and aggregates that sample's
//! ADE and FDE. MCC correlates two latent codebooks dimension-by-dimension,
//! solves a maximum-|correlation| assignment, and averages the signed
//! correlations along it; weak mode first aligns the codebooks with a
//! least-squares affine map.

use crate::dataio::Scene;
use crate::error::{GcrlError, Result};
use crate::model::{GcrlModel, SSampleMode};
use crate::numgrad::rng::{derive_seed, seed_rng, tags, RunRng};
use rayon::prelude::*;

/// Mean per-step Euclidean displacement error in meters.
pub fn ade(preds: &[Vec<[f64; 2]>], gts: &[Vec<[f64; 2]>]) -> Result<f64> {
    check_shapes(preds, gts)?;
    let mut total = 0.0;
    let mut steps = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        for (a, b) in p.iter().zip(g) {
            total += (a[0] - b[0]).hypot(a[1] - b[1]);
            steps += 1;
        }
    }
    Ok(total / steps as f64)
}

/// Final-step displacement error averaged over agents.
pub fn fde(preds: &[Vec<[f64; 2]>], gts: &[Vec<[f64; 2]>]) -> Result<f64> {
    check_shapes(preds, gts)?;
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let a = p.last().unwrap();
        let b = g.last().unwrap();
        total += (a[0] - b[0]).hypot(a[1] - b[1]);
    }
    Ok(total / preds.len() as f64)
}

fn check_shapes(preds: &[Vec<[f64; 2]>], gts: &[Vec<[f64; 2]>]) -> Result<()> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(GcrlError::Shape(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != g.len() || p.is_empty() {
            return Err(GcrlError::Shape(format!(
                "trajectory lengths {} vs {}",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

fn traj_ade(p: &[[f64; 2]], g: &[[f64; 2]]) -> f64 {
    p.iter()
        .zip(g)
        .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
        .sum::<f64>()
        / p.len() as f64
}

/// Ground-truth futures per agent of a scene, in batch order.
pub fn ground_truth_futures(scene: &Scene, obs_len: usize, pred_len: usize) -> Vec<Vec<[f64; 2]>> {
    scene
        .agents
        .iter()
        .map(|a| a.pos[obs_len..obs_len + pred_len].to_vec())
        .collect()
}

/// Best-of-N ADE/FDE over a scene set: per agent the minimum-ADE sample is
/// selected and its ADE/FDE aggregated. Scenes evaluate in parallel with
/// per-scene derived rng streams, so results are order- and
/// schedule-independent.
pub fn best_of_n(
    model: &GcrlModel,
    scenes: &[Scene],
    n: usize,
    seed: u64,
    s_mode: SSampleMode,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(GcrlError::Config("best-of-N needs N ≥ 1".into()));
    }
    if scenes.is_empty() {
        return Err(GcrlError::MissingInput("no scenes to evaluate".into()));
    }
    let per_scene: Vec<Result<(f64, f64, usize)>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut rng: RunRng = seed_rng(derive_seed(seed, tags::EVAL, i as u64));
            let preds = model.ancestral_predict(
                std::slice::from_ref(scene),
                n,
                &mut rng,
                s_mode,
            )?;
            let gts = ground_truth_futures(scene, model.cfg.obs_len, model.cfg.pred_len);
            let mut ade_sum = 0.0;
            let mut fde_sum = 0.0;
            for (agent, pred) in preds.iter().enumerate() {
                let gt = &gts[agent];
                let best = pred
                    .trajs
                    .iter()
                    .min_by(|a, b| {
                        traj_ade(a, gt).partial_cmp(&traj_ade(b, gt)).unwrap()
                    })
                    .unwrap();
                ade_sum += traj_ade(best, gt);
                let (lp, lg) = (best.last().unwrap(), gt.last().unwrap());
                fde_sum += (lp[0] - lg[0]).hypot(lp[1] - lg[1]);
            }
            Ok((ade_sum, fde_sum, preds.len()))
        })
        .collect();

    let mut ade_total = 0.0;
    let mut fde_total = 0.0;
    let mut agents = 0usize;
    for r in per_scene {
        let (a, f, c) = r?;
        ade_total += a;
        fde_total += f;
        agents += c;
    }
    Ok((ade_total / agents as f64, fde_total / agents as f64))
}

/// Convenience: per-agent posterior means of s and z over a scene set
/// (row-major n × d matrices), the latent codebooks MCC compares.
pub fn collect_latents(model: &GcrlModel, scenes: &[Scene]) -> Result<(Matrix, Matrix)> {
    let mut s_rows = Vec::new();
    let mut z_rows = Vec::new();
    for scene in scenes {
        for (qs, qz) in model.infer_posteriors(std::slice::from_ref(scene))? {
            s_rows.push(qs.mu().to_vec());
            z_rows.push(qz.mu().to_vec());
        }
    }
    Ok((Matrix::from_rows(s_rows)?, Matrix::from_rows(z_rows)?))
}

/// Row-major dense matrix for the latent codebooks.
#[derive(Debug, Clone)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(GcrlError::Shape("empty matrix".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(GcrlError::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MccMode {
    /// Raw correlations.
    Strong,
    /// After least-squares affine alignment of a onto b.
    Weak,
}

impl MccMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(MccMode::Strong),
            "weak" => Ok(MccMode::Weak),
            other => Err(GcrlError::Config(format!("unknown MCC mode `{other}`"))),
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Mean correlation coefficient between two latent codebooks.
///
/// Strong mode: Pearson correlations between all dimension pairs, a
/// maximum-|corr| assignment, then the mean of the signed correlations along
/// it. Weak mode first fits an affine map from a to b (closed-form least
/// squares with intercept). Zero-variance dimensions are excluded (with a
/// warning on stderr) since their correlation is undefined.
pub fn mcc(a: &Matrix, b: &Matrix, mode: MccMode) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(GcrlError::Shape(format!(
            "latent shapes {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if a.rows <= a.cols {
        return Err(GcrlError::Shape(format!(
            "need more samples ({}) than dimensions ({})",
            a.rows, a.cols
        )));
    }

    let variance = |m: &Matrix, j: usize| -> f64 {
        let col = m.col(j);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
    };
    let keep: Vec<usize> = (0..a.cols)
        .filter(|&j| {
            let ok = variance(a, j) > 1e-24 && variance(b, j) > 1e-24;
            if !ok {
                eprintln!("warning: excluding zero-variance latent dimension {j} from MCC");
            }
            ok
        })
        .collect();
    if keep.is_empty() {
        return Err(GcrlError::Shape("all latent dimensions degenerate".into()));
    }

    let a_aligned = match mode {
        MccMode::Strong => project(a, &keep),
        MccMode::Weak => affine_fit(&project(a, &keep), &project(b, &keep))?,
    };
    let b_kept = project(b, &keep);

    let d = keep.len();
    let mut corr = vec![vec![0.0; d]; d];
    for i in 0..d {
        let ai = a_aligned.col(i);
        for j in 0..d {
            corr[i][j] = pearson(&ai, &b_kept.col(j));
        }
    }
    let cost: Vec<Vec<f64>> = corr
        .iter()
        .map(|row| row.iter().map(|c| -c.abs()).collect())
        .collect();
    let assignment = hungarian_min(&cost);
    let mean_signed = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| corr[i][j])
        .sum::<f64>()
        / d as f64;
    Ok(mean_signed)
}

fn project(m: &Matrix, keep: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(m.rows * keep.len());
    for i in 0..m.rows {
        for &j in keep {
            data.push(m.data[i * m.cols + j]);
        }
    }
    Matrix {
        rows: m.rows,
        cols: keep.len(),
        data,
    }
}

/// Least-squares affine fit f(a) ≈ b with intercept, applied to a.
fn affine_fit(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    let d = a.cols;
    let p = d + 1; // + intercept
    // normal equations: (XᵀX) β = Xᵀb, X = [a | 1]
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xtb = vec![vec![0.0; b.cols]; p];
    for i in 0..n {
        let xi: Vec<f64> = (0..d)
            .map(|j| a.data[i * d + j])
            .chain(std::iter::once(1.0))
            .collect();
        for r in 0..p {
            for c in 0..p {
                xtx[r][c] += xi[r] * xi[c];
            }
            for c in 0..b.cols {
                xtb[r][c] += xi[r] * b.data[i * b.cols + c];
            }
        }
    }
    // ridge epsilon for numerical safety on collinear inputs
    for (r, row) in xtx.iter_mut().enumerate() {
        row[r] += 1e-10;
    }
    let beta = solve_multi(&mut xtx, &mut xtb)?;

    let mut out = vec![0.0; n * b.cols];
    for i in 0..n {
        for c in 0..b.cols {
            let mut acc = beta[d][c]; // intercept
            for j in 0..d {
                acc += a.data[i * d + j] * beta[j][c];
            }
            out[i * b.cols + c] = acc;
        }
    }
    Ok(Matrix {
        rows: n,
        cols: b.cols,
        data: out,
    })
}

/// Gaussian elimination with partial pivoting for AX = B (A consumed).
fn solve_multi(a: &mut [Vec<f64>], b: &mut [Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let m = b[0].len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(GcrlError::Shape("singular system in affine fit".into()));
        }
        a.swap(pivot, col);
        b.swap(pivot, col);
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            for k in 0..m {
                b[row][k] -= f * b[col][k];
            }
        }
    }
    Ok((0..n)
        .map(|i| (0..m).map(|j| b[i][j] / a[i][i]).collect())
        .collect())
}

/// O(n³) Hungarian algorithm (potentials form) for square min-cost
/// assignment; returns `assign[row] = col`.
pub fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    assert!(n > 0 && cost.iter().all(|r| r.len() == n));
    // 1-indexed potentials over rows (u) and cols (v)
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut match_of_col = vec![0usize; n + 1]; // col → row (1-indexed)

    for i in 1..=n {
        match_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = match_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[match_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if match_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            match_of_col[j0] = match_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if match_of_col[j] > 0 {
            assign[match_of_col[j] - 1] = j - 1;
        }
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgentPrediction;
    use crate::numgrad::rng::{normal_vec, seed_rng};
    use approx::assert_abs_diff_eq;

    fn straight(n_steps: usize, offset: [f64; 2]) -> Vec<[f64; 2]> {
        (0..n_steps)
            .map(|t| [t as f64 + offset[0], offset[1]])
            .collect()
    }

    #[test]
    fn ade_fde_exactness() {
        let gt = vec![straight(12, [0.0, 0.0]), straight(12, [5.0, 1.0])];
        assert_eq!(ade(&gt, &gt).unwrap(), 0.0);
        assert_eq!(fde(&gt, &gt).unwrap(), 0.0);

        let shifted: Vec<Vec<[f64; 2]>> = gt
            .iter()
            .map(|t| t.iter().map(|p| [p[0] + 1.0, p[1]]).collect())
            .collect();
        assert_abs_diff_eq!(ade(&shifted, &gt).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fde(&shifted, &gt).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ade_hand_case() {
        // 1 agent, 2 steps, per-step errors 3 and 4 → ADE 3.5
        let gt = vec![vec![[0.0, 0.0], [1.0, 0.0]]];
        let pred = vec![vec![[0.0, 3.0], [1.0, 4.0]]];
        assert_abs_diff_eq!(ade(&pred, &gt).unwrap(), 3.5, epsilon = 1e-12);
    }

    #[test]
    fn fde_hand_cases() {
        // only the final step counts
        let gt = vec![vec![[0.0, 0.0], [1.0, 0.0]]];
        let pred = vec![vec![[0.0, 9.0], [1.0, 2.0]]];
        assert_abs_diff_eq!(fde(&pred, &gt).unwrap(), 2.0, epsilon = 1e-12);
        // two agents, final errors 1 and 3 → 2
        let gt2 = vec![
            vec![[0.0, 0.0], [1.0, 0.0]],
            vec![[0.0, 0.0], [1.0, 0.0]],
        ];
        let pred2 = vec![
            vec![[0.0, 0.0], [1.0, 1.0]],
            vec![[0.0, 0.0], [1.0, 3.0]],
        ];
        assert_abs_diff_eq!(fde(&pred2, &gt2).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = vec![straight(12, [0.0, 0.0])];
        let b = vec![straight(11, [0.0, 0.0])];
        assert!(ade(&a, &b).is_err());
        assert!(fde(&a, &b).is_err());
    }

    fn predictions_from(trajs: Vec<Vec<Vec<[f64; 2]>>>) -> Vec<AgentPrediction> {
        trajs
            .into_iter()
            .map(|t| AgentPrediction { scene: 0, trajs: t })
            .collect()
    }

    #[test]
    fn best_sample_selection_logic() {
        // mimic best-of-n selection on fixed predictions
        let gt = straight(4, [0.0, 0.0]);
        let good = straight(4, [0.1, 0.0]);
        let bad = straight(4, [2.0, 0.0]);
        let preds = predictions_from(vec![vec![bad.clone(), good.clone()]]);
        let best = preds[0]
            .trajs
            .iter()
            .min_by(|a, b| traj_ade(a, &gt).partial_cmp(&traj_ade(b, &gt)).unwrap())
            .unwrap();
        assert_abs_diff_eq!(traj_ade(best, &gt), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = seed_rng(5);
        for n in 2..=6 {
            for _ in 0..20 {
                let cost: Vec<Vec<f64>> =
                    (0..n).map(|_| normal_vec(&mut rng, n, 1.0)).collect();
                let assign = hungarian_min(&cost);
                let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();

                // brute force over all permutations
                let mut perm: Vec<usize> = (0..n).collect();
                let mut best = f64::INFINITY;
                permute(&mut perm, 0, &mut |p| {
                    let t: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                    if t < best {
                        best = t;
                    }
                });
                assert!(
                    (total - best).abs() < 1e-9,
                    "n={n}: hungarian {total} vs brute {best}"
                );
            }
        }
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    fn random_latents(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = seed_rng(seed);
        Matrix {
            rows: n,
            cols: d,
            data: normal_vec(&mut rng, n * d, 1.0),
        }
    }

    #[test]
    fn identity_latents_have_mcc_one() {
        let a = random_latents(200, 4, 7);
        assert_abs_diff_eq!(mcc(&a, &a, MccMode::Strong).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mcc(&a, &a, MccMode::Weak).unwrap(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn affine_transform_recovered_by_weak_mode_only() {
        let a = random_latents(400, 3, 9);
        // random invertible affine map with mixing
        let m = [[0.6, -1.1, 0.3], [0.9, 0.4, -0.7], [-0.2, 0.8, 1.2]];
        let shift = [0.5, -1.0, 2.0];
        let mut data = Vec::with_capacity(a.rows * 3);
        for i in 0..a.rows {
            for r in 0..3 {
                let mut acc = shift[r];
                for c in 0..3 {
                    acc += m[r][c] * a.data[i * 3 + c];
                }
                data.push(acc);
            }
        }
        let b = Matrix {
            rows: a.rows,
            cols: 3,
            data,
        };
        let weak = mcc(&a, &b, MccMode::Weak).unwrap();
        assert_abs_diff_eq!(weak, 1.0, epsilon = 1e-8);
        let strong = mcc(&a, &b, MccMode::Strong).unwrap();
        assert!(strong < 0.999, "strong MCC should degrade under mixing: {strong}");
    }

    #[test]
    fn mcc_invariant_to_column_permutation() {
        let a = random_latents(300, 4, 11);
        let b = random_latents(300, 4, 12);
        let base = mcc(&a, &b, MccMode::Strong).unwrap();
        // permute b's columns
        let perm = [2usize, 0, 3, 1];
        let mut data = Vec::with_capacity(b.rows * 4);
        for i in 0..b.rows {
            for &j in &perm {
                data.push(b.data[i * 4 + j]);
            }
        }
        let bp = Matrix {
            rows: b.rows,
            cols: 4,
            data,
        };
        let permuted = mcc(&a, &bp, MccMode::Strong).unwrap();
        assert_abs_diff_eq!(base, permuted, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_columns_are_excluded() {
        let mut a = random_latents(100, 3, 13);
        let b = random_latents(100, 3, 14);
        for i in 0..a.rows {
            a.data[i * 3 + 1] = 7.0; // constant column
        }
        let got = mcc(&a, &b, MccMode::Strong).unwrap();
        assert!(got.is_finite());
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let a = random_latents(3, 4, 15);
        let b = random_latents(3, 4, 16);
        assert!(mcc(&a, &b, MccMode::Strong).is_err());
    }
}
