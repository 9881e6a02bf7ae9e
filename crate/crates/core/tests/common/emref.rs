//! Independent EM reference in double-double arithmetic: direct evaluation
//! of the trajectory-consensus responsibility formula and the closed-form
//! weighted MLE updates, all in linear space (no log-sum-exp), on instances
//! small enough that nothing underflows.

use super::dd::{Dd, DD_PI, DD_ZERO};

#[derive(Debug, Clone)]
pub struct RefMixture {
    /// means[k][d]
    pub means: Vec<Vec<Dd>>,
    /// vars[k][d]
    pub vars: Vec<Vec<Dd>>,
    pub weights: Vec<Dd>,
}

impl RefMixture {
    pub fn from_f64(means: &[Vec<f64>], vars: &[Vec<f64>], weights: &[f64]) -> Self {
        RefMixture {
            means: means
                .iter()
                .map(|row| row.iter().map(|&v| Dd::from(v)).collect())
                .collect(),
            vars: vars
                .iter()
                .map(|row| row.iter().map(|&v| Dd::from(v)).collect())
                .collect(),
            weights: weights.iter().map(|&v| Dd::from(v)).collect(),
        }
    }
}

/// N(s; mu, var) per dimension, multiplied out, in linear space.
fn gaussian_density(s: &[f64], mean: &[Dd], var: &[Dd]) -> Dd {
    let mut density = Dd::from(1.0);
    for d in 0..s.len() {
        let diff = Dd::from(s[d]).sub(mean[d]);
        let quad = diff.mul(diff).div(var[d].mul(Dd::from(2.0)));
        let norm = DD_PI.mul(Dd::from(2.0)).mul(var[d]).sqrt();
        density = density.mul(quad.neg().exp()).div(norm);
    }
    density
}

/// q_ik = pi_k prod_t N(s_t | k) / sum_j pi_j prod_t N(s_t | j).
pub fn responsibilities(mixture: &RefMixture, trajectories: &[Vec<Vec<f64>>]) -> Vec<Vec<Dd>> {
    let k = mixture.weights.len();
    trajectories
        .iter()
        .map(|traj| {
            let mut likes: Vec<Dd> = Vec::with_capacity(k);
            for c in 0..k {
                let mut like = mixture.weights[c];
                for state in traj {
                    like = like.mul(gaussian_density(state, &mixture.means[c], &mixture.vars[c]));
                }
                likes.push(like);
            }
            let mut total = DD_ZERO;
            for l in &likes {
                total = total.add(*l);
            }
            likes.into_iter().map(|l| l.div(total)).collect()
        })
        .collect()
}

/// The three closed-form updates, diagonal covariance, variance floor after.
/// Panics if any component empties out; oracle instances must avoid the
/// re-seeding rule so both paths stay comparable.
pub fn mle(
    trajectories: &[Vec<Vec<f64>>],
    resp: &[Vec<Dd>],
    variance_floor: f64,
) -> RefMixture {
    let n = trajectories.len();
    let k = resp[0].len();
    let dim = trajectories[0][0].len();

    let mut totals = vec![DD_ZERO; k];
    for q in resp {
        for c in 0..k {
            totals[c] = totals[c].add(q[c]);
        }
    }
    for (c, t) in totals.iter().enumerate() {
        assert!(
            !t.lt(1e-8),
            "oracle instance emptied component {c}; pick better-conditioned data"
        );
    }

    let mut means = vec![vec![DD_ZERO; dim]; k];
    for (i, traj) in trajectories.iter().enumerate() {
        let inv_t = Dd::from(1.0).div(Dd::from(traj.len() as f64));
        for c in 0..k {
            let w = resp[i][c].mul(inv_t);
            for state in traj {
                for d in 0..dim {
                    means[c][d] = means[c][d].add(w.mul(Dd::from(state[d])));
                }
            }
        }
    }
    for c in 0..k {
        for d in 0..dim {
            means[c][d] = means[c][d].div(totals[c]);
        }
    }

    let mut vars = vec![vec![DD_ZERO; dim]; k];
    for (i, traj) in trajectories.iter().enumerate() {
        let inv_t = Dd::from(1.0).div(Dd::from(traj.len() as f64));
        for c in 0..k {
            let w = resp[i][c].mul(inv_t);
            for state in traj {
                for d in 0..dim {
                    let diff = Dd::from(state[d]).sub(means[c][d]);
                    vars[c][d] = vars[c][d].add(w.mul(diff).mul(diff));
                }
            }
        }
    }
    for c in 0..k {
        for d in 0..dim {
            vars[c][d] = vars[c][d].div(totals[c]);
            if vars[c][d].lt(variance_floor) {
                vars[c][d] = Dd::from(variance_floor);
            }
        }
    }

    let total_n = Dd::from(n as f64);
    let weights = totals.iter().map(|t| t.div(total_n)).collect();
    RefMixture {
        means,
        vars,
        weights,
    }
}
