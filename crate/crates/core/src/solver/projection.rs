//! Euclidean projections used by the primal-dual iterations.

use crate::neighborhood::PenaltyNorm;

/// Projection onto the probability simplex `{x >= 0, sum x = 1}` by sorting
/// and thresholding.
pub fn project_simplex(row: &[f64]) -> Vec<f64> {
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut threshold = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if u - t > 0.0 {
            threshold = t;
        }
    }
    row.iter().map(|&v| (v - threshold).max(0.0)).collect()
}

/// In-place simplex projection with expected linear cost (Condat's pivot
/// scheme). `scratch` is reused between calls to avoid allocation.
pub(crate) fn project_simplex_in_place(row: &mut [f64], scratch: &mut Vec<f64>, parked: &mut Vec<f64>) {
    let n = row.len();
    if n == 0 {
        return;
    }
    if n == 1 {
        row[0] = 1.0;
        return;
    }
    scratch.clear();
    parked.clear();
    scratch.push(row[0]);
    let mut rho = row[0] - 1.0;
    for &y in &row[1..] {
        if y > rho {
            rho += (y - rho) / (scratch.len() + 1) as f64;
            if rho > y - 1.0 {
                scratch.push(y);
            } else {
                parked.extend_from_slice(scratch);
                scratch.clear();
                scratch.push(y);
                rho = y - 1.0;
            }
        }
    }
    for &y in parked.iter() {
        if y > rho {
            scratch.push(y);
            rho += (y - rho) / scratch.len() as f64;
        }
    }
    loop {
        let before = scratch.len();
        let mut k = 0;
        while k < scratch.len() {
            let y = scratch[k];
            if y <= rho {
                scratch.swap_remove(k);
                rho += (rho - y) / scratch.len() as f64;
            } else {
                k += 1;
            }
        }
        if scratch.len() == before {
            break;
        }
    }
    for v in row.iter_mut() {
        *v = (*v - rho).max(0.0);
    }
}

/// Projection onto the unit ball of the dual penalty norm.
///
/// For [`PenaltyNorm::L12`] the whole slice is one group and is scaled
/// radially; for [`PenaltyNorm::L11`] every component is clamped to `[-1, 1]`.
pub fn project_dual(group: &[f64], norm: PenaltyNorm) -> Vec<f64> {
    let mut out = group.to_vec();
    project_dual_in_place(&mut out, norm);
    out
}

pub(crate) fn project_dual_in_place(group: &mut [f64], norm: PenaltyNorm) {
    match norm {
        PenaltyNorm::L11 => group.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0)),
        PenaltyNorm::L12 => {
            let len = group.iter().map(|v| v * v).sum::<f64>().sqrt();
            if len > 1.0 {
                group.iter_mut().for_each(|v| *v /= len);
            }
        }
    }
}
