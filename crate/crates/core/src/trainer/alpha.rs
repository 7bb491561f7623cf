//! Validation-driven selection of the rescale factor α.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Float;

/// The coarse grid searched in grid mode.
pub const GRID: [Float; 5] = [0.3, 0.5, 1.0, 2.0, 3.0];

/// The narrowed grid used when 1.0 wins the coarse one.
pub fn narrowed_grid() -> [Float; 5] {
    [0.3f64.sqrt() as Float, 0.5f64.sqrt() as Float, 1.0, 2.0f64.sqrt() as Float, 3.0f64.sqrt() as Float]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// α stays at its initial value.
    Fixed,
    Grid,
    Neighborhood,
    Balance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub epoch: usize,
    /// `(α, J_val(α))` for every candidate evaluated this epoch.
    pub evaluated: Vec<(Float, Float)>,
    pub chosen: Float,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaState {
    pub alpha: Float,
    pub mode: AlphaMode,
    pub candidates: Vec<Float>,
    pub history: Vec<AlphaRecord>,
}

impl AlphaState {
    pub fn new(alpha: Float, mode: AlphaMode) -> Self {
        let candidates = match mode {
            AlphaMode::Grid => GRID.to_vec(),
            _ => Vec::new(),
        };
        Self {
            alpha,
            mode,
            candidates,
            history: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub alpha: Float,
    pub evaluated: Vec<(Float, Float)>,
}

/// Minimum J; among exact ties, `prefer` wins if present, then the smaller α.
pub fn argmin_with_preference(evaluated: &[(Float, Float)], prefer: Float) -> (Float, Float) {
    let best = evaluated
        .iter()
        .map(|&(_, j)| j)
        .fold(Float::INFINITY, Float::min);
    let tied: Vec<(Float, Float)> = evaluated.iter().copied().filter(|&(_, j)| j == best).collect();
    if let Some(&p) = tied.iter().find(|&&(a, _)| a == prefer) {
        return p;
    }
    tied.iter()
        .copied()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap_or_else(|| {
            // Every J was NaN: fall back to the preferred candidate.
            evaluated
                .iter()
                .copied()
                .find(|&(a, _)| a == prefer)
                .unwrap_or(evaluated[0])
        })
}

fn eval_all<F>(alphas: &[Float], j: &mut F) -> Result<Vec<(Float, Float)>>
where
    F: FnMut(Float) -> Result<Float>,
{
    alphas.iter().map(|&a| Ok((a, j(a)?))).collect()
}

/// Evaluates `{0.5α, α, 2α}` and returns the argmin; ties keep α, then the
/// smaller candidate.
pub fn select_alpha_neighborhood<F>(alpha_t: Float, mut j: F) -> Result<Selection>
where
    F: FnMut(Float) -> Result<Float>,
{
    if !(alpha_t > 0.0) {
        return Err(Error::config(format!("neighborhood search needs α > 0, got {alpha_t}")));
    }
    let evaluated = eval_all(&[0.5 * alpha_t, alpha_t, 2.0 * alpha_t], &mut j)?;
    let (alpha, _) = argmin_with_preference(&evaluated, alpha_t);
    Ok(Selection { alpha, evaluated })
}

/// Evaluates [`GRID`]; when 1.0 wins, re-searches [`narrowed_grid`]. Ties
/// go to 1.0, then the smaller α.
pub fn select_alpha_grid<F>(mut j: F) -> Result<Selection>
where
    F: FnMut(Float) -> Result<Float>,
{
    let mut evaluated = eval_all(&GRID, &mut j)?;
    let (coarse, j_one) = argmin_with_preference(&evaluated, 1.0);
    if coarse != 1.0 {
        return Ok(Selection {
            alpha: coarse,
            evaluated,
        });
    }
    let mut fine = Vec::with_capacity(5);
    for a in narrowed_grid() {
        fine.push(if a == 1.0 { (a, j_one) } else { (a, j(a)?) });
    }
    let (alpha, _) = argmin_with_preference(&fine, 1.0);
    evaluated.extend(fine.into_iter().filter(|&(a, _)| a != 1.0));
    Ok(Selection { alpha, evaluated })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiConvexity {
    pub holds: bool,
    /// `(α_i, α_k, α_j)` with `J(α_k) > max(J(α_i), J(α_j)) + tol`.
    pub violation: Option<(Float, Float, Float)>,
}

/// Discrete check over every bracketed interior sample. Samples are sorted
/// by α first.
pub fn check_quasiconvex(samples: &[(Float, Float)], tol: Float) -> QuasiConvexity {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    for k in 1..s.len().saturating_sub(1) {
        for i in 0..k {
            for j in k + 1..s.len() {
                if s[k].1 > s[i].1.max(s[j].1) + tol {
                    return QuasiConvexity {
                        holds: false,
                        violation: Some((s[i].0, s[k].0, s[j].0)),
                    };
                }
            }
        }
    }
    QuasiConvexity {
        holds: true,
        violation: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceProbe {
    pub alpha: Float,
    pub j_custom: Float,
    pub j_general: Float,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceStop {
    /// Shrinking further would help the general loss but hurt the custom one.
    Tradeoff,
    /// The next α would fall below the floor.
    Floor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub alpha: Float,
    pub stop: BalanceStop,
    pub probes: Vec<BalanceProbe>,
}

/// Starting at `alpha_start`, repeatedly tries `α ← shrink·α`. Stops at the
/// current α when the step would lower `J_general` while raising `J_custom`,
/// or when the next α is below `floor`.
pub fn balance_point_search<C, G>(
    mut j_custom: C,
    mut j_general: G,
    alpha_start: Float,
    shrink: Float,
    floor: Float,
) -> Result<BalanceReport>
where
    C: FnMut(Float) -> Result<Float>,
    G: FnMut(Float) -> Result<Float>,
{
    if !(shrink > 0.0 && shrink < 1.0) {
        return Err(Error::config(format!("shrink {shrink} must be in (0, 1)")));
    }
    if !(floor > 0.0) || !(alpha_start > 0.0) {
        return Err(Error::config("balance search needs positive start and floor"));
    }
    let mut alpha = alpha_start;
    let mut cur = BalanceProbe {
        alpha,
        j_custom: j_custom(alpha)?,
        j_general: j_general(alpha)?,
    };
    let mut probes = vec![cur.clone()];
    loop {
        let next = shrink * alpha;
        if next < floor {
            return Ok(BalanceReport {
                alpha,
                stop: BalanceStop::Floor,
                probes,
            });
        }
        let p = BalanceProbe {
            alpha: next,
            j_custom: j_custom(next)?,
            j_general: j_general(next)?,
        };
        probes.push(p.clone());
        if p.j_general < cur.j_general && p.j_custom > cur.j_custom {
            return Ok(BalanceReport {
                alpha,
                stop: BalanceStop::Tradeoff,
                probes,
            });
        }
        alpha = next;
        cur = p;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(pairs: &'static [(Float, Float)]) -> impl FnMut(Float) -> Result<Float> {
        move |a| {
            Ok(pairs
                .iter()
                .find(|(x, _)| (x - a).abs() < 1e-12)
                .map(|p| p.1)
                .expect("candidate in table"))
        }
    }

    #[test]
    fn neighborhood_examples() {
        let keep = select_alpha_neighborhood(1.0, table(&[(0.5, 0.9), (1.0, 0.8), (2.0, 1.1)])).unwrap();
        assert_eq!(keep.alpha, 1.0);
        let flat = select_alpha_neighborhood(0.4, |_| Ok(1.0)).unwrap();
        assert_eq!(flat.alpha, 0.4);
        let down = select_alpha_neighborhood(1.0, |a| Ok(-a)).unwrap();
        assert_eq!(down.alpha, 2.0);
        assert!(select_alpha_neighborhood(0.0, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn grid_examples() {
        let s = select_alpha_grid(|a| Ok((a - 0.5).abs())).unwrap();
        assert_eq!(s.alpha, 0.5);
        assert_eq!(s.evaluated.len(), 5);
        let s = select_alpha_grid(|a| Ok((a - 1.3).powi(2))).unwrap();
        assert_eq!(s.alpha, 2.0f64.sqrt() as Float);
        let s = select_alpha_grid(|_| Ok(2.0)).unwrap();
        assert_eq!(s.alpha, 1.0);
    }

    #[test]
    fn ties_without_preferred_pick_smaller() {
        assert_eq!(argmin_with_preference(&[(3.0, 1.0), (2.0, 1.0), (1.0, 5.0)], 1.0).0, 2.0);
    }

    #[test]
    fn quasiconvex_examples() {
        let conv: Vec<_> = [0.25, 0.5, 1.0, 1.5, 2.0].iter().map(|&a| (a, (a - 1.0) * (a - 1.0))).collect();
        assert!(check_quasiconvex(&conv, 0.0).holds);
        let bump = check_quasiconvex(&[(0.5, 1.0), (1.0, 3.0), (2.0, 1.0)], 0.0);
        assert_eq!(bump.violation, Some((0.5, 1.0, 2.0)));
        let mono: Vec<_> = (1..8).map(|i| (i as Float, -(i as Float))).collect();
        assert!(check_quasiconvex(&mono, 0.0).holds);
    }

    #[test]
    fn balance_examples() {
        let flat = balance_point_search(|_| Ok(1.0), |_| Ok(1.0), 1.0, 0.5, 0.01).unwrap();
        assert_eq!(flat.stop, BalanceStop::Floor);
        assert_eq!(flat.alpha, 1.0 / 64.0);
        let fire = balance_point_search(|a| Ok(-a), |a| Ok(a), 1.0, 0.5, 0.01).unwrap();
        assert_eq!((fire.alpha, fire.stop), (1.0, BalanceStop::Tradeoff));
        assert!(balance_point_search(|_| Ok(0.0), |_| Ok(0.0), 1.0, 1.5, 0.1).is_err());
    }
}
