use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest player count accepted; the score table has `2^G` entries.
pub const MAX_PLAYERS: usize = 16;

/// Cooperative game over named groups. Profiles are bit masks, bit `i`
/// selecting group `i`; the empty profile scores 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyGame {
    pub groups: Vec<String>,
    scores: Vec<Option<f64>>,
}

impl ShapleyGame {
    pub fn new(groups: Vec<String>) -> Result<Self> {
        if groups.is_empty() || groups.len() > MAX_PLAYERS {
            return Err(Error::invalid(format!("a game needs 1..={MAX_PLAYERS} groups, got {}", groups.len())));
        }
        let mut scores = vec![None; 1 << groups.len()];
        scores[0] = Some(0.0);
        Ok(Self { groups, scores })
    }

    /// Fill every non-empty profile from a function of the mask.
    pub fn from_fn(groups: Vec<String>, mut f: impl FnMut(u32) -> f64) -> Result<Self> {
        let mut g = Self::new(groups)?;
        for mask in 1..g.scores.len() as u32 {
            g.set(mask, f(mask))?;
        }
        Ok(g)
    }

    pub fn players(&self) -> usize {
        self.groups.len()
    }

    pub fn full(&self) -> u32 {
        (self.scores.len() - 1) as u32
    }

    pub fn set(&mut self, profile: u32, score: f64) -> Result<()> {
        if profile == 0 {
            return Err(Error::invalid("the empty profile is fixed at 0"));
        }
        if !score.is_finite() {
            return Err(Error::invalid(format!("profile {profile:b}: non-finite score {score}")));
        }
        let slot = self.scores.get_mut(profile as usize).ok_or_else(|| Error::invalid(format!("profile {profile:b} out of range")))?;
        *slot = Some(score);
        Ok(())
    }

    pub fn score(&self, profile: u32) -> Result<f64> {
        self.scores
            .get(profile as usize)
            .copied()
            .flatten()
            .ok_or_else(|| Error::invalid(format!("no score for profile {}", self.describe(profile))))
    }

    /// Group names in a profile, joined with `+`.
    pub fn describe(&self, profile: u32) -> String {
        let names: Vec<&str> =
            self.groups.iter().enumerate().filter(|(i, _)| profile >> i & 1 == 1).map(|(_, n)| n.as_str()).collect();
        if names.is_empty() {
            "{}".into()
        } else {
            names.join("+")
        }
    }

    /// Scores for every profile, including the empty one.
    pub fn table(&self) -> Result<Vec<(u32, f64)>> {
        (0..self.scores.len() as u32).map(|m| Ok((m, self.score(m)?))).collect()
    }
}

/// `s(p + e_i) - s(p)`.
pub fn marginal(game: &ShapleyGame, profile: u32, i: usize) -> Result<f64> {
    if i >= game.players() {
        return Err(Error::invalid(format!("group {i} out of range")));
    }
    if profile >> i & 1 == 1 {
        return Err(Error::invalid(format!("group `{}` is already in profile {}", game.groups[i], game.describe(profile))));
    }
    Ok(game.score(profile | 1 << i)? - game.score(profile)?)
}

/// Weight `|p|! (G - |p| - 1)! / G!` of a coalition of size `size`.
pub fn coalition_weight(players: usize, size: usize) -> f64 {
    let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    fact(size) * fact(players - size - 1) / fact(players)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyResult {
    pub groups: Vec<String>,
    pub values: Vec<f64>,
    pub grand: f64,
}

impl ShapleyResult {
    pub fn value(&self, group: &str) -> Option<f64> {
        self.groups.iter().position(|g| g == group).map(|i| self.values[i])
    }

    /// Group indices from largest to smallest value.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        idx
    }
}

/// Exact Shapley values by enumerating every coalition.
pub fn shapley_values(game: &ShapleyGame) -> Result<ShapleyResult> {
    let g = game.players();
    let weights: Vec<f64> = (0..g).map(|k| coalition_weight(g, k)).collect();
    let mut values = vec![0.0; g];
    for (i, v) in values.iter_mut().enumerate() {
        for p in 0..=game.full() {
            if p >> i & 1 == 0 {
                *v += weights[p.count_ones() as usize] * marginal(game, p, i)?;
            }
        }
    }
    Ok(ShapleyResult { groups: game.groups.clone(), values, grand: game.score(game.full())? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("g{i}")).collect()
    }

    #[test]
    fn marginal_examples() {
        let g = ShapleyGame::from_fn(names(2), |m| if m == 1 { 0.4 } else { 0.7 }).unwrap();
        assert_eq!(marginal(&g, 0, 0).unwrap(), 0.4);
        assert!(marginal(&g, 1, 0).is_err());
        let additive = ShapleyGame::from_fn(names(3), |m| 0.2 * f64::from(m.count_ones())).unwrap();
        for p in [0u32, 2, 4, 6] {
            assert!((marginal(&additive, p, 0).unwrap() - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_and_symmetric_game() {
        assert!((coalition_weight(3, 1) - 1.0 / 6.0).abs() < 1e-15);
        assert!((coalition_weight(3, 0) - 1.0 / 3.0).abs() < 1e-15);
        let g = ShapleyGame::from_fn(names(3), |m| f64::from(m.count_ones()) / 3.0).unwrap();
        let r = shapley_values(&g).unwrap();
        for v in r.values {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_scores_and_empty_profile() {
        let mut g = ShapleyGame::new(names(2)).unwrap();
        assert!(g.set(0, 0.3).is_err());
        g.set(1, 0.1).unwrap();
        assert!(shapley_values(&g).is_err());
        assert_eq!(g.describe(3), "g0+g1");
    }
}
