//! Spatially filtered repelling potential and the filter design rules
//! that accompany it.

use thiserror::Error;

use crate::scalar::Real;

/// Below this weighted separation sum a triggered neighbor is treated as
/// coinciding with the agent.
pub const SEPARATION_FLOOR: f64 = 1e-9;

/// Common ratio used when the design formula does not produce `r < 1`.
pub const DEGENERATE_RATIO: f64 = 1.0 - 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum CollisionError {
    #[error("distance window has {distances} samples but filter has {weights}")]
    LengthMismatch { distances: usize, weights: usize },
    #[error("empty distance window")]
    EmptyWindow,
    #[error("degenerate separation: weighted distance sum {0:e} for a triggered neighbor")]
    DegenerateSeparation(f64),
    #[error("filter weights must be positive and finite")]
    InvalidWeights,
    #[error("invalid filter design input: {0}")]
    InvalidDesign(&'static str),
}

/// Positive filter weights, one per sample of a distance window.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFilter<T> {
    weights: Vec<T>,
    min: T,
    max: T,
    sum: T,
}

impl<T: Real> SpatialFilter<T> {
    pub fn new(weights: Vec<T>) -> Result<Self, CollisionError> {
        if weights.is_empty() {
            return Err(CollisionError::EmptyWindow);
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > T::zero())) {
            return Err(CollisionError::InvalidWeights);
        }
        let min = weights.iter().copied().fold(T::infinity(), T::min);
        let max = weights.iter().copied().fold(T::zero(), T::max);
        let sum = weights.iter().copied().fold(T::zero(), |a, b| a + b);
        Ok(Self { weights, min, max, sum })
    }

    pub fn uniform(len: usize) -> Self {
        Self::new(vec![T::one(); len]).expect("uniform weights are valid")
    }

    /// Assigns rank-ordered weights (largest first) to the samples of
    /// `distances`: the smallest separation receives the largest weight,
    /// ties go to the earlier sample.
    pub fn ranked(rank_weights: &[T], distances: &[T]) -> Result<Self, CollisionError> {
        if rank_weights.len() != distances.len() {
            return Err(CollisionError::LengthMismatch {
                distances: distances.len(),
                weights: rank_weights.len(),
            });
        }
        let mut order: Vec<usize> = (0..distances.len()).collect();
        order.sort_by(|&a, &b| {
            distances[a]
                .partial_cmp(&distances[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut weights = vec![T::zero(); distances.len()];
        for (rank, &k) in order.iter().enumerate() {
            weights[k] = rank_weights[rank];
        }
        Self::new(weights)
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn lambda_min(&self) -> T {
        self.min
    }

    pub fn lambda_max(&self) -> T {
        self.max
    }

    /// Sum of all weights.
    pub fn lambda_sum(&self) -> T {
        self.sum
    }

    /// `sum_k lambda_k d_k`.
    pub fn weighted_sum(&self, distances: &[T]) -> Result<T, CollisionError> {
        if distances.len() != self.weights.len() {
            return Err(CollisionError::LengthMismatch {
                distances: distances.len(),
                weights: self.weights.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(distances)
            .fold(T::zero(), |acc, (&w, &d)| acc + w * d))
    }
}

/// True iff any predicted separation is strictly inside the safety radius.
pub fn on_collision_course<T: Real>(distances: &[T], r_min: T) -> bool {
    distances.iter().any(|&d| r_min - d > T::zero())
}

pub fn weighted_avg_distance<T: Real>(distances: &[T], filter: &SpatialFilter<T>) -> Result<T, CollisionError> {
    Ok(filter.weighted_sum(distances)? / filter.lambda_sum())
}

/// Potential contribution of one neighbor whose indicator is known.
pub fn potential_term<T: Real>(
    distances: &[T],
    filter: &SpatialFilter<T>,
    r_min: T,
    active: bool,
) -> Result<T, CollisionError> {
    if !active {
        return Ok(T::zero());
    }
    let denom = filter.weighted_sum(distances)?;
    if denom < T::lit(SEPARATION_FLOOR) {
        return Err(CollisionError::DegenerateSeparation(denom.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(filter.lambda_sum() * r_min / denom)
}

/// Repelling potential over all neighbors; each neighbor contributes only
/// when its window enters the safety radius.
pub fn potential<T: Real>(windows: &[(&[T], &SpatialFilter<T>)], r_min: T) -> Result<T, CollisionError> {
    let mut phi = T::zero();
    for (d, f) in windows {
        if d.is_empty() {
            return Err(CollisionError::EmptyWindow);
        }
        phi += potential_term(d, f, r_min, on_collision_course(d, r_min))?;
    }
    Ok(phi)
}

/// Cost multiplied by the potential.
pub fn modified_cost<T: Real>(cost: T, phi: T) -> T {
    cost * (T::one() + phi)
}

/// Upper bound on the filter ratio `lambda_max / lambda_min` that keeps the
/// modified optimum stable while expanding separation.
#[allow(clippy::too_many_arguments)]
pub fn ratio_bound<T: Real>(r_floor: T, horizon: usize, r_min: T, v_max: T, l_hx: T, l_qx: T, l_hf: T) -> T {
    let np = T::from_usize(horizon).expect("horizon fits scalar");
    let reach = np * r_min + np * (np - T::one()) * v_max;
    let lipschitz = (np - T::one()) * (l_hx + l_qx) + l_hf;
    r_floor / reach / lipschitz
}

/// Result of the geometric-progression filter design.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterDesign<T> {
    /// Weights in rank order, largest first.
    pub rank_weights: Vec<T>,
    /// Common ratio actually used.
    pub ratio: T,
    /// `b * a <= 1`: the formula gave `r >= 1` and the ratio was clamped.
    pub degenerate: bool,
    /// `lambda_max / lambda_min < a` holds for the produced weights.
    pub within_bound: bool,
}

impl<T: Real> FilterDesign<T> {
    pub fn flagged(&self) -> bool {
        self.degenerate || !self.within_bound
    }

    pub fn spread(&self) -> T {
        self.rank_weights[0] / self.rank_weights[self.rank_weights.len() - 1]
    }
}

/// Geometric-progression weights `lambda_l = lambda_max r^l`, `l = 0..len-1`,
/// with `r = (b a)^(-1/(len-1))`.
pub fn design_filter_gp<T: Real>(a_bar: T, b_bar: T, lambda_max: T, len: usize) -> Result<FilterDesign<T>, CollisionError> {
    if len < 2 {
        return Err(CollisionError::InvalidDesign("window needs at least two samples"));
    }
    if !(b_bar > T::one()) {
        return Err(CollisionError::InvalidDesign("b must exceed 1"));
    }
    if !(lambda_max > T::zero() && lambda_max.is_finite()) {
        return Err(CollisionError::InvalidDesign("lambda_max must be positive"));
    }
    if !(a_bar >= T::zero()) || a_bar.is_nan() {
        return Err(CollisionError::InvalidDesign("ratio bound must be non-negative"));
    }
    let product = b_bar * a_bar;
    let exponent = -T::one() / T::from_usize(len - 1).expect("len fits scalar");
    let (ratio, degenerate) = if product <= T::one() {
        (T::lit(DEGENERATE_RATIO), true)
    } else {
        let r = product.powf(exponent);
        if r >= T::one() {
            (T::lit(DEGENERATE_RATIO), true)
        } else {
            (r, false)
        }
    };
    let mut rank_weights = Vec::with_capacity(len);
    let mut w = lambda_max;
    for _ in 0..len {
        rank_weights.push(w);
        w *= ratio;
    }
    if rank_weights.iter().any(|w| !(*w > T::zero())) {
        return Err(CollisionError::InvalidWeights);
    }
    let spread = rank_weights[0] / rank_weights[len - 1];
    Ok(FilterDesign {
        within_bound: spread < a_bar,
        rank_weights,
        ratio,
        degenerate,
    })
}

/// Separation expands when the weighted sum over the next window exceeds
/// the one over the current window.
pub fn expansion_success<T: Real>(current: &[T], next: &[T], filter: &SpatialFilter<T>) -> Result<bool, CollisionError> {
    Ok(filter.weighted_sum(current)? < filter.weighted_sum(next)?)
}
