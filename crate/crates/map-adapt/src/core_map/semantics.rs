//! Sparse per-voxel semantic label distributions.
//!
//! A voxel's belief over N labels is stored as a short vector of explicitly
//! tracked labels plus one shared "remainder" probability for every label not
//! in the vector. Measurement likelihoods have the same shape (observed
//! labels get their network score, the rest share a floor), so a Bayesian
//! update maps sparse state to sparse state and never needs the dense vector.

use crate::error::{Error, Result};

/// Likelihood floor for labels absent from an observation.
pub const LIKELIHOOD_FLOOR: f64 = 0.01;

/// Sparse categorical distribution over `n_labels` classes.
///
/// Invariant: `sum(probs) + (n_labels - labels.len()) * remainder == 1`
/// (up to rounding), and every stored probability is >= `remainder`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticDistribution {
    labels: Vec<u16>,
    probs: Vec<f64>,
    remainder: f64,
    n_labels: u32,
}

impl SemanticDistribution {
    /// Fresh uniform distribution: nothing stored, remainder = 1/N.
    pub fn new(n_labels: u32) -> Self {
        assert!(n_labels >= 2, "need at least two labels");
        SemanticDistribution {
            labels: Vec::new(),
            probs: Vec::new(),
            remainder: 1.0 / n_labels as f64,
            n_labels,
        }
    }

    /// Rebuild a distribution from stored fields (deserialization).
    /// Preserves the stored order, which the update rule relies on.
    pub(crate) fn from_parts(
        labels: Vec<u16>,
        probs: Vec<f64>,
        remainder: f64,
        n_labels: u32,
    ) -> Result<Self> {
        if n_labels < 2 || labels.len() != probs.len() || labels.len() >= n_labels as usize {
            return Err(Error::validation("inconsistent semantic record shape"));
        }
        for (i, &l) in labels.iter().enumerate() {
            if u32::from(l) >= n_labels || labels[..i].contains(&l) {
                return Err(Error::validation(format!("bad stored label {l}")));
            }
        }
        if !(remainder.is_finite() && remainder >= 0.0)
            || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0))
        {
            return Err(Error::validation("semantic probabilities out of range"));
        }
        let d = SemanticDistribution {
            labels,
            probs,
            remainder,
            n_labels,
        };
        if (d.mass() - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "semantic mass {} is not 1",
                d.mass()
            )));
        }
        Ok(d)
    }

    pub fn n_labels(&self) -> u32 {
        self.n_labels
    }

    /// Labels tracked explicitly, in promotion order.
    pub fn stored(&self) -> impl Iterator<Item = (u16, f64)> + '_ {
        self.labels.iter().copied().zip(self.probs.iter().copied())
    }

    pub fn stored_len(&self) -> usize {
        self.labels.len()
    }

    /// Shared probability of every label not stored explicitly.
    pub fn remainder(&self) -> f64 {
        self.remainder
    }

    /// True if no observation has ever been fused.
    pub fn is_fresh(&self) -> bool {
        self.labels.is_empty() && self.remainder == 1.0 / self.n_labels as f64
    }

    /// Probability of an arbitrary label.
    pub fn prob(&self, label: u16) -> f64 {
        match self.labels.iter().position(|&l| l == label) {
            Some(i) => self.probs[i],
            None => self.remainder,
        }
    }

    /// Most probable label and its probability. Ties resolve to the smallest
    /// label id; `None` while no label is stored.
    pub fn best(&self) -> Option<(u16, f64)> {
        let mut best: Option<(u16, f64)> = None;
        for (&l, &p) in self.labels.iter().zip(self.probs.iter()) {
            best = match best {
                None => Some((l, p)),
                Some((bl, bp)) => {
                    if p > bp || (p == bp && l < bl) {
                        Some((l, p))
                    } else {
                        Some((bl, bp))
                    }
                }
            };
        }
        best
    }

    /// Total probability mass (diagnostic; 1.0 up to rounding).
    pub fn mass(&self) -> f64 {
        let stored: f64 = self.probs.iter().sum();
        stored + (self.n_labels as usize - self.labels.len()) as f64 * self.remainder
    }

    /// Fuse one observation with reliability weight `w` (typically 1/z^2).
    ///
    /// `observations` holds up to four (label, score) pairs from a semantic
    /// segmentation; every unobserved label gets the likelihood
    /// `max(LIKELIHOOD_FLOOR, leftover / (N - |observations|))`. The posterior
    /// is `prior * likelihood^w`, renormalized. Observed labels whose
    /// posterior exceeds the remainder are promoted into the stored vector.
    pub fn update(&mut self, observations: &[(u16, f64)], w: f64) -> Result<()> {
        if observations.is_empty() || observations.len() > 4 {
            return Err(Error::validation(format!(
                "semantic update takes 1..=4 observations, got {}",
                observations.len()
            )));
        }
        if observations.len() >= self.n_labels as usize {
            return Err(Error::validation(
                "more observed labels than the label table holds",
            ));
        }
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::validation(format!("non-positive weight {w}")));
        }
        let mut sum_obs = 0.0;
        for &(label, p) in observations {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::validation(format!(
                    "observation probability {p} for label {label} outside (0, 1]"
                )));
            }
            if u32::from(label) >= self.n_labels {
                return Err(Error::validation(format!(
                    "label {label} outside table of {} labels",
                    self.n_labels
                )));
            }
            if observations.iter().filter(|&&(l, _)| l == label).count() > 1 {
                return Err(Error::validation(format!("duplicate label {label}")));
            }
            sum_obs += p;
        }

        let floor =
            (1.0 - sum_obs) / (self.n_labels as usize - observations.len()) as f64;
        let unobserved_lik = floor.max(LIKELIHOOD_FLOOR);
        let unobserved_factor = unobserved_lik.powf(w);

        // Posterior for stored labels.
        for (i, &l) in self.labels.iter().enumerate() {
            let lik = match observations.iter().find(|&&(ol, _)| ol == l) {
                Some(&(_, p)) => p,
                None => unobserved_lik,
            };
            self.probs[i] *= lik.powf(w);
        }
        // Observed labels still living in the remainder. Promotion is decided
        // before normalizing (the comparison is scale-invariant); a label that
        // does not beat the shared remainder stays folded into it, which is
        // the closest state the sparse form can represent.
        let remainder_post = self.remainder * unobserved_factor;
        let mut promoted: Vec<(u16, f64)> = Vec::new();
        for &(l, p) in observations {
            if !self.labels.contains(&l) {
                let post = self.remainder * p.powf(w);
                if post > remainder_post {
                    promoted.push((l, post));
                }
            }
        }

        let in_remainder =
            self.n_labels as usize - self.labels.len() - promoted.len();
        let z: f64 = self.probs.iter().sum::<f64>()
            + promoted.iter().map(|&(_, p)| p).sum::<f64>()
            + in_remainder as f64 * remainder_post;
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::Internal(format!(
                "semantic update normalizer degenerate ({z})"
            )));
        }

        for p in &mut self.probs {
            *p /= z;
        }
        self.remainder = remainder_post / z;
        for (l, p) in promoted {
            self.labels.push(l);
            self.probs.push(p / z);
        }

        // A stored label observed with a score below the unobserved floor can
        // sink under the remainder; fold it back so dominance holds. One
        // uniform renormalization cannot create new violations.
        if self.probs.iter().any(|&p| p < self.remainder) {
            let rem = self.remainder;
            let mut retained_labels = Vec::with_capacity(self.labels.len());
            let mut retained_probs = Vec::with_capacity(self.probs.len());
            for (&l, &p) in self.labels.iter().zip(self.probs.iter()) {
                if p >= rem {
                    retained_labels.push(l);
                    retained_probs.push(p);
                }
            }
            self.labels = retained_labels;
            self.probs = retained_probs;
            let mass: f64 = self.probs.iter().sum::<f64>()
                + (self.n_labels as usize - self.labels.len()) as f64 * rem;
            for p in &mut self.probs {
                *p /= mass;
            }
            self.remainder = rem / mass;
        }
        Ok(())
    }
}
