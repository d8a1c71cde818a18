use super::{Graph, Tensor, Var};
use crate::error::TensorError;

type TResult<T> = Result<T, TensorError>;

/// KL(q‖p) between two plain distributions. Entries with `q == 0`
/// contribute nothing.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> TResult<f64> {
    if q.len() != p.len() {
        return Err(TensorError::Dimension { op: "kl_divergence", a: vec![q.len()], b: vec![p.len()] });
    }
    let mut kl = 0.0;
    for (i, (&qi, &pi)) in q.iter().zip(p).enumerate() {
        if qi > 0.0 {
            if pi <= 0.0 {
                return Err(TensorError::InfiniteDivergence { index: i });
            }
            kl += qi * (qi.ln() - pi.ln());
        }
    }
    Ok(kl)
}

impl Graph<'_> {
    pub fn zero(&mut self) -> Var {
        self.constant(Tensor::scalar(0.0)).expect("zero is finite")
    }

    /// Mean over kept rows of `-log softmax(logits)[t, targets[t]]`.
    /// `ignore[t] == true` drops row `t` from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<&[bool]>) -> TResult<Var> {
        let (rows, vocab) = {
            let t = self.value(logits);
            (t.rows(), t.cols())
        };
        if targets.len() != rows || ignore.is_some_and(|m| m.len() != rows) {
            return Err(TensorError::Dimension { op: "cross_entropy", a: vec![rows, vocab], b: vec![targets.len()] });
        }
        if let Some(&tok) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::Vocabulary { token: tok, vocab });
        }
        let picks: Vec<(usize, usize)> = targets
            .iter()
            .enumerate()
            .filter(|(t, _)| !ignore.is_some_and(|m| m[*t]))
            .map(|(t, &w)| (t, w))
            .collect();
        if picks.is_empty() {
            return Err(TensorError::InvalidShape(vec![0]));
        }
        let n = picks.len() as f64;
        let logp = self.log_softmax(logits)?;
        let nll = self.nll_sum(logp, &picks)?;
        self.scale(nll, 1.0 / n)
    }

    /// `-Σ log_probs[r, c]` over the `(r, c)` picks.
    pub fn nll_sum(&mut self, log_probs: Var, picks: &[(usize, usize)]) -> TResult<Var> {
        let sel = self.pick(log_probs, picks)?;
        let s = self.sum(sel)?;
        self.scale(s, -1.0)
    }

    /// KL(q‖p) for a constant teacher `q` and a student distribution node `p`
    /// of the same length. Gradient reaches `p` only.
    pub fn kl_divergence(&mut self, q: &Tensor, p: Var) -> TResult<Var> {
        let pv = self.value(p).data().to_vec();
        let n = pv.len();
        if q.len() != n {
            return Err(TensorError::Dimension { op: "kl_divergence", a: q.shape().to_vec(), b: self.value(p).shape().to_vec() });
        }
        let cols = self.value(p).cols();
        let mut idx = Vec::new();
        let mut coef = Vec::new();
        let mut entropy_term = 0.0;
        for (i, (&qi, &pi)) in q.data().iter().zip(&pv).enumerate() {
            if qi > 0.0 {
                if pi <= 0.0 {
                    return Err(TensorError::InfiniteDivergence { index: i });
                }
                idx.push((i / cols, i % cols));
                coef.push(qi);
                entropy_term += qi * qi.ln();
            }
        }
        if idx.is_empty() {
            return Ok(self.zero());
        }
        let sel = self.pick(p, &idx)?;
        let logp = self.ln(sel)?;
        let w = self.constant(Tensor::vector(coef))?;
        let cross = self.mul(w, logp)?;
        let cross = self.sum(cross)?;
        let neg = self.scale(cross, -1.0)?;
        let h = self.constant(Tensor::scalar(entropy_term))?;
        self.add(neg, h)
    }

    /// `Σ_r KL(q_r ‖ p_r)` where `log_p` holds student log-probabilities
    /// row by row and `q` is a constant teacher of the same shape.
    pub fn kl_from_log_probs(&mut self, q: &Tensor, log_p: Var) -> TResult<Var> {
        if q.shape() != self.value(log_p).shape() {
            return Err(TensorError::Dimension { op: "kl_from_log_probs", a: q.shape().to_vec(), b: self.value(log_p).shape().to_vec() });
        }
        let entropy_term: f64 = q.data().iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
        let w = self.constant(q.clone())?;
        let cross = self.mul(w, log_p)?;
        let cross = self.sum(cross)?;
        let neg = self.scale(cross, -1.0)?;
        let h = self.constant(Tensor::scalar(entropy_term))?;
        self.add(neg, h)
    }

    /// `Σ (a - b)²` over all elements.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> TResult<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.sum(sq)
    }

    /// Sum of scalar nodes, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> TResult<Var> {
        let mut acc = match terms.first() {
            Some(&t) => t,
            None => return Ok(self.zero()),
        };
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }
}
