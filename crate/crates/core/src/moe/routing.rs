//! Linear top-k routing and the balancing loss.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Real, Tensor};

/// Routing of `T` tokens over `M` experts for one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<S> {
    /// Router probabilities, `T × M`.
    pub probs: Tensor<S>,
    /// Selected experts, `T × topk` row-major, best first.
    pub selected: Vec<usize>,
    /// Combination weights, `T × topk`: the selected probabilities
    /// renormalized to sum to one per token.
    pub gates: Tensor<S>,
    pub topk: usize,
}

impl<S: Real> RoutingDecision<S> {
    pub fn tokens(&self) -> usize {
        self.probs.rows()
    }

    pub fn experts(&self) -> usize {
        self.probs.cols()
    }

    pub fn selected_for(&self, t: usize) -> &[usize] {
        &self.selected[t * self.topk..(t + 1) * self.topk]
    }

    /// `(token, slot)` pairs assigned to each expert, in token-then-slot order.
    pub fn assignments(&self) -> Vec<Vec<(usize, usize)>> {
        let mut per = vec![Vec::new(); self.experts()];
        for t in 0..self.tokens() {
            for (s, &e) in self.selected_for(t).iter().enumerate() {
                per[e].push((t, s));
            }
        }
        per
    }

    /// Assignment slots per expert.
    pub fn load_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.experts()];
        for &e in &self.selected {
            c[e] += 1;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let (t, m) = (self.tokens(), self.experts());
        if self.selected.len() != t * self.topk || self.gates.shape() != [t, self.topk] {
            return Err(Error::shape("routing decision", &[t, self.topk], self.gates.shape()));
        }
        if let Some(&e) = self.selected.iter().find(|&&e| e >= m) {
            return Err(Error::Index {
                what: "expert",
                index: e,
                len: m,
            });
        }
        Ok(())
    }
}

/// Indices of the `k` largest entries, descending; ties go to the lower index.
pub fn select_topk<S: Real>(row: &[S], k: usize) -> Vec<usize> {
    let mut taken = vec![false; row.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &v) in row.iter().enumerate() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if v <= row[b] => {}
                _ => best = Some(i),
            }
        }
        let b = best.expect("k <= row length");
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Selected probabilities divided by their sum, per row.
pub(crate) fn renormalize<S: Real>(probs: &Tensor<S>, selected: &[usize], k: usize) -> Tensor<S> {
    let mut gates = Vec::with_capacity(selected.len());
    for t in 0..probs.rows() {
        let picked: Vec<S> = selected[t * k..(t + 1) * k].iter().map(|&e| probs.at(t, e)).collect();
        let sum: S = picked.iter().copied().sum();
        gates.extend(picked.into_iter().map(|p| p / sum));
    }
    Tensor::new(vec![probs.rows(), k], gates).expect("gate shape")
}

/// Routes tokens through a linear router `W: d × M`.
pub fn route<S: Real>(tokens: &Tensor<S>, router: &Tensor<S>, topk: usize) -> Result<RoutingDecision<S>> {
    let m = router.cols();
    if topk == 0 || topk > m {
        return Err(Error::Config(format!("topk {topk} with {m} experts")));
    }
    let logits = kernels::matmul(tokens, router)?;
    let probs = kernels::softmax_rows(&logits)?;
    let selected: Vec<usize> = (0..probs.rows()).flat_map(|t| select_topk(probs.row(t), topk)).collect();
    let gates = renormalize(&probs, &selected, topk);
    Ok(RoutingDecision {
        probs,
        selected,
        gates,
        topk,
    })
}

/// Router vars produced inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct RoutedVars {
    pub probs: Var,
    pub gates: Var,
}

/// Graph form of [`route`]; probabilities and gates stay differentiable,
/// the selection itself is not.
pub fn route_graph<S: Real>(g: &mut Graph<S>, h: Var, router: Var, topk: usize) -> Result<(RoutedVars, RoutingDecision<S>)> {
    let m = g.value(router).cols();
    if topk == 0 || topk > m {
        return Err(Error::Config(format!("topk {topk} with {m} experts")));
    }
    let logits = g.matmul(h, router)?;
    let probs = g.softmax(logits)?;
    let pv = g.value(probs).clone();
    let selected: Vec<usize> = (0..pv.rows()).flat_map(|t| select_topk(pv.row(t), topk)).collect();
    let picked = g.gather_cols(probs, &selected)?;
    let gates = g.normalize_rows(picked)?;
    let decision = RoutingDecision {
        gates: g.value(gates).clone(),
        probs: pv,
        selected,
        topk,
    };
    Ok((RoutedVars { probs, gates }, decision))
}

/// Per-expert assignment fractions `f_i` over all `T·topk` slots.
pub fn assignment_fractions<S: Real>(decision: &RoutingDecision<S>) -> Vec<f64> {
    let denom = (decision.tokens() * decision.topk) as f64;
    decision.load_counts().into_iter().map(|c| c as f64 / denom).collect()
}

/// `α · M · Σ_i f_i · P̄_i`.
pub fn aux_balance_loss<S: Real>(decision: &RoutingDecision<S>, alpha: f64) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::Config("aux loss coefficient must be >= 0".into()));
    }
    let (t, m) = (decision.tokens(), decision.experts());
    if t == 0 {
        return Err(Error::Invalid("aux loss over zero tokens".into()));
    }
    // Σ f_i P̄_i with f_i = c_i / (T·k), dividing once at the end.
    let mut weighted = 0.0;
    for (i, c) in decision.load_counts().into_iter().enumerate() {
        let mean_p = (0..t).map(|r| decision.probs.at(r, i).to_f64_lossy()).sum::<f64>() / t as f64;
        weighted += c as f64 * mean_p;
    }
    Ok(alpha * m as f64 * (weighted / (t * decision.topk) as f64))
}

/// Graph form; differentiable through the mean router probabilities.
pub fn aux_balance_loss_graph<S: Real>(g: &mut Graph<S>, probs: Var, decision: &RoutingDecision<S>, alpha: f64) -> Result<Var> {
    if decision.tokens() == 0 {
        return Err(Error::Invalid("aux loss over zero tokens".into()));
    }
    let m = decision.experts();
    let f: Vec<S> = assignment_fractions(decision).into_iter().map(S::lit).collect();
    let f = g.constant(Tensor::new(vec![1, m], f)?);
    let mean_p = g.mean_rows(probs);
    let prod = g.mul(mean_p, f)?;
    let s = g.sum_all(prod);
    Ok(g.scale(s, S::lit(alpha * m as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_router_is_uniform_and_breaks_ties_low() {
        let tokens = Tensor::<f64>::full(&[3, 8], 0.5);
        let d = route(&tokens, &Tensor::zeros(&[8, 4]), 2).unwrap();
        for t in 0..3 {
            assert_eq!(d.selected_for(t), &[0, 1]);
            for e in 0..4 {
                assert_eq!(d.probs.at(t, e), 0.25);
            }
            assert_eq!(d.gates.row(t), &[0.5, 0.5]);
        }
    }

    #[test]
    fn single_expert_gate_is_one() {
        let tokens = Tensor::<f64>::full(&[2, 3], 0.3);
        let router = Tensor::<f64>::full(&[3, 1], 1.7);
        let d = route(&tokens, &router, 1).unwrap();
        assert_eq!(d.gates.data(), &[1.0, 1.0]);
        assert_eq!(d.selected, vec![0, 0]);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        assert_eq!(select_topk(&[0.2, 0.4, 0.4, 0.0], 2), vec![1, 2]);
        assert_eq!(select_topk(&[0.25; 4], 3), vec![0, 1, 2]);
        assert_eq!(select_topk(&[0.1, 0.7, 0.2], 1), vec![1]);
    }

    #[test]
    fn aux_loss_uniform_and_collapsed() {
        let probs = Tensor::<f64>::full(&[4, 4], 0.25);
        let d = RoutingDecision {
            probs,
            selected: vec![0, 1, 2, 3, 0, 1, 2, 3],
            gates: Tensor::full(&[4, 2], 0.5),
            topk: 2,
        };
        assert!((aux_balance_loss(&d, 0.01).unwrap() - 0.01).abs() < 1e-15);

        let mut onehot = Tensor::<f64>::zeros(&[3, 4]);
        for t in 0..3 {
            onehot.data_mut()[t * 4] = 1.0;
        }
        let d = RoutingDecision {
            probs: onehot,
            selected: vec![0, 0, 0],
            gates: Tensor::full(&[3, 1], 1.0),
            topk: 1,
        };
        assert!((aux_balance_loss(&d, 0.5).unwrap() - 0.5 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn aux_loss_rejects_empty() {
        let d = RoutingDecision::<f64> {
            probs: Tensor::zeros(&[0, 4]),
            selected: vec![],
            gates: Tensor::zeros(&[0, 2]),
            topk: 2,
        };
        assert!(aux_balance_loss(&d, 0.1).is_err());
    }
}
