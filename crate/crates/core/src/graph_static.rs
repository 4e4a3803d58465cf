//! Physical prior graphs and the static branch.
//!
//! Adjacency conventions: [`PriorGraph::adjacency`] is stored source-row,
//! `adjacency[src][dst] = 1` for a directed influence `src -> dst`. Every
//! matrix that aggregates node features (`S = A X`) is receiver-row, so the
//! prior enters the model as [`PriorGraph::aggregation_mask`], its transpose.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DsprError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Actuator,
    State,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub role: Role,
}

/// Binary physics-consistent interaction mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorGraph {
    variables: Vec<Variable>,
    adjacency: Vec<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct PriorDocument {
    variables: Vec<Variable>,
    edges: Vec<[usize; 2]>,
}

impl PriorGraph {
    /// Applies the construction rules: every actuator drives the target,
    /// each confirmed edge is added, self-loops are rejected.
    pub fn build(variables: Vec<Variable>, confirmed_edges: &[(usize, usize)]) -> Result<Self> {
        let n = variables.len();
        let targets: Vec<usize> = variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.role == Role::Target)
            .map(|(i, _)| i)
            .collect();
        if targets.len() != 1 {
            return Err(DsprError::Contract(format!(
                "exactly one target variable required, found {}",
                targets.len()
            )));
        }
        let target = targets[0];
        let mut adjacency = vec![vec![0u8; n]; n];
        for (i, v) in variables.iter().enumerate() {
            if v.role == Role::Actuator {
                adjacency[i][target] = 1;
            }
        }
        for &(src, dst) in confirmed_edges {
            if src >= n || dst >= n {
                return Err(DsprError::Contract(format!(
                    "edge ({src},{dst}) out of range for {n} variables"
                )));
            }
            if src == dst {
                return Err(DsprError::Contract(format!("self-loop ({src},{src}) is not allowed")));
            }
            adjacency[src][dst] = 1;
        }
        let g = Self { variables, adjacency };
        g.validate()?;
        Ok(g)
    }

    /// Builds directly from an edge list without the actuator rule.
    pub fn from_edges(variables: Vec<Variable>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = variables.len();
        let mut adjacency = vec![vec![0u8; n]; n];
        for &(s, d) in edges {
            if s >= n || d >= n || s == d {
                return Err(DsprError::Contract(format!("invalid edge ({s},{d})")));
            }
            adjacency[s][d] = 1;
        }
        let g = Self { variables, adjacency };
        g.validate()?;
        Ok(g)
    }

    /// Checks the structural invariants: zero diagonal, binary entries, one
    /// target with at least one incoming edge.
    pub fn validate(&self) -> Result<()> {
        let n = self.variables.len();
        if self.adjacency.len() != n || self.adjacency.iter().any(|r| r.len() != n) {
            return Err(DsprError::Contract("adjacency is not square".into()));
        }
        for i in 0..n {
            if self.adjacency[i][i] != 0 {
                return Err(DsprError::Contract(format!("self-loop on variable {i}")));
            }
            if self.adjacency[i].iter().any(|&v| v > 1) {
                return Err(DsprError::Contract("adjacency must be binary".into()));
            }
        }
        let target = self.target();
        if (0..n).all(|s| self.adjacency[s][target] == 0) {
            return Err(DsprError::Contract("target variable has no incoming prior edge".into()));
        }
        Ok(())
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn names(&self) -> Vec<String> {
        self.variables.iter().map(|v| v.name.clone()).collect()
    }

    pub fn target(&self) -> usize {
        self.variables
            .iter()
            .position(|v| v.role == Role::Target)
            .expect("validated graph has a target")
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.adjacency[src][dst] == 1
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_vars();
        let mut out = Vec::new();
        for s in 0..n {
            for d in 0..n {
                if self.adjacency[s][d] == 1 {
                    out.push((s, d));
                }
            }
        }
        out
    }

    /// Source-row adjacency as a dense tensor.
    pub fn adjacency(&self) -> Tensor {
        let n = self.n_vars();
        let data = self.adjacency.iter().flatten().map(|&v| f64::from(v)).collect();
        Tensor::new(vec![n, n], data).expect("square")
    }

    /// Receiver-row mask: `mask[dst][src] = 1` for every prior edge.
    pub fn aggregation_mask(&self) -> Tensor {
        let n = self.n_vars();
        let mut m = Tensor::zeros(&[n, n]);
        for (s, d) in self.edges() {
            m.data_mut()[d * n + s] = 1.0;
        }
        m
    }

    /// Degree-preserving randomisation: the target keeps its in-degree and
    /// the sources of its edges are relabelled by a random permutation of
    /// the non-target variables. Edges not touching the target are
    /// relabelled by the same permutation. Redraws until the edge set changes
    /// (when such a permutation exists).
    pub fn shuffled(&self, rng: &mut ChaCha8Rng) -> Self {
        let n = self.n_vars();
        let target = self.target();
        let others: Vec<usize> = (0..n).filter(|&i| i != target).collect();
        let original = self.edges();
        let mut best = self.clone();
        for _ in 0..64 {
            let mut perm = others.clone();
            perm.shuffle(rng);
            let map = |i: usize| -> usize {
                if i == target {
                    target
                } else {
                    perm[others.iter().position(|&o| o == i).unwrap()]
                }
            };
            let mut adjacency = vec![vec![0u8; n]; n];
            for &(s, d) in &original {
                adjacency[map(s)][map(d)] = 1;
            }
            let cand = Self {
                variables: self.variables.clone(),
                adjacency,
            };
            let changed = cand.edges() != original;
            best = cand;
            if changed {
                break;
            }
        }
        best
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = PriorDocument {
            variables: self.variables.clone(),
            edges: self.edges().into_iter().map(|(s, d)| [s, d]).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PriorDocument = serde_json::from_str(text)?;
        let edges: Vec<(usize, usize)> = doc.edges.iter().map(|e| (e[0], e[1])).collect();
        Self::from_edges(doc.variables, &edges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Learnable state of the static branch.
#[derive(Clone, Debug)]
pub struct StaticBranch {
    pub n_vars: usize,
    pub d_model: usize,
    pub embeddings: ParamId,
    pub raw_lambda: ParamId,
    pub w_s: ParamId,
    pub b_s: ParamId,
}

impl StaticBranch {
    pub fn new(
        store: &mut ParamStore,
        n_vars: usize,
        d_model: usize,
        d_node: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !d_model.is_multiple_of(2) {
            return Err(DsprError::Config(format!("model width must be even, got {d_model}")));
        }
        Ok(Self {
            n_vars,
            d_model,
            embeddings: store.add_uniform("static.node_emb", &[n_vars, d_node], 1, rng),
            raw_lambda: store.add_zeros("static.raw_lambda", &[1]),
            w_s: store.add_uniform("static.w_s", &[d_model, d_model / 2], d_model, rng),
            b_s: store.add_uniform("static.b_s", &[d_model / 2], d_model, rng),
        })
    }

    /// `softmax_rows(relu(E E^T))`.
    pub fn learned_adjacency(&self, tape: &mut Tape, p: &Bound) -> Result<Var> {
        let e = p[self.embeddings];
        let d = tape.shape(e)[1];
        let e3 = tape.reshape(e, &[1, self.n_vars, d])?;
        let sim = tape.bmm_nt(e3, e3)?;
        let sim = tape.reshape(sim, &[self.n_vars, self.n_vars])?;
        let sim = tape.relu(sim)?;
        tape.softmax_rows(sim)
    }

    /// `lambda * mask + (1 - lambda) * learned`, `lambda = sigmoid(raw_lambda)`.
    ///
    /// With `mask = None` the prior is ablated and the learned matrix is
    /// returned unchanged.
    pub fn static_adjacency(&self, tape: &mut Tape, p: &Bound, mask: Option<Var>) -> Result<Var> {
        let learned = self.learned_adjacency(tape, p)?;
        let Some(mask) = mask else { return Ok(learned) };
        let lambda = tape.sigmoid(p[self.raw_lambda])?;
        let one_minus = tape.one_minus(lambda)?;
        let prior_part = tape.scale_by(mask, lambda)?;
        let learned_part = tape.scale_by(learned, one_minus)?;
        tape.add(prior_part, learned_part)
    }

    /// `Z = (A X) W_s + b_s` for `x_emb: [G, C, D]`, `a_s: [M, C]`; returns `[G, M, D/2]`.
    pub fn static_context(&self, tape: &mut Tape, p: &Bound, x_emb: Var, a_s: Var) -> Result<Var> {
        let sx = tape.shape(x_emb).to_vec();
        if sx.len() != 3 || sx[2] != self.d_model {
            return Err(DsprError::Shape {
                op: "static_context",
                lhs: vec![0, self.n_vars, self.d_model],
                rhs: sx,
            });
        }
        let m = tape.shape(a_s)[0];
        let g = sx[0];
        let s = tape.left_matmul(a_s, x_emb)?;
        let s = tape.reshape(s, &[g * m, self.d_model])?;
        let z = tape.matmul(s, p[self.w_s])?;
        let z = tape.add_row(z, p[self.b_s])?;
        tape.reshape(z, &[g, m, self.d_model / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn vars(roles: &[Role]) -> Vec<Variable> {
        roles
            .iter()
            .enumerate()
            .map(|(i, &role)| Variable {
                name: format!("v{i}"),
                role,
            })
            .collect()
    }

    #[test]
    fn actuators_point_at_target() {
        let g = PriorGraph::build(vars(&[Role::Actuator, Role::Actuator, Role::Target]), &[]).unwrap();
        let a = g.adjacency();
        assert_eq!(a.data().iter().sum::<f64>(), 2.0);
        assert_eq!(a.at(&[0, 2]), 1.0);
        assert_eq!(a.at(&[1, 2]), 1.0);
        let m = g.aggregation_mask();
        assert_eq!(m.at(&[2, 0]), 1.0);
    }

    #[test]
    fn self_loop_rejected() {
        let err = PriorGraph::build(vars(&[Role::Actuator, Role::State, Role::Target]), &[(1, 1)]);
        assert!(matches!(err, Err(DsprError::Contract(_))));
    }

    #[test]
    fn json_round_trip() {
        let g = PriorGraph::build(vars(&[Role::Actuator, Role::State, Role::Target]), &[(1, 2), (0, 1)]).unwrap();
        let back = PriorGraph::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn shuffle_keeps_target_in_degree() {
        let g = PriorGraph::build(
            vars(&[
                Role::Actuator,
                Role::State,
                Role::State,
                Role::State,
                Role::State,
                Role::Target,
            ]),
            &[(1, 5), (2, 5)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = g.shuffled(&mut rng);
        assert_ne!(s.edges(), g.edges());
        assert_eq!(s.edges().len(), 3);
        assert!(s.edges().iter().all(|&(_, d)| d == 5));
        s.validate().unwrap();
    }
}
