//! JSON interchange for problems, trajectories, and gradients.
//!
//! Problem files:
//!
//! ```json
//! {
//!   "n": 1, "m": 1, "T": 2, "h0": [1.0],
//!   "steps": [
//!     { "A": {"dense": [[1.0]]}, "B": [[1.0]], "Q": [[1.0]],
//!       "R": {"dense": [[1.0]]}, "r": null },
//!     { "A": {"diag": [1.0]},  "B": [[1.0]], "Q": [[1.0]],
//!       "R": {"diag_inverse": [1.0]}, "r": [0.5] }
//!   ]
//! }
//! ```
//!
//! Matrices are row-major nested arrays; values are 64-bit decimals.
//! Trajectories serialize as `{"h": [[..]..], "u": [..], "lambda": [..],
//! "cost": c}` and gradients as per-step tensor lists plus `h0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::LqrGradients;
use crate::error::{Error, Result};
use crate::problem::{LqrProblem, LqrTrajectory, StepParams};
use crate::structured::{ActionCost, Structured};

type Rows = Vec<Vec<f64>>;

fn mat_to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_mat(rows: &Rows, what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    if r == 0 {
        return Err(Error::DimensionMismatch(format!("{what}: empty matrix")));
    }
    let c = rows[0].len();
    if c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::DimensionMismatch(format!("{what}: ragged or empty rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum StructuredDto {
    Dense(Rows),
    Diag(Vec<f64>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ActionCostDto {
    Dense(Rows),
    Diag(Vec<f64>),
    DiagInverse(Vec<f64>),
}

#[derive(Debug, Serialize, Deserialize)]
struct StepDto {
    #[serde(rename = "A")]
    a: StructuredDto,
    #[serde(rename = "B")]
    b: Rows,
    #[serde(rename = "Q")]
    q: Rows,
    #[serde(rename = "R")]
    r: ActionCostDto,
    #[serde(rename = "r")]
    affine: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProblemDto {
    n: usize,
    m: usize,
    #[serde(rename = "T")]
    horizon: usize,
    h0: Vec<f64>,
    steps: Vec<StepDto>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryDto {
    h: Rows,
    u: Rows,
    lambda: Rows,
    cost: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct GradientsDto {
    #[serde(rename = "A")]
    a: Vec<Rows>,
    #[serde(rename = "B")]
    b: Vec<Rows>,
    #[serde(rename = "Q")]
    q: Vec<Rows>,
    #[serde(rename = "R")]
    r: Vec<Rows>,
    h0: Vec<f64>,
}

pub fn problem_to_json(p: &LqrProblem) -> String {
    let dto = ProblemDto {
        n: p.state_dim,
        m: p.control_dim,
        horizon: p.horizon,
        h0: p.h0.iter().copied().collect(),
        steps: p
            .steps
            .iter()
            .map(|s| StepDto {
                a: match &s.a {
                    Structured::Dense(m) => StructuredDto::Dense(mat_to_rows(m)),
                    Structured::Diag(d) => StructuredDto::Diag(d.iter().copied().collect()),
                },
                b: mat_to_rows(&s.b),
                q: mat_to_rows(&s.q),
                r: match &s.r {
                    ActionCost::Dense(m) => ActionCostDto::Dense(mat_to_rows(m)),
                    ActionCost::Diag(d) => ActionCostDto::Diag(d.iter().copied().collect()),
                    ActionCost::DiagInverse(d) => {
                        ActionCostDto::DiagInverse(d.iter().copied().collect())
                    }
                },
                affine: s.affine.as_ref().map(|r| r.iter().copied().collect()),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&dto).expect("problem serialization cannot fail")
}

pub fn problem_from_json(text: &str) -> Result<LqrProblem> {
    let dto: ProblemDto = serde_json::from_str(text)
        .map_err(|e| Error::DimensionMismatch(format!("problem JSON parse error: {e}")))?;
    let steps = dto
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(StepParams {
                a: match &s.a {
                    StructuredDto::Dense(rows) => {
                        Structured::Dense(rows_to_mat(rows, &format!("step {} A", i + 1))?)
                    }
                    StructuredDto::Diag(d) => Structured::Diag(DVector::from_vec(d.clone())),
                },
                b: rows_to_mat(&s.b, &format!("step {} B", i + 1))?,
                q: rows_to_mat(&s.q, &format!("step {} Q", i + 1))?,
                r: match &s.r {
                    ActionCostDto::Dense(rows) => {
                        ActionCost::Dense(rows_to_mat(rows, &format!("step {} R", i + 1))?)
                    }
                    ActionCostDto::Diag(d) => ActionCost::Diag(DVector::from_vec(d.clone())),
                    ActionCostDto::DiagInverse(d) => {
                        ActionCost::DiagInverse(DVector::from_vec(d.clone()))
                    }
                },
                affine: s.affine.as_ref().map(|r| DVector::from_vec(r.clone())),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LqrProblem {
        state_dim: dto.n,
        control_dim: dto.m,
        horizon: dto.horizon,
        h0: DVector::from_vec(dto.h0),
        steps,
    })
}

pub fn trajectory_to_json(t: &LqrTrajectory) -> String {
    let dto = TrajectoryDto {
        h: t.states.iter().map(|v| v.iter().copied().collect()).collect(),
        u: t.actions.iter().map(|v| v.iter().copied().collect()).collect(),
        lambda: t.costates.iter().map(|v| v.iter().copied().collect()).collect(),
        cost: t.cost,
    };
    serde_json::to_string_pretty(&dto).expect("trajectory serialization cannot fail")
}

pub fn trajectory_from_json(text: &str) -> Result<LqrTrajectory> {
    let dto: TrajectoryDto = serde_json::from_str(text)
        .map_err(|e| Error::DimensionMismatch(format!("trajectory JSON parse error: {e}")))?;
    let vecs = |rows: &Rows| -> Vec<DVector<f64>> {
        rows.iter().map(|r| DVector::from_vec(r.clone())).collect()
    };
    Ok(LqrTrajectory {
        states: vecs(&dto.h),
        actions: vecs(&dto.u),
        costates: vecs(&dto.lambda),
        cost: dto.cost,
    })
}

pub fn gradients_to_json(g: &LqrGradients) -> String {
    let dto = GradientsDto {
        a: g.a.iter().map(mat_to_rows).collect(),
        b: g.b.iter().map(mat_to_rows).collect(),
        q: g.q.iter().map(mat_to_rows).collect(),
        r: g.r.iter().map(mat_to_rows).collect(),
        h0: g.h0.iter().copied().collect(),
    };
    serde_json::to_string_pretty(&dto).expect("gradient serialization cannot fail")
}

/// A loss-gradient file is a bare JSON array.
pub fn loss_grad_from_json(text: &str) -> Result<DVector<f64>> {
    let v: Vec<f64> = serde_json::from_str(text)
        .map_err(|e| Error::DimensionMismatch(format!("loss gradient parse error: {e}")))?;
    Ok(DVector::from_vec(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::scalar_example;

    #[test]
    fn scalar_problem_round_trips() {
        let p = scalar_example();
        let text = problem_to_json(&p);
        let back = problem_from_json(&text).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn structured_storage_round_trips() {
        let mut p = scalar_example();
        p.steps[0].a = Structured::Diag(DVector::from_vec(vec![1.0]));
        p.steps[1].a = Structured::Diag(DVector::from_vec(vec![0.5]));
        p.steps[0].r = ActionCost::DiagInverse(DVector::from_vec(vec![2.0]));
        p.steps[1].r = ActionCost::DiagInverse(DVector::from_vec(vec![4.0]));
        p.steps[1].affine = Some(DVector::from_vec(vec![0.25]));
        let text = problem_to_json(&p);
        assert!(text.contains("diag_inverse"));
        let back = problem_from_json(&text).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn malformed_json_is_rejected() {
        assert!(problem_from_json("{\"n\": 1").is_err());
        assert!(problem_from_json("{\"n\":1,\"m\":1,\"T\":1,\"h0\":[1],\"steps\":[]}").is_ok());
        let ragged = r#"{"n":2,"m":1,"T":1,"h0":[1,0],"steps":[
            {"A":{"dense":[[1,0],[0]]},"B":[[1],[0]],"Q":[[1,0],[0,1]],"R":{"dense":[[1]]},"r":null}]}"#;
        assert!(problem_from_json(ragged).is_err());
    }
}
