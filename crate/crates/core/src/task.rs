use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};

/// Learning task served by a model or a cross-validation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = MklError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "class" | "svm" => Ok(Task::Classification),
            "regression" | "reg" | "krr" => Ok(Task::Regression),
            other => Err(MklError::InvalidParameter(format!("unknown task `{other}`"))),
        }
    }
}

/// Supervision attached to a dataset: ±1 labels or real targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub task: Task,
    pub values: Vec<f64>,
}

impl Targets {
    pub fn labels(values: Vec<f64>) -> Result<Self> {
        check_labels(&values)?;
        Ok(Targets {
            task: Task::Classification,
            values,
        })
    }

    pub fn regression(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MklError::NonFinite("regression targets"));
        }
        Ok(Targets {
            task: Task::Regression,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        Targets {
            task: self.task,
            values: idx.iter().map(|&i| self.values[i]).collect(),
        }
    }
}

/// Labels must be exactly ±1 and contain both classes.
pub fn check_labels(y: &[f64]) -> Result<()> {
    if let Some(v) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(MklError::InvalidLabels(format!("label {v} is not +1 or -1")));
    }
    let pos = y.iter().any(|&v| v > 0.0);
    let neg = y.iter().any(|&v| v < 0.0);
    if !(pos && neg) {
        return Err(MklError::InvalidLabels("both classes must be present".into()));
    }
    Ok(())
}
