use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    /// max over elements of `|analytic - numeric| / max(|numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares analytic gradients against central differences.
///
/// `loss` maps a full parameter list to `(value, analytic gradients)`; it is
/// called twice per scalar parameter with that element shifted by `±step`.
pub fn finite_diff_check<F>(params: &[Tensor<f64>], names: &[String], loss: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    if names.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameter groups but {} names",
            params.len(),
            names.len()
        )));
    }
    if params.is_empty() {
        return Ok(GradCheckReport {
            tolerance,
            groups: Vec::new(),
        });
    }
    let (_, analytic) = loss(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Contract("loss returned the wrong number of gradients".into()));
    }

    let mut work = params.to_vec();
    let mut groups = Vec::with_capacity(params.len());
    for (g, name) in names.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..params[g].len() {
            let orig = params[g].data()[i];
            work[g].data_mut()[i] = orig + step;
            let (up, _) = loss(&work)?;
            work[g].data_mut()[i] = orig - step;
            let (down, _) = loss(&work)?;
            work[g].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let abs = (analytic[g].data()[i] - numeric).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / numeric.abs().max(1e-8));
        }
        groups.push(GroupError {
            name: name.clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            elements: params[g].len(),
        });
    }
    Ok(GradCheckReport { tolerance, groups })
}
