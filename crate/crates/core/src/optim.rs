//! Parameter update rules over the model's named arrays.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub adam: AdamParams,
    first_moment: Option<Params<T>>,
    second_moment: Option<Params<T>>,
    pub step_count: u64,
}

fn zeros_like<T: Scalar>(reference: &Params<T>) -> Params<T> {
    let mut out = reference.clone();
    for (_, array) in out.named_arrays_mut() {
        array.fill(T::zero());
    }
    out
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            adam: AdamParams::default(),
            first_moment: None,
            second_moment: None,
            step_count: 0,
        }
    }

    pub fn with_adam(adam: AdamParams) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            adam,
            first_moment: None,
            second_moment: None,
            step_count: 0,
        }
    }

    /// One in-place update of `params` from accumulated `grads`.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {lr} must be finite and non-negative"
            )));
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let step = c::<T>(lr);
                for ((pname, p), (gname, g)) in params
                    .named_arrays_mut()
                    .into_iter()
                    .zip(grads.named_arrays())
                {
                    check_aligned(&pname, p.dim(), &gname, g.dim())?;
                    p.zip_mut_with(g, |pv, &gv| *pv = *pv - step * gv);
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.is_none() {
                    self.first_moment = Some(zeros_like(grads));
                    self.second_moment = Some(zeros_like(grads));
                }
                let b1 = c::<T>(self.adam.beta1);
                let b2 = c::<T>(self.adam.beta2);
                let eps = c::<T>(self.adam.epsilon);
                let t = self.step_count as i32;
                let corr1 = c::<T>(1.0 - self.adam.beta1.powi(t));
                let corr2 = c::<T>(1.0 - self.adam.beta2.powi(t));
                let step = c::<T>(lr);
                let m_params = self.first_moment.as_mut().unwrap();
                let v_params = self.second_moment.as_mut().unwrap();
                for ((((pname, p), (gname, g)), (_, m)), (_, v)) in params
                    .named_arrays_mut()
                    .into_iter()
                    .zip(grads.named_arrays())
                    .zip(m_params.named_arrays_mut())
                    .zip(v_params.named_arrays_mut())
                {
                    check_aligned(&pname, p.dim(), &gname, g.dim())?;
                    m.zip_mut_with(g, |mv, &gv| *mv = b1 * *mv + (T::one() - b1) * gv);
                    v.zip_mut_with(g, |vv, &gv| *vv = b2 * *vv + (T::one() - b2) * gv * gv);
                    ndarray::Zip::from(&mut *p)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|pv, &mv, &vv| {
                            let m_hat = mv / corr1;
                            let v_hat = vv / corr2;
                            *pv = *pv - step * m_hat / (v_hat.sqrt() + eps);
                        });
                }
            }
        }
        Ok(())
    }
}

fn check_aligned(
    pname: &str,
    pdim: (usize, usize),
    gname: &str,
    gdim: (usize, usize),
) -> Result<()> {
    if pname != gname || pdim != gdim {
        return Err(Error::ParamMismatch(format!(
            "parameter {pname} {pdim:?} vs gradient {gname} {gdim:?}"
        )));
    }
    Ok(())
}
