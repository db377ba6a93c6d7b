//! Knowledge-distillation objectives for the text-only student.

mod combined;
mod config;
mod crd;
mod l2;
mod nst;
mod soft_label;
mod voken;

pub use combined::combined_student_loss;
pub use config::{CrdTeacherInput, KdConfig, KdObjective};
pub use crd::{crd_critic, draw_negatives, crd_loss, crd_loss_with_grad, CrdGrad, CrdProjections, CrdState};
pub use l2::{l2_regression_loss, l2_regression_loss_with_grad};
pub use nst::{gaussian_kernel, nst_mmd2, nst_mmd2_with_grad};
pub use soft_label::{soft_label_loss, soft_label_loss_with_grad};
pub use voken::{
    assign_vokens, select_bank_members, voken_loss, voken_loss_with_grad, VokenAssignment,
    VokenBank,
};

use crate::error::{Error, Result};

pub(crate) fn same_shape<T>(
    a: &ndarray::ArrayView2<T>,
    b: &ndarray::ArrayView2<T>,
) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}
