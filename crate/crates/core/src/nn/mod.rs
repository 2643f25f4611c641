//! Dense tensors, a reverse-mode tape, the segmentation network and its
//! training objective and optimizer.

mod loss;
mod objective;
mod optim;
mod segnet;
mod tape;
mod tensor;

pub use loss::{
    mean_seg_loss, mean_seg_loss_gradient, output_batch, seg_loss, softmax, total_loss, MultiLevelWeights,
};
pub use objective::{LossBreakdown, ObjectiveConfig, ObjectiveForward};
pub use optim::{OptimConfig, Sgd};
pub use segnet::{ForwardTrace, SegNet, SegNetConfig, HIGH_LEVEL, LOW_LEVEL, NUM_LEVELS, TOTAL_STRIDE};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
