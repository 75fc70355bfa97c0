//! Dual-branch residual backbone: convolution kernels, model containers,
//! forward evaluation, and the hand-written backward pass.

pub mod conv;
pub mod grad;
pub mod model;

pub use conv::{conv2d_backward, conv2d_forward, relu, relu_backward, ConvGrads, ConvParams};
pub use grad::{
    backward_batch, softmax_cross_entropy, BodyGrads, BranchGrads, DualGrads, Gradients,
    LevelGrads,
};
pub use model::{
    aggregate, branch_forward, extend_head, level_forward, pooled_embedding, scaled_forward,
    AggregationWeights, AlphaPair, ArchConfig, BaseBackbone, Body, BranchEval, BranchKind,
    BranchParams, ClassifierHead, DualLevel, ForwardTrace, LevelParams, LevelTrace, Model,
    ModelVariant, ScaleParams, ALPHA_SUM_TOL,
};
